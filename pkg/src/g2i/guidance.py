"""Classifier-free guidance over a text condition and one or more graph
conditions.

The graph terms are taken relative to the text-conditional prediction, so
``M`` graph conditions cost ``M + 2`` denoiser evaluations per step.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np


@dataclass(frozen=True)
class GuidanceSpec:
    """Text scale plus one ``(condition, scale)`` pair per graph condition."""

    s_text: float = 7.5
    graph_terms: tuple = ()

    def __post_init__(self):
        object.__setattr__(self, "graph_terms", tuple(self.graph_terms))
        scales = [self.s_text] + [s for _, s in self.graph_terms]
        if not np.all(np.isfinite(scales)):
            raise ValueError("guidance scales must be finite")
        if self.s_text < 0:
            raise ValueError("s_text must be >= 0")

    @property
    def graph_scales(self) -> list[float]:
        return [float(s) for _, s in self.graph_terms]

    @classmethod
    def single(cls, s_text: float, s_graph: float, condition=None) -> "GuidanceSpec":
        return cls(s_text, ((condition, s_graph),))


@dataclass(frozen=True)
class ScoreTriple:
    eps_uncond: np.ndarray
    eps_text: np.ndarray
    eps_graph: tuple = field(default=())

    def __post_init__(self):
        object.__setattr__(self, "eps_graph", tuple(np.asarray(e) for e in self.eps_graph))
        shape = np.shape(self.eps_uncond)
        if np.shape(self.eps_text) != shape or any(e.shape != shape for e in self.eps_graph):
            raise ValueError("score estimates must share one shape")


def compose_single(triple: ScoreTriple, s_text: float, s_graph: float) -> np.ndarray:
    if len(triple.eps_graph) != 1:
        raise ValueError(f"compose_single needs exactly one graph term, got {len(triple.eps_graph)}")
    u, t, g = triple.eps_uncond, triple.eps_text, triple.eps_graph[0]
    return u + s_text * (t - u) + s_graph * (g - t)


def compose_multi(triple: ScoreTriple, scales) -> np.ndarray:
    """``eps_u + s_T (eps_t - eps_u) + sum_k s_k (eps_k - eps_t)``.

    ``scales`` is either a :class:`GuidanceSpec` or ``(s_text, [s_1..s_M])``.
    """
    if isinstance(scales, GuidanceSpec):
        s_text, s_graph = scales.s_text, scales.graph_scales
    else:
        s_text, s_graph = scales
    s_graph = list(s_graph)
    if len(s_graph) != len(triple.eps_graph):
        raise ValueError(f"{len(s_graph)} graph scales for {len(triple.eps_graph)} graph terms")
    u, t = triple.eps_uncond, triple.eps_text
    out = u + s_text * (t - u)
    for s, g in zip(s_graph, triple.eps_graph):
        out = out + s * (g - t)
    return out
