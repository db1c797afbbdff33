"""Graph-QFormer: text-token queries attending to neighbour image features.

The stack alternates pre-LN self-attention layers (each followed by a
feed-forward sublayer) with a cross-attention block inserted after every
``cross_period`` self-attention layers. Output projections start at zero, so
an untrained encoder returns the layer-normed query tokens.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import tensorcore as tc

PREFIX = "qf"


@dataclass(frozen=True)
class QFormerConfig:
    d: int = 16
    n_layers: int = 4
    heads: int = 2
    cross_period: int = 2
    seed: int = 0
    d_head: int | None = None
    ffn_mult: int = 4

    def __post_init__(self):
        d_head = self.d // self.heads if self.d_head is None else self.d_head
        if self.heads < 1 or self.heads * d_head != self.d:
            raise ValueError(f"heads * d_head must equal d ({self.heads} * {d_head} != {self.d})")
        if self.n_layers < 1 or self.cross_period < 1:
            raise ValueError("n_layers and cross_period must be >= 1")
        if self.n_layers < self.cross_period:
            raise ValueError("configuration yields no cross-attention block")

    @property
    def cross_after(self) -> list[int]:
        """Indices of self-attention layers followed by a cross block."""
        return [i for i in range(self.n_layers) if (i + 1) % self.cross_period == 0]


@dataclass
class QFormerWeights:
    config: QFormerConfig
    params: dict = field(repr=False)


def qformer_param_dict(config: QFormerConfig, rng: np.random.Generator, zero_out: bool = True) -> dict:
    d = config.d
    p = {}
    for i in range(config.n_layers):
        p.update(tc.attention_params(f"{PREFIX}.sa{i}", d, rng, zero_out))
        p.update(tc.ffn_params(f"{PREFIX}.sa{i}.ff", d, rng, zero_out, config.ffn_mult))
        if i in config.cross_after:
            p.update(tc.attention_params(f"{PREFIX}.ca{i}", d, rng, zero_out))
            p.update(tc.ffn_params(f"{PREFIX}.ca{i}.ff", d, rng, zero_out, config.ffn_mult))
    p[f"{PREFIX}.ln_f_g"] = np.ones(d)
    p[f"{PREFIX}.ln_f_b"] = np.zeros(d)
    return p


def init_qformer(config: QFormerConfig, zero_out: bool = True) -> QFormerWeights:
    rng = np.random.default_rng(config.seed)
    return QFormerWeights(config, tc.round_to_float32(qformer_param_dict(config, rng, zero_out)))


def encode(tape: tc.ParamTape, config: QFormerConfig, query: tc.Var, z: tc.Var | None,
           zmask=None, keep_cross: bool = True):
    """Batched forward pass.

    ``query`` is ``(B, l, d)``; ``z`` is ``(B, n, d)`` with ``zmask`` marking
    real columns. Items without any neighbour feature skip the cross blocks
    exactly (their residual update is multiplied by zero). Returns the graph
    tokens ``(B, l, d)`` and the per-cross-block attention weights.
    """
    x = query
    maps = []
    B = query.shape[0]
    use_cross = keep_cross and z is not None and z.shape[1] > 0
    if use_cross:
        zmask = np.ones(z.shape[:2], dtype=bool) if zmask is None else np.asarray(zmask, dtype=bool)
        gate = zmask.any(axis=1).astype(np.float64)
        gated = not gate.all()
    for i in range(config.n_layers):
        x, _ = tc.multi_head_attention(tape, f"{PREFIX}.sa{i}", x, heads=config.heads)
        x = tc.feed_forward(tape, f"{PREFIX}.sa{i}.ff", x)
        if use_cross and i in config.cross_after:
            y, probs = tc.multi_head_attention(tape, f"{PREFIX}.ca{i}", x, kv=z, mask=zmask,
                                               heads=config.heads)
            y = tc.feed_forward(tape, f"{PREFIX}.ca{i}.ff", y)
            if gated:
                # x + gate * (y - x), done on the residual delta.
                delta = tc.add(y, tc.scale_batch(x, -np.ones(B)))
                y = tc.add(x, tc.scale_batch(delta, gate))
            x = y
            maps.append(probs)
    x = tc.layer_norm(x, tape.p(f"{PREFIX}.ln_f_g"), tape.p(f"{PREFIX}.ln_f_b"))
    return x, maps


def _check(weights: QFormerWeights, query, z):
    d = weights.config.d
    query = np.asarray(query, dtype=np.float64)
    z = np.zeros((d, 0)) if z is None else np.asarray(z, dtype=np.float64)
    if query.ndim != 2 or query.shape[0] != d or query.shape[1] < 1:
        raise ValueError(f"query must be {d} x l with l >= 1, got {query.shape}")
    if z.ndim != 2 or z.shape[0] != d:
        raise ValueError(f"z must be {d} x n, got {z.shape}")
    return query, z


def qformer_forward(weights: QFormerWeights, query, z, keep_cross: bool = True) -> np.ndarray:
    """Graph tokens ``d x l`` for one query ``d x l`` and features ``z`` (``d x n``)."""
    query, z = _check(weights, query, z)
    tape = tc.ParamTape(weights.params, record=False)
    zv = tc.const(z.T[None]) if z.shape[1] else None
    out, _ = encode(tape, weights.config, tc.const(query.T[None]), zv, keep_cross=keep_cross)
    return out.value[0].T


def cross_attention_map(weights: QFormerWeights, query, z) -> list[np.ndarray]:
    """Head-averaged ``l x n`` attention weights of every cross block."""
    query, z = _check(weights, query, z)
    if z.shape[1] == 0:
        raise ValueError("cross_attention_map needs at least one feature column")
    tape = tc.ParamTape(weights.params, record=False)
    _, maps = encode(tape, weights.config, tc.const(query.T[None]), tc.const(z.T[None]))
    return [m[0].mean(axis=0) for m in maps]


def baseline_encode(z) -> np.ndarray:
    """Pass frozen neighbour features straight through as graph tokens."""
    z = np.asarray(z, dtype=np.float64)
    if z.ndim != 2 or z.shape[1] == 0:
        raise ValueError("baseline_encode needs at least one feature column")
    return z


@dataclass(frozen=True)
class ConditioningBundle:
    h_text: np.ndarray
    h_graph: np.ndarray

    @property
    def combined(self) -> np.ndarray:
        return np.concatenate([self.h_text, self.h_graph], axis=1)


def build_conditioning(h_text, h_graph=None) -> ConditioningBundle:
    """Column-concatenate text tokens and graph tokens, text first."""
    h_text = np.asarray(h_text, dtype=np.float64)
    if h_graph is None:
        h_graph = np.zeros((h_text.shape[0], 0))
    h_graph = np.asarray(h_graph, dtype=np.float64)
    if h_text.ndim != 2 or h_graph.ndim != 2 or h_text.shape[0] != h_graph.shape[0]:
        raise ValueError(f"dimension mismatch: {h_text.shape} vs {h_graph.shape}")
    return ConditioningBundle(h_text, h_graph)
