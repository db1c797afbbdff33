"""Semantic personalized-PageRank neighbour sampling.

Structural candidates come from single-source PPR computed by power
iteration, ``pi <- beta * pi @ A_hat + (1 - beta) * e_target``; they are then
reranked by the similarity between the target's text embedding and each
candidate's mean image feature.
"""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp

from .mmag import MultimodalGraph, normalize_adjacency


@dataclass(frozen=True)
class PPRConfig:
    beta: float = 0.85
    max_iters: int = 200
    tolerance: float = 1e-10

    def __post_init__(self):
        if not 0.0 < self.beta < 1.0:
            raise ValueError(f"beta must lie in (0, 1), got {self.beta}")
        if self.max_iters < 1 or self.tolerance <= 0:
            raise ValueError("max_iters must be positive and tolerance > 0")


@dataclass(frozen=True)
class PPRVector:
    target: int
    scores: np.ndarray
    converged: bool = True
    iterations: int = 0


SIMILARITIES = ("cosine", "dot", "negative_euclidean")


def similarity(metric: str, text: np.ndarray, images: np.ndarray) -> np.ndarray:
    """Score each row of ``images`` against the ``text`` vector."""
    if metric == "cosine":
        tn = np.linalg.norm(text)
        im = np.linalg.norm(images, axis=1)
        denom = np.where(im * tn > 0, im * tn, 1.0)
        return images @ text / denom
    if metric == "dot":
        return images @ text
    if metric == "negative_euclidean":
        return -np.linalg.norm(images - text, axis=1)
    raise ValueError(f"unknown similarity {metric!r}; choose from {SIMILARITIES}")


@dataclass(frozen=True)
class SamplerConfig:
    ppr: PPRConfig = field(default_factory=PPRConfig)
    k_ppr: int = 20
    k: int = 5
    similarity: str = "cosine"
    exclude: frozenset = frozenset()

    def __post_init__(self):
        if self.k < 1 or self.k_ppr < 1:
            raise ValueError("k and k_ppr must be positive")
        if self.k > self.k_ppr:
            raise ValueError(f"k ({self.k}) must not exceed k_ppr ({self.k_ppr})")
        if self.similarity not in SIMILARITIES:
            raise ValueError(f"unknown similarity {self.similarity!r}")
        object.__setattr__(self, "exclude", frozenset(int(i) for i in self.exclude))


@dataclass(frozen=True)
class GraphCondition:
    """Selected neighbours of ``target`` and their stacked image features.

    ``z`` is ``d x (m * len(neighbor_ids))``; columns follow neighbour order.
    """

    target: int
    neighbor_ids: tuple
    z: np.ndarray
    ppr_scores: tuple = ()
    sim_scores: tuple = ()

    @property
    def empty(self) -> bool:
        return len(self.neighbor_ids) == 0


def _power_iteration(adj_t: sp.csr_matrix, dangling: np.ndarray, reset: np.ndarray, cfg: PPRConfig):
    # Works on a batch: ``reset`` is n x b with one unit column per source.
    # Each column stops on its own, so results do not depend on the batch.
    pi = reset.copy()
    b = reset.shape[1]
    converged = np.zeros(b, dtype=bool)
    iters = np.zeros(b, dtype=np.int64)
    active = np.arange(b)
    for it in range(1, cfg.max_iters + 1):
        cur, r = pi[:, active], reset[:, active]
        lost = dangling @ cur
        nxt = cfg.beta * (adj_t @ cur) + (1.0 - cfg.beta + cfg.beta * lost) * r
        delta = np.abs(nxt - cur).sum(axis=0)
        pi[:, active] = nxt
        iters[active] = it
        done = delta < cfg.tolerance
        converged[active[done]] = True
        active = active[~done]
        if active.size == 0:
            break
    return pi, converged, iters


def compute_ppr_batch(adj: sp.csr_matrix, targets, cfg: PPRConfig = PPRConfig()) -> list[PPRVector]:
    """PPR vectors for several targets in one vectorised power iteration.

    Mass that reaches a node without out-edges teleports back to the source,
    so each vector stays a probability distribution.
    """
    targets = np.asarray(targets, dtype=np.int64).reshape(-1)
    n = adj.shape[0]
    if np.any((targets < 0) | (targets >= n)):
        raise IndexError("target out of range")
    reset = np.zeros((n, targets.size))
    reset[targets, np.arange(targets.size)] = 1.0
    row_sums = np.asarray(adj.sum(axis=1)).ravel()
    dangling = (row_sums == 0).astype(np.float64)
    pi, converged, iters = _power_iteration(sp.csr_matrix(adj.T), dangling, reset, cfg)
    return [
        PPRVector(target=int(t), scores=pi[:, j].copy(), converged=bool(converged[j]), iterations=int(iters[j]))
        for j, t in enumerate(targets)
    ]


def compute_ppr(adj: sp.csr_matrix, target: int, cfg: PPRConfig = PPRConfig()) -> PPRVector:
    return compute_ppr_batch(adj, [target], cfg)[0]


def dense_ppr_oracle(adj, target: int, beta: float) -> PPRVector:
    """Direct solve of ``(I - beta * A_hat^T) x = (1 - beta) e_target``.

    Dangling rows are patched with a unit entry back to the target, which is
    the same teleport rule the power iteration uses.
    """
    a = adj.toarray() if sp.issparse(adj) else np.asarray(adj, dtype=np.float64)
    n = a.shape[0]
    if n > 200:
        raise ValueError("dense oracle limited to n <= 200")
    a = a.copy()
    a[a.sum(axis=1) == 0, target] = 1.0
    rhs = np.zeros(n)
    rhs[target] = 1.0 - beta
    x = np.linalg.solve(np.eye(n) - beta * a.T, rhs)
    return PPRVector(target=target, scores=x)


def top_k_ppr(ppr: PPRVector, k_ppr: int, exclude=frozenset()) -> list[int]:
    """Highest-scoring nodes, ties by ascending id; target and ``exclude`` removed."""
    if k_ppr < 1:
        raise ValueError("k_ppr must be >= 1")
    scores = ppr.scores
    eligible = scores > 0
    eligible[ppr.target] = False
    for i in exclude:
        if 0 <= i < scores.size:
            eligible[i] = False
    ids = np.flatnonzero(eligible)
    # lexsort: last key is primary.
    order = np.lexsort((ids, -scores[ids]))
    return ids[order][:k_ppr].tolist()


def semantic_rerank(candidates, target_text, graph: MultimodalGraph, k: int,
                    sim: str = "cosine", ppr: PPRVector | None = None) -> GraphCondition:
    if len(candidates) == 0:
        raise ValueError("semantic_rerank needs at least one candidate")
    target = ppr.target if ppr is not None else -1
    cand = np.asarray(candidates, dtype=np.int64)
    means = np.stack([graph.nodes[j].image_latent for j in cand])
    scores = similarity(sim, np.asarray(target_text, dtype=np.float64), means)
    order = np.argsort(-scores, kind="stable")[:k]
    chosen = cand[order]
    z = np.concatenate([graph.nodes[j].image_features for j in chosen], axis=1)
    return GraphCondition(
        target=int(target),
        neighbor_ids=tuple(int(j) for j in chosen),
        z=z,
        ppr_scores=tuple(float(ppr.scores[j]) for j in chosen) if ppr is not None else (),
        sim_scores=tuple(float(s) for s in scores[order]),
    )


def empty_condition(graph: MultimodalGraph, target: int) -> GraphCondition:
    return GraphCondition(target=target, neighbor_ids=(), z=np.zeros((graph.d, 0)))


def _condition_from_ppr(graph, ppr: PPRVector, cfg: SamplerConfig, text=None) -> GraphCondition:
    cands = top_k_ppr(ppr, cfg.k_ppr, cfg.exclude)
    if not cands:
        return empty_condition(graph, ppr.target)
    if text is None:
        text = graph.nodes[ppr.target].text_embedding
    return semantic_rerank(cands, text, graph, cfg.k, cfg.similarity, ppr=ppr)


def sample_neighbors(graph: MultimodalGraph, target: int, cfg: SamplerConfig = SamplerConfig(),
                     adj=None) -> GraphCondition:
    if not 0 <= target < graph.n_nodes:
        raise IndexError(f"target {target} out of range")
    adj = normalize_adjacency(graph) if adj is None else adj
    return _condition_from_ppr(graph, compute_ppr(adj, target, cfg.ppr), cfg)


def sample_neighbors_batch(graph: MultimodalGraph, targets, cfg: SamplerConfig = SamplerConfig(),
                           workers: int = 1, chunk: int = 64) -> list[GraphCondition]:
    """``sample_neighbors`` for many targets; identical for any worker count."""
    adj = normalize_adjacency(graph)
    targets = [int(t) for t in targets]
    chunks = [targets[i:i + chunk] for i in range(0, len(targets), chunk)]

    def run(ts):
        return [_condition_from_ppr(graph, p, cfg) for p in compute_ppr_batch(adj, ts, cfg.ppr)]

    if workers <= 1:
        parts = [run(c) for c in chunks]
    else:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            parts = list(pool.map(run, chunks))
    return [c for part in parts for c in part]


def random_condition(graph: MultimodalGraph, target: int, k: int, rng: np.random.Generator,
                     exclude=frozenset()) -> GraphCondition:
    """``k`` uniformly drawn nodes, ignoring structure and semantics."""
    pool = np.array([i for i in range(graph.n_nodes) if i != target and i not in exclude])
    if pool.size == 0:
        return empty_condition(graph, target)
    chosen = rng.choice(pool, size=min(k, pool.size), replace=False)
    z = np.concatenate([graph.nodes[j].image_features for j in chosen], axis=1)
    return GraphCondition(target=target, neighbor_ids=tuple(int(j) for j in chosen), z=z)


def virtual_node_condition(graph: MultimodalGraph, members, text, cfg: SamplerConfig) -> GraphCondition:
    """Condition for a new node linked to every node in ``members``.

    The graph is augmented with one extra node attached to ``members``; PPR is
    run from it and candidates are reranked against ``text``.
    """
    members = np.asarray(sorted(set(int(i) for i in members)), dtype=np.int64)
    if members.size == 0:
        raise ValueError("virtual node needs at least one member")
    n = graph.n_nodes
    extra = sp.csr_matrix(
        (np.ones(members.size), (np.zeros(members.size, dtype=np.int64), members)), shape=(1, n)
    )
    a = sp.bmat([[graph.adjacency, extra.T], [extra, None]], format="csr")
    deg = np.asarray(a.sum(axis=1)).ravel()
    inv = np.where(deg > 0, 1.0 / np.where(deg > 0, deg, 1.0), 0.0)
    adj = sp.csr_matrix(sp.diags(inv) @ a)
    ppr = compute_ppr(adj, n, cfg.ppr)
    cands = top_k_ppr(ppr, cfg.k_ppr, cfg.exclude | {n})
    if not cands:
        return empty_condition(graph, n)
    return semantic_rerank(cands, text, graph, cfg.k, cfg.similarity, ppr=ppr)
