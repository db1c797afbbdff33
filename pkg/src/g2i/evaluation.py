"""Embedding-space metrics and the experiment harness."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy import stats

from .diffusion import Model, SampleRequest, sample_batch
from .mmag import MultimodalGraph
from .sampling import (SamplerConfig, random_condition, sample_neighbors_batch,
                       virtual_node_condition)

MODES = ("graph", "text_only", "random_neighbors", "baseline_encoder")
FID_RIDGE = 1e-6


def cosine_rows(a, b) -> np.ndarray:
    a = np.atleast_2d(np.asarray(a, dtype=np.float64))
    b = np.atleast_2d(np.asarray(b, dtype=np.float64))
    na = np.linalg.norm(a, axis=1)
    nb = np.linalg.norm(b, axis=1)
    if np.any(na == 0) or np.any(nb == 0):
        raise ValueError("cosine similarity undefined for a zero vector")
    return (a * b).sum(axis=1) / (na * nb)


def cosine_score(gen, gt) -> float:
    """Mean paired cosine similarity, times 100."""
    gen = np.atleast_2d(np.asarray(gen, dtype=np.float64))
    gt = np.atleast_2d(np.asarray(gt, dtype=np.float64))
    if gen.shape != gt.shape:
        raise ValueError(f"shape mismatch {gen.shape} vs {gt.shape}")
    return float(100.0 * cosine_rows(gen, gt).mean())


def _sqrt_psd(m: np.ndarray) -> np.ndarray:
    w, v = np.linalg.eigh((m + m.T) / 2)
    return (v * np.sqrt(np.clip(w, 0.0, None))) @ v.T


def frechet_from_moments(mu_a, cov_a, mu_b, cov_b, ridge: float = FID_RIDGE) -> float:
    mu_a, mu_b = np.atleast_1d(mu_a), np.atleast_1d(mu_b)
    cov_a = np.atleast_2d(cov_a) + ridge * np.eye(mu_a.size)
    cov_b = np.atleast_2d(cov_b) + ridge * np.eye(mu_b.size)
    root_a = _sqrt_psd(cov_a)
    cross = _sqrt_psd(root_a @ cov_b @ root_a)
    diff = mu_a - mu_b
    value = float(diff @ diff + np.trace(cov_a) + np.trace(cov_b) - 2.0 * np.trace(cross))
    if not np.isfinite(value):
        raise ValueError("non-finite Frechet distance")
    return max(value, 0.0)


def frechet_distance(a, b, ridge: float = FID_RIDGE) -> float:
    """Frechet distance between Gaussians fitted to two feature sets (rows = samples)."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.ndim == 1:
        a = a[:, None]
    if b.ndim == 1:
        b = b[:, None]
    if a.shape[0] < 2 or b.shape[0] < 2:
        raise ValueError("need at least two samples per set")
    return frechet_from_moments(a.mean(0), np.cov(a, rowvar=False), b.mean(0), np.cov(b, rowvar=False), ridge)


@dataclass
class EvalReport:
    mode: str
    n: int
    mean_cosine_x100: float
    fid: float
    per_node: list = field(default_factory=list)
    meta: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {"mode": self.mode, "n": self.n, "mean_cosine_x100": self.mean_cosine_x100,
                "fid": self.fid, "per_node": self.per_node, "meta": self.meta}


def item_seed(seed: int, node: int) -> int:
    """Per-(seed, node) sampling seed; independent of the batch layout."""
    return int(np.random.SeedSequence([int(seed), int(node)]).generate_state(1)[0])


def run_experiment(graph: MultimodalGraph, model: Model, test_ids, mode: str, seeds,
                   sampler_cfg: SamplerConfig = SamplerConfig(), s_text: float = 1.0,
                   s_graph: float = 1.0, workers: int = 1) -> EvalReport:
    """Generate a latent for every (test node, seed) and score it against the node's latent.

    ``text_only`` uses text guidance alone; the other modes add one graph
    term built from semantic-PPR neighbours (``graph``, ``baseline_encoder``)
    or uniformly random nodes (``random_neighbors``). ``baseline_encoder``
    requires a model trained with the pass-through encoder.
    """
    if mode not in MODES:
        raise ValueError(f"unknown mode {mode!r}; choose from {MODES}")
    if mode == "baseline_encoder" and model.config.encoder != "baseline":
        raise ValueError("baseline_encoder mode needs a model trained with encoder=baseline")
    test_ids = [int(i) for i in test_ids]
    seeds = [int(s) for s in seeds]
    masked = frozenset(test_ids)
    cfg = SamplerConfig(ppr=sampler_cfg.ppr, k_ppr=sampler_cfg.k_ppr, k=sampler_cfg.k,
                        similarity=sampler_cfg.similarity, exclude=sampler_cfg.exclude | masked)

    conds = {}
    if mode in ("graph", "baseline_encoder"):
        conds = dict(zip(test_ids, sample_neighbors_batch(graph, test_ids, cfg, workers)))

    requests, records = [], []
    for s in seeds:
        for i in test_ids:
            seed = item_seed(s, i)
            if mode == "text_only":
                zs = ()
                nbrs = ()
            elif mode == "random_neighbors":
                c = random_condition(graph, i, cfg.k, np.random.default_rng(seed), masked)
                zs, nbrs = (c.z,), c.neighbor_ids
            else:
                zs, nbrs = (conds[i].z,), conds[i].neighbor_ids
            requests.append(SampleRequest(graph.nodes[i].text_tokens, zs, seed))
            records.append({"id": i, "seed": s, "neighbors": list(nbrs)})
    scales = [] if mode == "text_only" else [s_graph]
    gen = sample_batch(model, requests, s_text, scales)
    gt = np.stack([graph.nodes[r["id"]].image_latent for r in records])
    cos = cosine_rows(gen, gt)
    for r, c in zip(records, cos):
        r["cosine_x100"] = float(100.0 * c)
    return EvalReport(
        mode=mode,
        n=len(records),
        mean_cosine_x100=float(100.0 * cos.mean()),
        fid=frechet_distance(gen, gt),
        per_node=records,
        meta={"s_text": s_text, "s_graph": s_graph if scales else 0.0, "seeds": seeds,
              "fid_ridge": FID_RIDGE, "fid_sqrt": "eigh with eigenvalues clamped at 0"},
    )


# --
# Controllability harnesses


def guidance_sweep(graph: MultimodalGraph, model: Model, target: int, grid, seeds,
                   sampler_cfg: SamplerConfig = SamplerConfig(), exclude=()) -> list[dict]:
    """Samples over a grid of ``(s_text, s_graph)``; noise fixed per seed.

    Each row reports the cosine of the sample to the target's cluster style
    and to its content vector (synthetic graphs only).
    """
    if graph.styles is None:
        raise ValueError("guidance_sweep needs a synthetic graph with ground truth")
    cfg = SamplerConfig(ppr=sampler_cfg.ppr, k_ppr=sampler_cfg.k_ppr, k=sampler_cfg.k,
                        similarity=sampler_cfg.similarity,
                        exclude=sampler_cfg.exclude | frozenset(int(i) for i in exclude))
    cond = sample_neighbors_batch(graph, [target], cfg)[0]
    style = graph.styles[graph.labels[target]]
    content = graph.contents[target]
    rows = []
    grid = [(float(a), float(b)) for a, b in grid]
    seeds = [int(s) for s in seeds]
    text = graph.nodes[target].text_tokens
    # Group by scale pair: every request in one call shares the scales.
    for s_t, s_g in grid:
        reqs = [SampleRequest(text, (cond.z,), item_seed(s, target)) for s in seeds]
        gen = sample_batch(model, reqs, s_t, [s_g])
        sc = cosine_rows(gen, np.broadcast_to(style, gen.shape))
        cc = cosine_rows(gen, np.broadcast_to(content, gen.shape))
        for s, a, b in zip(seeds, sc, cc):
            rows.append({"s_text": s_t, "s_graph": s_g, "seed": s,
                         "style_cosine": float(a), "content_cosine": float(b)})
    return rows


def sweep_spearman(rows, scale_key: str, metric_key: str) -> float:
    """Spearman correlation between a scale and the seed-averaged metric."""
    levels = sorted({r[scale_key] for r in rows})
    means = [np.mean([r[metric_key] for r in rows if r[scale_key] == v]) for v in levels]
    if len(levels) < 2:
        return float("nan")
    return float(stats.spearmanr(levels, means).statistic)


def cluster_members(graph: MultimodalGraph, cluster: int, exclude=()) -> list[int]:
    if graph.labels is None:
        raise ValueError("graph has no cluster labels")
    ex = set(int(i) for i in exclude)
    return [int(i) for i in np.flatnonzero(graph.labels == cluster) if int(i) not in ex]


def blend_sweep(graph: MultimodalGraph, model: Model, target: int, cluster_a: int, cluster_b: int,
                weights, seeds, s_text: float = 1.0, total_scale: float = 1.0,
                sampler_cfg: SamplerConfig = SamplerConfig(), exclude=()) -> list[dict]:
    """Two-condition guidance with scales ``total_scale * (w_a, w_b)``.

    Each condition comes from a virtual node linked to one cluster's members.
    Reports seed-averaged cosine to both cluster styles per weight pair.
    """
    ex = frozenset(int(i) for i in exclude) | {int(target)}
    cfg = SamplerConfig(ppr=sampler_cfg.ppr, k_ppr=sampler_cfg.k_ppr, k=sampler_cfg.k,
                        similarity=sampler_cfg.similarity, exclude=sampler_cfg.exclude | ex)
    text_emb = graph.nodes[target].text_embedding
    ca = virtual_node_condition(graph, cluster_members(graph, cluster_a, ex), text_emb, cfg)
    cb = virtual_node_condition(graph, cluster_members(graph, cluster_b, ex), text_emb, cfg)
    text = graph.nodes[target].text_tokens
    out = []
    for wa, wb in weights:
        reqs = [SampleRequest(text, (ca.z, cb.z), item_seed(s, target)) for s in seeds]
        gen = sample_batch(model, reqs, s_text, [total_scale * wa, total_scale * wb])
        sa = cosine_rows(gen, np.broadcast_to(graph.styles[cluster_a], gen.shape))
        sb = cosine_rows(gen, np.broadcast_to(graph.styles[cluster_b], gen.shape))
        out.append({"w_a": float(wa), "w_b": float(wb),
                    "style_a_cosine": float(sa.mean()), "style_b_cosine": float(sb.mean())})
    return out
