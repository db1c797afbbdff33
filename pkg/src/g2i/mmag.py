"""Multimodal attributed graphs: node records, adjacency, file I/O and a
synthetic stochastic-block-model generator.

Matrices on node records follow the column convention of the file format:
``text_tokens`` is ``d x l_text`` and ``image_features`` is ``d x m``.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import scipy.sparse as sp


class GraphFormatError(ValueError):
    """Raised when a nodes/edges file cannot be turned into a valid graph."""


@dataclass(frozen=True)
class NodeRecord:
    id: int
    text_embedding: np.ndarray
    text_tokens: np.ndarray
    image_features: np.ndarray
    text: str = ""

    @property
    def image_latent(self) -> np.ndarray:
        """Mean image-feature column; the node's ground-truth latent."""
        return self.image_features.mean(axis=1)


@dataclass(frozen=True)
class MultimodalGraph:
    nodes: tuple
    adjacency: sp.csr_matrix
    degree: np.ndarray
    # Ground truth kept by the synthetic generator; empty for ingested graphs.
    labels: np.ndarray | None = None
    styles: np.ndarray | None = None
    contents: np.ndarray | None = None

    @property
    def n_nodes(self) -> int:
        return len(self.nodes)

    @property
    def d(self) -> int:
        return self.nodes[0].image_features.shape[0]

    @property
    def m(self) -> int:
        return self.nodes[0].image_features.shape[1]

    def neighbors(self, i: int) -> np.ndarray:
        a = self.adjacency
        return a.indices[a.indptr[i]:a.indptr[i + 1]]


@dataclass
class SyntheticConfig:
    n_nodes: int = 500
    n_clusters: int = 5
    p_in: float = 0.08
    p_out: float = 0.002
    d: int = 16
    style_scale: float = 1.0
    content_scale: float = 1.0
    noise_scale: float = 0.3
    seed: int = 0
    m: int = 4
    l_text: int = 4
    # Content vectors are drawn around a small set of shared topics so that
    # semantically related neighbours exist across the graph.
    n_topics: int = 10
    topic_spread: float = 0.1
    text_noise: float = 0.3
    # Leading content coordinates visible to the text side (0 means all d).
    # Hiding part of the content makes same-topic neighbour images informative.
    text_dims: int = 8

    def validate(self) -> None:
        if self.n_nodes < 1 or self.n_clusters < 1 or self.n_clusters > self.n_nodes:
            raise ValueError("need 1 <= n_clusters <= n_nodes")
        if not 0.0 <= self.p_out < self.p_in <= 1.0:
            raise ValueError("need 0 <= p_out < p_in <= 1")
        if min(self.style_scale, self.content_scale, self.noise_scale, self.topic_spread, self.text_noise) < 0:
            raise ValueError("scales must be non-negative")
        if self.d < 1 or self.m < 1 or self.l_text < 1 or self.n_topics < 1:
            raise ValueError("d, m, l_text and n_topics must be positive")
        if not 0 <= self.text_dims <= self.d:
            raise ValueError("text_dims must lie in [0, d]")


def build_adjacency(n_nodes: int, edges) -> sp.csr_matrix:
    """Symmetric 0/1 CSR adjacency from an iterable of (src, dst) pairs.

    Self-loops are dropped and duplicate edges collapse to a single entry.
    """
    edges = np.asarray(list(edges), dtype=np.int64).reshape(-1, 2)
    edges = edges[edges[:, 0] != edges[:, 1]]
    rows = np.concatenate([edges[:, 0], edges[:, 1]])
    cols = np.concatenate([edges[:, 1], edges[:, 0]])
    a = sp.csr_matrix(
        (np.ones(rows.size), (rows, cols)), shape=(n_nodes, n_nodes), dtype=np.float64
    )
    a.sum_duplicates()
    a.data[:] = 1.0
    a.sort_indices()
    return a


def make_graph(nodes, edges, **truth) -> MultimodalGraph:
    nodes = tuple(nodes)
    adj = build_adjacency(len(nodes), edges)
    degree = np.diff(adj.indptr).astype(np.int64)
    return MultimodalGraph(nodes=nodes, adjacency=adj, degree=degree, **truth)


def normalize_adjacency(graph: MultimodalGraph) -> sp.csr_matrix:
    """Row-stochastic ``D^-1 A``; isolated nodes keep an all-zero row."""
    deg = graph.degree.astype(np.float64)
    inv = np.zeros_like(deg)
    nz = deg > 0
    inv[nz] = 1.0 / deg[nz]
    return sp.csr_matrix(sp.diags(inv) @ graph.adjacency)


def edge_list(graph: MultimodalGraph) -> list[tuple[int, int]]:
    upper = sp.triu(graph.adjacency, k=1).tocoo()
    return sorted(zip(upper.row.tolist(), upper.col.tolist()))


# --
# File I/O


def _as_columns(value, what: str, lineno: int) -> np.ndarray:
    try:
        arr = np.asarray(value, dtype=np.float64)
    except (TypeError, ValueError) as exc:
        raise GraphFormatError(f"line {lineno}: {what} is not numeric") from exc
    if arr.ndim != 2 or arr.shape[0] == 0 or arr.shape[1] == 0:
        raise GraphFormatError(f"line {lineno}: {what} must be a non-empty list of columns")
    if not np.all(np.isfinite(arr)):
        raise GraphFormatError(f"line {lineno}: {what} contains non-finite values")
    # Stored as a list of columns; transpose to d x count.
    return np.ascontiguousarray(arr.T)


def _parse_node(line: str, lineno: int) -> NodeRecord:
    try:
        obj = json.loads(line)
    except json.JSONDecodeError as exc:
        raise GraphFormatError(f"line {lineno}: invalid JSON ({exc.msg})") from exc
    if not isinstance(obj, dict):
        raise GraphFormatError(f"line {lineno}: expected a JSON object")
    for key in ("id", "text_embedding", "text_tokens", "image_features"):
        if key not in obj:
            raise GraphFormatError(f"line {lineno}: missing field {key!r}")
    nid = obj["id"]
    if not isinstance(nid, int) or isinstance(nid, bool) or nid < 0:
        raise GraphFormatError(f"line {lineno}: id must be a non-negative integer")
    emb = np.asarray(obj["text_embedding"], dtype=np.float64)
    if emb.ndim != 1 or emb.size == 0 or not np.all(np.isfinite(emb)):
        raise GraphFormatError(f"line {lineno}: text_embedding must be a finite vector")
    return NodeRecord(
        id=nid,
        text_embedding=emb,
        text_tokens=_as_columns(obj["text_tokens"], "text_tokens", lineno),
        image_features=_as_columns(obj["image_features"], "image_features", lineno),
        text=str(obj.get("text", "")),
    )


def read_nodes(path) -> list[NodeRecord]:
    records = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if line.strip():
                records.append(_parse_node(line, lineno))
    if not records:
        raise GraphFormatError(f"{path}: no nodes")
    records.sort(key=lambda r: r.id)
    ids = [r.id for r in records]
    if ids != list(range(len(ids))):
        raise GraphFormatError(f"{path}: node ids must be exactly 0..{len(ids) - 1}")
    first = records[0]
    for r in records[1:]:
        if (
            r.text_embedding.shape != first.text_embedding.shape
            or r.text_tokens.shape[0] != first.text_tokens.shape[0]
            or r.image_features.shape != first.image_features.shape
        ):
            raise GraphFormatError(f"node {r.id}: dimension mismatch with node 0")
    if first.text_tokens.shape[0] != first.image_features.shape[0]:
        raise GraphFormatError("text_tokens and image_features must share dimension d")
    return records


def read_edges(path, n_nodes: int) -> list[tuple[int, int]]:
    edges = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            parts = line.split("\t")
            if len(parts) != 2:
                raise GraphFormatError(f"line {lineno}: expected 'src<TAB>dst'")
            try:
                src, dst = int(parts[0]), int(parts[1])
            except ValueError as exc:
                raise GraphFormatError(f"line {lineno}: ids must be decimal integers") from exc
            for end in (src, dst):
                if not 0 <= end < n_nodes:
                    raise GraphFormatError(f"line {lineno}: dangling edge endpoint {end}")
            edges.append((src, dst))
    return edges


def load_graph(nodes_path, edges_path) -> MultimodalGraph:
    nodes = read_nodes(nodes_path)
    edges = read_edges(edges_path, len(nodes))
    return make_graph(nodes, edges)


def save_graph(graph: MultimodalGraph, directory) -> None:
    """Write ``nodes.jsonl``, ``edges.tsv`` and, if present, ``truth.json``."""
    out = Path(directory)
    out.mkdir(parents=True, exist_ok=True)
    with open(out / "nodes.jsonl", "w", encoding="utf-8") as fh:
        for r in graph.nodes:
            obj = {
                "id": r.id,
                "text": r.text,
                "text_embedding": r.text_embedding.tolist(),
                "text_tokens": r.text_tokens.T.tolist(),
                "image_features": r.image_features.T.tolist(),
            }
            fh.write(json.dumps(obj) + "\n")
    with open(out / "edges.tsv", "w", encoding="utf-8") as fh:
        for s, t in edge_list(graph):
            fh.write(f"{s}\t{t}\n")
    if graph.labels is not None:
        truth = {
            "labels": graph.labels.tolist(),
            "styles": graph.styles.tolist(),
            "contents": graph.contents.tolist(),
        }
        with open(out / "truth.json", "w", encoding="utf-8") as fh:
            json.dump(truth, fh)


def load_graph_dir(directory) -> MultimodalGraph:
    d = Path(directory)
    graph = load_graph(d / "nodes.jsonl", d / "edges.tsv")
    truth_path = d / "truth.json"
    if truth_path.exists():
        with open(truth_path, encoding="utf-8") as fh:
            truth = json.load(fh)
        graph = MultimodalGraph(
            nodes=graph.nodes,
            adjacency=graph.adjacency,
            degree=graph.degree,
            labels=np.asarray(truth["labels"], dtype=np.int64),
            styles=np.asarray(truth["styles"], dtype=np.float64),
            contents=np.asarray(truth["contents"], dtype=np.float64),
        )
    return graph


# --
# Synthetic generator


def _unit(x: np.ndarray, axis: int = -1) -> np.ndarray:
    norm = np.linalg.norm(x, axis=axis, keepdims=True)
    return x / np.where(norm > 0, norm, 1.0)


def synthesize_graph(config: SyntheticConfig) -> MultimodalGraph:
    """Stochastic block model with cluster "styles" and per-node "contents".

    Every image-feature column of node ``i`` in cluster ``c`` is the unit
    vector along ``style_scale*s_c + content_scale*u_i + noise_scale*eta``.
    The content vector ``u_i`` also drives the text embedding and tokens, so
    text carries content but no style.
    """
    config.validate()
    rng = np.random.default_rng(config.seed)
    n, k, d = config.n_nodes, config.n_clusters, config.d

    labels = np.arange(n) % k
    rng.shuffle(labels)

    # SBM over the upper triangle.
    iu, ju = np.triu_indices(n, k=1)
    same = labels[iu] == labels[ju]
    prob = np.where(same, config.p_in, config.p_out)
    keep = rng.random(iu.size) < prob
    edges = np.stack([iu[keep], ju[keep]], axis=1)

    styles = _unit(rng.standard_normal((k, d)))
    topics = _unit(rng.standard_normal((config.n_topics, d)))
    topic_of = rng.integers(0, config.n_topics, size=n)
    contents = _unit(topics[topic_of] + config.topic_spread * rng.standard_normal((n, d)) / np.sqrt(d))

    visible = np.zeros(d)
    visible[:config.text_dims or d] = 1.0

    nodes = []
    for i in range(n):
        u = contents[i]
        eta = rng.standard_normal((config.m, d)) / np.sqrt(d)
        cols = config.style_scale * styles[labels[i]] + config.content_scale * u + config.noise_scale * eta
        image = _unit(cols).T
        xi = rng.standard_normal((config.l_text, d)) / np.sqrt(d)
        tokens = ((u + config.text_noise * xi) * visible).T
        nodes.append(
            NodeRecord(
                id=i,
                text_embedding=u * visible,
                text_tokens=np.ascontiguousarray(tokens),
                image_features=np.ascontiguousarray(image),
                text=f"topic {topic_of[i]}",
            )
        )
    return make_graph(nodes, edges, labels=labels, styles=styles, contents=contents)
