import functools
from dataclasses import dataclass

import numpy as np
import pytest

from g2i.diffusion import ModelConfig, TrainConfig, TrainResult, init_model, train
from g2i.mmag import MultimodalGraph, NodeRecord, SyntheticConfig, make_graph, synthesize_graph
from g2i.sampling import SamplerConfig

N_TEST = 100


def tiny_node(i: int, d: int = 4, m: int = 2, l: int = 3, rng=None) -> NodeRecord:
    rng = np.random.default_rng(i) if rng is None else rng
    return NodeRecord(
        id=i,
        text_embedding=rng.standard_normal(d),
        text_tokens=rng.standard_normal((d, l)),
        image_features=rng.standard_normal((d, m)),
    )


def tiny_graph(n: int, edges, d: int = 4, m: int = 2, seed: int = 0) -> MultimodalGraph:
    rng = np.random.default_rng(seed)
    return make_graph([tiny_node(i, d, m, rng=rng) for i in range(n)], edges)


@dataclass
class TrainedRun:
    graph: MultimodalGraph
    test_ids: list
    qformer: TrainResult
    baseline: TrainResult | None = None


def _test_ids(seed: int, n_nodes: int) -> list:
    return sorted(np.random.default_rng(seed).choice(n_nodes, N_TEST, replace=False).tolist())


@functools.lru_cache(maxsize=None)
def _graph_and_ids(seed: int):
    g = synthesize_graph(SyntheticConfig(seed=seed))
    return g, _test_ids(seed, g.n_nodes)


@functools.lru_cache(maxsize=None)
def _train(seed: int, encoder: str) -> TrainResult:
    g, test = _graph_and_ids(seed)
    model = init_model(ModelConfig(seed=seed, encoder=encoder))
    return train(g, SamplerConfig(), model, TrainConfig(seed=seed), test_ids=test)


def trained_run(seed: int, with_baseline: bool = False) -> TrainedRun:
    """Default-config training run for one seed; cached for the whole session."""
    g, test = _graph_and_ids(seed)
    return TrainedRun(g, test, _train(seed, "qformer"), _train(seed, "baseline") if with_baseline else None)


@pytest.fixture(scope="session")
def run0() -> TrainedRun:
    return trained_run(0)


# -- acceptance summary: one line per criterion, printed even when output is captured

ACCEPTANCE = []


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for number, name, passed, detail in sorted(ACCEPTANCE):
        terminalreporter.write_line(f"[{'PASS' if passed else 'FAIL'}] {number}. {name}: {detail}")
