import numpy as np
import pytest
import scipy.linalg
from hypothesis import given, settings
from hypothesis import strategies as st

from g2i.diffusion import ModelConfig, init_model
from g2i.evaluation import (cosine_score, frechet_distance, frechet_from_moments, guidance_sweep, run_experiment,
                            sweep_spearman)
from g2i.mmag import SyntheticConfig, synthesize_graph


def frechet_reference(a, b, ridge=1e-6):
    """Independent reference: scipy's general matrix square root of cov_a @ cov_b."""
    ca = np.cov(a, rowvar=False) + ridge * np.eye(a.shape[1])
    cb = np.cov(b, rowvar=False) + ridge * np.eye(b.shape[1])
    root = scipy.linalg.sqrtm(ca @ cb)
    diff = a.mean(0) - b.mean(0)
    return float(diff @ diff + np.trace(ca) + np.trace(cb) - 2 * np.real(np.trace(root)))


def test_cosine_examples():
    rng = np.random.default_rng(0)
    x = rng.standard_normal((5, 4))
    assert cosine_score(x, x) == pytest.approx(100.0, abs=1e-12)
    assert cosine_score(x, -x) == pytest.approx(-100.0, abs=1e-12)
    assert cosine_score([[1, 0], [0, 2]], [[0, 3], [-1, 0]]) == 0.0
    with pytest.raises(ValueError):
        cosine_score([[0, 0]], [[1, 0]])


@settings(max_examples=50, deadline=None)
@given(seed=st.integers(0, 2**31))
def test_cosine_rescale_invariance(seed):
    rng = np.random.default_rng(seed)
    a, b = rng.standard_normal((6, 3)), rng.standard_normal((6, 3))
    ca, cb = rng.uniform(0.1, 10, (6, 1)), rng.uniform(0.1, 10, (6, 1))
    assert cosine_score(a * ca, b * cb) == pytest.approx(cosine_score(a, b), abs=1e-10)
    assert -100 <= cosine_score(a, b) <= 100


def test_frechet_same_set():
    a = np.random.default_rng(1).standard_normal((50, 4))
    assert frechet_distance(a, a) <= 1e-6


def test_frechet_1d_population_moments():
    assert frechet_from_moments(0.0, 1.0, 1.0, 1.0) == pytest.approx(1.0, abs=1e-3)
    # Samples with exact mean 0/1 and unit sample variance.
    x = np.array([-1.0, 1.0])
    x = x / np.std(x, ddof=1)
    assert frechet_distance(x, x + 1.0) == pytest.approx(1.0, abs=1e-3)


@pytest.mark.parametrize("seed", range(5))
def test_frechet_matches_reference(seed):
    rng = np.random.default_rng(seed)
    la, lb = rng.standard_normal((4, 4)), rng.standard_normal((4, 4))
    a = rng.standard_normal((200, 4)) @ la + rng.standard_normal(4)
    b = rng.standard_normal((150, 4)) @ lb + rng.standard_normal(4)
    assert abs(frechet_distance(a, b) - frechet_reference(a, b)) <= 1e-6


@settings(max_examples=30, deadline=None)
@given(seed=st.integers(0, 2**31), n=st.integers(2, 30), d=st.integers(1, 5))
def test_frechet_symmetric_nonnegative(seed, n, d):
    rng = np.random.default_rng(seed)
    a, b = rng.standard_normal((n, d)), 2 * rng.standard_normal((n + 3, d))
    f = frechet_distance(a, b)
    assert f >= 0
    assert abs(f - frechet_distance(b, a)) <= 1e-8 * max(1.0, f)


def test_frechet_needs_two_samples():
    with pytest.raises(ValueError):
        frechet_distance(np.ones((1, 3)), np.ones((4, 3)))


def test_sweep_spearman():
    rows = [{"s": s, "m": s * 2 + e} for s in (0, 1, 2) for e in (0, 0.1)]
    assert sweep_spearman(rows, "s", "m") == pytest.approx(1.0)


@pytest.fixture(scope="module")
def small_setup():
    g = synthesize_graph(SyntheticConfig(n_nodes=60, n_clusters=3, p_in=0.2, p_out=0.01, seed=2))
    return g, init_model(ModelConfig(T=10, seed=1))


def test_run_experiment_deterministic(small_setup):
    g, model = small_setup
    a = run_experiment(g, model, [0, 5, 9], "graph", [0, 1])
    b = run_experiment(g, model, [0, 5, 9], "graph", [0, 1], workers=3)
    assert a.to_dict() == b.to_dict()
    assert a.n == 6 and -100 <= a.mean_cosine_x100 <= 100 and a.fid >= 0
    for r in a.per_node:
        assert not {0, 5, 9} & set(r["neighbors"])


def test_run_experiment_modes(small_setup):
    g, model = small_setup
    t = run_experiment(g, model, [1, 2], "text_only", [0])
    assert all(r["neighbors"] == [] for r in t.per_node)
    r = run_experiment(g, model, [1, 2], "random_neighbors", [0])
    assert all(len(x["neighbors"]) == 5 for x in r.per_node)
    with pytest.raises(ValueError):
        run_experiment(g, model, [1], "baseline_encoder", [0])
    with pytest.raises(ValueError):
        run_experiment(g, model, [1], "nope", [0])
    base = init_model(ModelConfig(T=10, seed=1, encoder="baseline"))
    assert run_experiment(g, base, [1, 2], "baseline_encoder", [0]).n == 2


@pytest.mark.slow
def test_text_scale_raises_content_cosine(run0):
    target = run0.test_ids[0]
    rows = guidance_sweep(run0.graph, run0.qformer.model, target, [(s, 0.0) for s in (0, 0.5, 1, 2, 4)],
                          range(20), exclude=run0.test_ids)
    assert sweep_spearman(rows, "s_text", "content_cosine") > 0
