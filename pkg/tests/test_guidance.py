import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from g2i.guidance import GuidanceSpec, ScoreTriple, compose_multi, compose_single

EXACT = 1e-12
scale = st.floats(-10, 10, allow_nan=False)


def triple(seed, m=1, n=16):
    rng = np.random.default_rng(seed)
    return ScoreTriple(rng.standard_normal(n), rng.standard_normal(n),
                       tuple(rng.standard_normal(n) for _ in range(m)))


def test_reductions():
    tr = triple(0)
    np.testing.assert_allclose(compose_single(tr, 1, 0), tr.eps_text, atol=EXACT, rtol=0)
    np.testing.assert_allclose(compose_single(tr, 1, 1), tr.eps_graph[0], atol=EXACT, rtol=0)
    np.testing.assert_allclose(compose_single(tr, 0, 0), tr.eps_uncond, atol=EXACT, rtol=0)


def test_multi_reductions():
    tr = triple(1, m=3)
    text_only = compose_multi(ScoreTriple(tr.eps_uncond, tr.eps_text), (2.5, []))
    np.testing.assert_allclose(compose_multi(tr, (2.5, [0, 0, 0])), text_only, atol=EXACT, rtol=0)
    spec = GuidanceSpec(3.0, (("a", 1.0), ("b", 0.5), ("c", -0.25)))
    np.testing.assert_array_equal(compose_multi(tr, spec), compose_multi(tr, (3.0, [1.0, 0.5, -0.25])))


@settings(max_examples=100, deadline=None)
@given(seed=st.integers(0, 2**31), s_t=scale, s_g=scale)
def test_multi_with_one_term_is_single(seed, s_t, s_g):
    tr = triple(seed)
    np.testing.assert_allclose(compose_multi(tr, (s_t, [s_g])), compose_single(tr, s_t, s_g), atol=EXACT, rtol=0)


@settings(max_examples=100, deadline=None)
@given(seed=st.integers(0, 2**31), s_t=scale, a=scale, b=scale)
def test_duplicate_condition_is_additive(seed, s_t, a, b):
    tr = triple(seed)
    dup = ScoreTriple(tr.eps_uncond, tr.eps_text, (tr.eps_graph[0], tr.eps_graph[0]))
    np.testing.assert_allclose(compose_multi(dup, (s_t, [a, b])), compose_single(tr, s_t, a + b),
                               atol=EXACT * 10, rtol=EXACT)


@settings(max_examples=100, deadline=None)
@given(seed=st.integers(0, 2**31), s_t=scale, s_g=scale, c=st.floats(-4, 4, allow_nan=False))
def test_homogeneity(seed, s_t, s_g, c):
    tr = triple(seed, m=2)
    scaled = ScoreTriple(c * tr.eps_uncond, c * tr.eps_text, tuple(c * e for e in tr.eps_graph))
    np.testing.assert_allclose(compose_multi(scaled, (s_t, [s_g, 1.0])), c * compose_multi(tr, (s_t, [s_g, 1.0])),
                               atol=1e-11, rtol=1e-12)


@settings(max_examples=50, deadline=None)
@given(seed=st.integers(0, 2**31), s_t=scale, s_g=scale)
def test_linearity(seed, s_t, s_g):
    a, b = triple(seed), triple(seed + 1)
    both = ScoreTriple(a.eps_uncond + b.eps_uncond, a.eps_text + b.eps_text, (a.eps_graph[0] + b.eps_graph[0],))
    np.testing.assert_allclose(compose_single(both, s_t, s_g),
                               compose_single(a, s_t, s_g) + compose_single(b, s_t, s_g), atol=1e-11, rtol=1e-12)


def test_errors():
    tr = triple(2, m=2)
    with pytest.raises(ValueError):
        compose_single(tr, 1, 1)
    with pytest.raises(ValueError):
        compose_multi(tr, (1.0, [1.0]))
    with pytest.raises(ValueError):
        ScoreTriple(np.zeros(3), np.zeros(4))
    with pytest.raises(ValueError):
        GuidanceSpec(1.0, ((None, float("inf")),))
    with pytest.raises(ValueError):
        GuidanceSpec(-1.0)


def test_spec_single():
    spec = GuidanceSpec.single(7.5, 1.5)
    assert spec.graph_scales == [1.5] and spec.s_text == 7.5
