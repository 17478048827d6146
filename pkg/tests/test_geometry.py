from __future__ import annotations

import math
import warnings

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.stats import ortho_group

from grace.errors import DecompositionUndefinedError, InsufficientDataError
from grace.geometry import (
    LayerProvenance,
    PairCounts,
    alignment_profile,
    correlation_stats,
    decompose_alignment,
    fragmentation_correlation,
    geometry_profile,
    granularity_profile,
    magnitude_cv,
    prompt_pair_matrix,
    rank_layers,
    union_top_k,
    unit_normalize,
)
from oracles import average_ranks, pair_stats, pearson, question_mean_lambda, unit_rows


def grid(vectors) -> np.ndarray:
    """Stack a (P, Q) nested list of vectors into a one-layer tensor."""
    return np.asarray(vectors, dtype=np.float64)[None]


def test_unit_normalize_example():
    unit = unit_normalize(np.array([3.0, 4.0]).reshape(1, 1, 1, 2))
    np.testing.assert_allclose(unit.data[0, 0, 0], [0.6, 0.8], atol=1e-15)
    assert unit.dropped == []


def test_zero_vector_is_dropped():
    t = np.ones((2, 2, 3, 4))
    t[1, 0, 2] = 0.0
    unit = unit_normalize(t)
    assert unit.dropped == [(1, 0, 2)]
    assert not unit.balanced
    assert list(unit.n_valid()) == [6, 5]
    assert np.all(unit.data[1, 0, 2] == 0.0)


def test_unit_normalize_idempotent(rng):
    u = unit_rows(rng.standard_normal((2, 3, 4, 5)))
    np.testing.assert_allclose(unit_normalize(u).data, u, atol=1e-15, rtol=0)


def test_alignment_examples():
    c = math.cos(math.pi / 3)
    s = math.sin(math.pi / 3)
    a = alignment_profile(unit_normalize(grid([[[1.0, 0.0]], [[c, s]]])))
    assert a[0] == pytest.approx(0.5, abs=1e-12)
    a = alignment_profile(unit_normalize(grid([[[1.0, 0.0], [1.0, 0.0], [0.0, 1.0]]])))
    assert a[0] == pytest.approx(1 / 3, abs=1e-12)
    same = np.tile([0.3, -0.2, 0.9], (4, 6, 1))
    assert alignment_profile(unit_normalize(same[None]))[0] == pytest.approx(1.0, abs=1e-12)


def test_alignment_undefined_with_one_usable_vector():
    t = np.zeros((1, 2, 1, 3))
    t[0, 0, 0] = [1, 0, 0]
    assert np.isnan(alignment_profile(unit_normalize(t))[0])


def test_closed_form_matches_pairwise_at_n500(rng):
    t = rng.standard_normal((1, 5, 100, 16)) + 0.3
    fast = alignment_profile(unit_normalize(t))[0]
    v = unit_rows(t[0].reshape(-1, 16))
    gram = v @ v.T
    iu = np.triu_indices(len(v), 1)
    assert abs(fast - gram[iu].mean()) < 1e-6


def test_pair_counts_five_by_hundred():
    c = PairCounts.for_grid(5, 100)
    assert (c.total, c.within, c.cross) == (124750, 1000, 123750)
    assert round(c.weight_within, 4) == 0.0080
    assert c.weight_within == pytest.approx(0.008016, abs=5e-7)
    assert c.weight_cross == pytest.approx(0.991984, abs=5e-7)


@settings(max_examples=50, deadline=None)
@given(p=st.integers(2, 12), q=st.integers(2, 200))
def test_pair_count_identity(p, q):
    c = PairCounts.for_grid(p, q)
    assert c.within + c.cross == c.total
    assert c.weight_within + c.weight_cross == pytest.approx(1.0, abs=1e-15)


def test_decomposition_matches_enumeration(rng):
    for _ in range(15):
        P, Q, D = rng.integers(2, 6), rng.integers(2, 12), rng.integers(2, 9)
        t = rng.standard_normal((2, P, Q, D)) + rng.standard_normal(D)
        unit = unit_normalize(t)
        dec = decompose_alignment(unit)
        A = alignment_profile(unit)
        for layer in range(2):
            ref = pair_stats(t[layer])
            assert dec.within_q[layer] == pytest.approx(ref["gamma"], abs=1e-12)
            assert dec.cross_q[layer] == pytest.approx(ref["lam"], abs=1e-12)
            assert A[layer] == pytest.approx(ref["A"], abs=1e-12)
            assert dec.cross_q_via_means[layer] == pytest.approx(question_mean_lambda(t[layer]), abs=1e-12)
            assert (dec.counts.within, dec.counts.cross) == (ref["n_within"], ref["n_cross"])


def test_decomposition_identical_vectors():
    t = np.tile([1.0, 2.0], (3, 4, 1))[None]
    dec = decompose_alignment(unit_normalize(t))
    assert dec.within_q[0] == pytest.approx(1.0) and dec.cross_q[0] == pytest.approx(1.0)


def test_orthogonal_questions_construction():
    t = grid([[[1.0, 0.0], [0.0, 1.0]], [[1.0, 0.0], [0.0, 1.0]]])
    unit = unit_normalize(t)
    dec = decompose_alignment(unit)
    A = alignment_profile(unit)
    assert dec.within_q[0] == 1.0
    assert dec.cross_q[0] == 0.0
    assert A[0] == pytest.approx(dec.weight_within)
    g, mean, undefined = granularity_profile(A, dec.within_q)
    # N_T / N_W = 6 / 2
    assert g[0] == pytest.approx(3.0)
    assert undefined == 0


def test_decomposition_needs_two_prompts_and_questions():
    with pytest.raises(DecompositionUndefinedError):
        decompose_alignment(unit_normalize(np.ones((1, 1, 4, 2))))
    with pytest.raises(DecompositionUndefinedError):
        decompose_alignment(unit_normalize(np.ones((1, 3, 1, 2))))


def test_decomposition_with_dropped_sample_matches_enumeration(rng):
    t = rng.standard_normal((1, 3, 4, 5)) + 1.0
    t[0, 1, 2] = 0.0
    dec = decompose_alignment(unit_normalize(t))
    v = unit_rows(np.where(np.linalg.norm(t, axis=-1, keepdims=True) > 0, t, 1.0))[0]
    cells = [(p, q) for p in range(3) for q in range(4) if (p, q) != (1, 2)]
    within = [v[a] @ v[b] for i, a in enumerate(cells) for b in cells[i + 1 :] if a[1] == b[1]]
    cross = [v[a] @ v[b] for i, a in enumerate(cells) for b in cells[i + 1 :] if a[1] != b[1]]
    assert dec.within_q[0] == pytest.approx(np.mean(within), abs=1e-12)
    assert dec.cross_q[0] == pytest.approx(np.mean(cross), abs=1e-12)
    assert np.isnan(dec.cross_q_via_means[0])


def test_granularity_examples():
    g, mean, undefined = granularity_profile(np.array([0.6, 1e-9, 0.5]), np.array([0.9, 0.3, 0.5]))
    assert g[0] == pytest.approx(1.5)
    assert np.isnan(g[1])
    assert mean == pytest.approx(1.25)
    assert undefined == 1
    with pytest.raises(InsufficientDataError):
        granularity_profile(np.array([0.0, np.nan]), np.array([0.2, 0.1]))


def test_identical_vectors_granularity_one():
    prof = geometry_profile(np.tile([0.0, 1.0, 1.0], (3, 2, 5, 1)))
    np.testing.assert_allclose(prof.granularity, 1.0)
    assert prof.concept_granularity == pytest.approx(1.0)


def test_prompt_matrix_examples():
    same = np.tile([1.0, 2.0, 0.5], (2, 3, 4, 1))
    np.testing.assert_allclose(prompt_pair_matrix(unit_normalize(same)), 1.0)
    base = np.random.default_rng(3).standard_normal((1, 1, 5, 4))
    m = prompt_pair_matrix(unit_normalize(np.concatenate([base, -base], axis=1)))
    assert m[0, 0, 1] == pytest.approx(-1.0)
    e1, e2 = [1.0, 0.0], [0.0, 1.0]
    t = grid([[e1] * 3, [e1] * 3, [e2] * 3])
    np.testing.assert_allclose(prompt_pair_matrix(unit_normalize(t))[0], [[1, 1, 0], [1, 1, 0], [0, 0, 1]])


def test_prompt_matrix_excludes_dropped_pairwise():
    t = np.ones((1, 2, 3, 2))
    t[0, 1, 0] = 0.0
    t[0, 0, 0] = [-1.0, -1.0]  # only appears against a dropped partner
    m = prompt_pair_matrix(unit_normalize(t))
    assert m[0, 0, 1] == pytest.approx(1.0)


def test_prompt_matrix_properties(rng):
    m = prompt_pair_matrix(unit_normalize(rng.standard_normal((3, 4, 6, 5))))
    np.testing.assert_allclose(m, np.swapaxes(m, 1, 2), atol=1e-15)
    assert np.all(np.diagonal(m, axis1=1, axis2=2) == 1.0)
    assert np.all(np.abs(m) <= 1.0)


def test_magnitude_cv_examples():
    t = np.zeros((1, 1, 2, 2))
    t[0, 0, 0] = [1, 0]
    t[0, 0, 1] = [0, 3]
    stats = magnitude_cv(t)
    assert stats.pooled_mean == pytest.approx(2.0)
    assert stats.pooled_std == pytest.approx(1.0)
    assert stats.pooled_cv == pytest.approx(0.5)
    equal = magnitude_cv(np.full((2, 2, 3, 4), 1.0))  # every norm is 2
    assert equal.pooled_cv == 0.0
    assert np.all(equal.layer_cv == 0.0)
    zero = magnitude_cv(np.zeros((1, 2, 2, 2)))
    assert math.isnan(zero.pooled_cv)


def test_magnitude_cv_lognormal():
    rng = np.random.default_rng(2024)
    dirs = unit_rows(rng.standard_normal((1, 5, 100, 8)))
    mags = np.exp(0.5 * rng.standard_normal((1, 5, 100, 1)))
    cv = magnitude_cv(dirs * mags).pooled_cv
    assert abs(cv - math.sqrt(math.exp(0.25) - 1)) < 0.05


def test_fragmentation_examples():
    x = np.array([0.1, 0.5, 0.3, 0.9])
    assert fragmentation_correlation(x, x) == pytest.approx(1.0)
    assert fragmentation_correlation(x, -x) == pytest.approx(-1.0)
    assert fragmentation_correlation(np.array([1, 2, 3, 4.0]), np.array([2, 1, 4, 3.0])) == pytest.approx(0.6)
    assert math.isnan(fragmentation_correlation(np.ones(5), x.tolist() + [0.2]))
    with pytest.raises(InsufficientDataError):
        fragmentation_correlation(np.array([0.1, np.nan, 0.3]), np.array([0.2, 0.4, 0.1]))


def test_rank_layers_examples():
    top = rank_layers(np.array([0.1, 0.9, 0.5]), 2)
    assert top.layers == (1, 2)
    assert top.provenance is LayerProvenance.TOP_K
    assert rank_layers(np.array([0.5, 0.5, 0.1]), 1).layers == (0,)


def test_rank_layers_truncates_with_warning():
    with pytest.warns(UserWarning):
        ls = rank_layers(np.array([0.2, np.nan, 0.4]), 5)
    assert ls.layers == (2, 0) and ls.truncated


def test_union_of_overlapping_top15():
    L = 40
    a = np.zeros(L)
    b = np.zeros(L)
    a[:15] = np.linspace(1.0, 0.5, 15)  # layers 0..14
    b[5:20] = np.linspace(1.0, 0.5, 15)  # layers 5..19 share 10 with a
    u = union_top_k(a, b, 15)
    assert u.layers == tuple(range(20))
    assert u.provenance is LayerProvenance.UNION_TOP_K


def test_correlation_examples():
    x = np.arange(6.0)
    p, s = correlation_stats(x, 2 * x + 1)
    assert p == pytest.approx(1.0) and s == pytest.approx(1.0)
    _, s = correlation_stats(x, -(x**3))
    assert s == pytest.approx(-1.0)
    x, y = [1, 2, 2, 3], [1, 3, 2, 4]
    _, s = correlation_stats(x, y)
    assert s == pytest.approx(pearson(average_ranks(x), average_ranks(y)), abs=1e-12)
    p, s = correlation_stats([1, 1, 1], [1, 2, 3])
    assert math.isnan(p) and math.isnan(s)
    with pytest.raises(InsufficientDataError):
        correlation_stats([1, 2], [2, 1])


@settings(max_examples=40, deadline=None)
@given(seed=st.integers(0, 10_000), n=st.integers(3, 30))
def test_correlation_matches_reference(seed, n):
    rng = np.random.default_rng(seed)
    x = rng.integers(0, 5, n).astype(float)  # plenty of ties
    y = x + rng.standard_normal(n)
    if np.ptp(x) == 0:
        return
    p, s = correlation_stats(x, y)
    assert p == pytest.approx(pearson(x, y), abs=1e-12)
    assert s == pytest.approx(pearson(average_ranks(x), average_ranks(y)), abs=1e-12)


@settings(max_examples=25, deadline=None)
@given(seed=st.integers(0, 10_000), P=st.integers(2, 5), Q=st.integers(2, 8), D=st.integers(2, 8))
def test_rotation_invariance(seed, P, Q, D):
    rng = np.random.default_rng(seed)
    t = rng.standard_normal((2, P, Q, D)) + rng.standard_normal(D)
    R = ortho_group.rvs(D, random_state=seed) if D > 1 else np.eye(1)
    a = geometry_profile(t)
    b = geometry_profile(t @ R.T)
    for field in ("alignment", "within_q", "cross_q", "granularity"):
        np.testing.assert_allclose(getattr(a, field), getattr(b, field), atol=1e-9, equal_nan=True)
    np.testing.assert_allclose(prompt_pair_matrix(unit_normalize(t)), prompt_pair_matrix(unit_normalize(t @ R.T)), atol=1e-9)


def test_small_perturbations_give_granularity_near_one():
    for seed in range(5):
        rng = np.random.default_rng(seed)
        g = unit_rows(rng.standard_normal(64))
        t = g + 0.1 * rng.standard_normal((1, 5, 100, 64))
        assert 0.95 <= geometry_profile(t).concept_granularity <= 1.05


def test_rank_layers_deterministic(rng):
    prof = np.round(rng.random(30), 1)  # many ties
    assert rank_layers(prof, 10).layers == rank_layers(prof.copy(), 10).layers


def test_geometry_report_serialises(rng):
    import json

    t = rng.standard_normal((3, 2, 3, 4))
    t[0, 0, 0] = 0
    d = geometry_profile(t).to_dict()
    json.dumps(d, allow_nan=False)
    assert d["dropped"] == [[0, 0, 0]]
    assert d["weight_within"] + d["weight_cross"] == pytest.approx(1.0)
    with warnings.catch_warnings():
        warnings.simplefilter("error")
        geometry_profile(t)
