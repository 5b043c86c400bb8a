import dataclasses

import numpy as np
import pytest
import scipy.special
import scipy.stats
from hypothesis import given, settings
from hypothesis import strategies as st
from sklearn.decomposition import PCA

from harmsim.errors import DimensionError, InsufficientDataError
from harmsim.evaluation import (
    ProbeConfig,
    RoundMetrics,
    average_mae,
    balanced_accuracy,
    betainc_regularized,
    mae_per_site,
    paired_ttest,
    pca_project,
    scanner_classification_accuracy,
    site_overlap_score,
)
from harmsim.model import NetworkSpec, init_params
from harmsim.synthdata import SiteDataset, Split


def _identity_network(dim, n_sites):
    """Extractor that is exactly the identity, built from two ReLU layers (x = relu(x) - relu(-x))."""
    spec = NetworkSpec(dim, (2 * dim, dim), (4, 1), (32, n_sites))
    p = init_params(spec, 0)
    w1 = np.hstack([np.eye(dim), -np.eye(dim)])
    w2 = np.vstack([np.eye(dim), -np.eye(dim)])
    repr_vec = np.concatenate([w1.ravel(), np.zeros(2 * dim), w2.ravel(), np.zeros(dim)])
    return p.replace(repr=repr_vec)


def _sites(blocks, seed=0):
    out = []
    for k, X in enumerate(blocks):
        n = X.shape[0]
        idx = np.random.default_rng(seed + k).permutation(n)
        a, b = int(0.7 * n), int(0.8 * n)
        out.append(SiteDataset(f"s{k}", X, np.zeros(n), Split(np.sort(idx[:a]), np.sort(idx[a:b]), np.sort(idx[b:]))))
    return out


def test_average_is_unweighted():
    assert average_mae({"a": 1.0, "b": 3.0, "c": 8.0}) == 4.0


def test_perfect_and_constant_predictors():
    spec = NetworkSpec(2, (3,), (1,), (2,), target_offset=20.0, target_scale=1.0)
    p = init_params(spec, 0)
    zero = p.replace(pred=np.zeros_like(p.pred.values))  # predicts exactly 20
    X = np.ones((10, 2))
    split = Split(np.arange(5), np.arange(5, 7), np.arange(7, 10))
    exact = SiteDataset("a", X, np.full(10, 20.0), split)
    off = SiteDataset("b", X, np.full(10, 25.0), split)
    maes = mae_per_site(zero, [exact, off])
    assert maes == {"a": 0.0, "b": 5.0}


def test_round_metrics_rejects_out_of_range_sca():
    with pytest.raises(ValueError):
        RoundMetrics({}, 0.0, 101.0)


def test_balanced_accuracy_ignores_class_sizes():
    d = np.array([0] * 90 + [1] * 10)
    pred = np.zeros(100, dtype=int)
    assert balanced_accuracy(pred, d, 2) == 0.5


def test_probe_finds_separated_sites():
    rng = np.random.default_rng(0)
    blocks = [rng.normal(size=(80, 3)) + 12.0 * k for k in range(4)]
    params = _identity_network(3, 4)
    assert scanner_classification_accuracy(params, _sites(blocks), seed=0) >= 99.0


def test_probe_is_near_chance_on_shared_distribution():
    params = _identity_network(3, 4)
    scores = []
    for s in range(5):
        rng = np.random.default_rng(100 + s)
        blocks = [rng.normal(size=(100, 3)) for _ in range(4)]
        scores.append(scanner_classification_accuracy(params, _sites(blocks, s), seed=s))
    assert abs(np.mean(scores) - 25.0) <= 8.0


def test_random_extractor_keeps_site_information():
    rng = np.random.default_rng(3)
    blocks = [rng.normal(size=(80, 6)) + rng.normal(scale=2.0, size=6) for _ in range(4)]
    params = init_params(NetworkSpec.default(6, 4), 1)
    assert scanner_classification_accuracy(params, _sites(blocks), seed=0) > 60.0


def test_probe_needs_two_sites():
    rng = np.random.default_rng(0)
    params = _identity_network(3, 1)
    with pytest.raises(ValueError):
        scanner_classification_accuracy(params, _sites([rng.normal(size=(30, 3))]))


def test_probe_head_must_match_site_count():
    rng = np.random.default_rng(0)
    with pytest.raises(DimensionError):
        scanner_classification_accuracy(_identity_network(3, 3), _sites([rng.normal(size=(30, 3))] * 2),
                                        ProbeConfig(epochs=1))


def test_pca_matches_sklearn():
    rng = np.random.default_rng(5)
    Q = rng.normal(size=(200, 5)) @ rng.normal(size=(5, 5))
    ours = pca_project(Q, 2)
    ref = PCA(2).fit(Q)
    np.testing.assert_allclose(ours.explained_variance, ref.explained_variance_, rtol=1e-10)
    for j in range(2):
        assert abs(abs(ours.components[:, j] @ ref.components_[j]) - 1.0) < 1e-10
    np.testing.assert_allclose(np.abs(ours.projections), np.abs(ref.transform(Q)), atol=1e-9)


def test_pca_on_anisotropic_data():
    rng = np.random.default_rng(1)
    Q = rng.normal(size=(20000, 2)) * np.array([2.0, 1.0])
    res = pca_project(Q, 1)
    assert abs(res.explained_ratio[0] - 0.8) < 0.01
    assert abs(abs(res.components[0, 0]) - 1.0) < 0.01


def test_pca_components_are_orthonormal_and_span_a_planted_subspace():
    rng = np.random.default_rng(2)
    basis, _ = np.linalg.qr(rng.normal(size=(6, 2)))
    Q = rng.normal(size=(500, 2)) * [5.0, 3.0] @ basis.T + 1e-3 * rng.normal(size=(500, 6))
    res = pca_project(Q, 2)
    np.testing.assert_allclose(res.components.T @ res.components, np.eye(2), atol=1e-12)
    residual = res.components - basis @ (basis.T @ res.components)
    assert np.linalg.norm(residual) < 1e-3


def test_pca_exact_subspace_explains_everything():
    rng = np.random.default_rng(6)
    Q = rng.normal(size=(80, 2)) @ rng.normal(size=(2, 5))
    res = pca_project(Q, 2)
    assert abs(res.explained_variance.sum() - res.total_variance) < 1e-9
    assert res.explained_variance[0] >= res.explained_variance[1]


def test_pca_rank_deficiency_is_reported():
    rng = np.random.default_rng(0)
    Q = np.outer(rng.normal(size=50), [1.0, 2.0, -1.0])
    res = pca_project(Q, 2)
    assert res.warning and res.components.shape == (3, 1)


def test_pca_row_order_does_not_matter():
    rng = np.random.default_rng(4)
    Q = rng.normal(size=(100, 4)) * [4, 3, 2, 1]
    perm = rng.permutation(100)
    a, b = pca_project(Q, 2), pca_project(Q[perm], 2)
    np.testing.assert_allclose(a.components, b.components, atol=1e-10)
    np.testing.assert_allclose(a.projections[perm], b.projections, atol=1e-10)


def test_pca_argument_checks():
    with pytest.raises(DimensionError):
        pca_project(np.zeros((10, 2)), 3)
    with pytest.raises(InsufficientDataError):
        pca_project(np.zeros((2, 3)), 2)


def test_overlap_identical_sites_is_small():
    rng = np.random.default_rng(0)
    Q = rng.normal(size=(4000, 3))
    labels = np.repeat(["a", "b"], 2000)
    assert site_overlap_score(Q, labels) < 0.1


def test_overlap_scales_with_centroid_gap():
    rng = np.random.default_rng(0)
    Q = rng.normal(size=(4000, 3))
    Q[2000:] += 10.0
    labels = np.repeat(["a", "b"], 2000)
    assert abs(site_overlap_score(Q, labels) - 10.0) < 0.5


def test_overlap_collapses_when_labels_are_shuffled():
    rng = np.random.default_rng(1)
    Q = rng.normal(size=(3000, 2))
    labels = np.repeat(["a", "b", "c"], 1000)
    Q[labels == "b"] += 4.0
    Q[labels == "c"] -= 4.0
    structured = site_overlap_score(Q, labels)
    shuffled = site_overlap_score(Q, rng.permutation(labels))
    assert shuffled < 0.1 * structured


def test_overlap_needs_two_sites():
    with pytest.raises(ValueError):
        site_overlap_score(np.zeros((4, 2)), ["a"] * 4)


A = [2.1, 3.4, 1.9, 5.0, 4.2, 3.3, 2.8, 4.9]
B = [1.8, 3.9, 1.2, 4.1, 4.0, 2.7, 2.9, 3.8]


def test_ttest_pinned_values():
    res = paired_ttest(A, B)
    assert res.df == 7
    assert abs(res.t - 2.1272640939132414) < 1e-10
    assert abs(res.p - 0.07095628378609287) < 1e-10


def test_ttest_identical_samples_tie():
    res = paired_ttest(A, A)
    assert (res.t, res.p, res.degenerate) == (0.0, 1.0, True)
    assert paired_ttest([1, 1, 1, 1], [0, 0, 0, 0]).degenerate
    shifted = paired_ttest(np.add(A, 1.0), A)
    assert shifted.degenerate


def test_ttest_argument_checks():
    with pytest.raises(DimensionError):
        paired_ttest([1, 2, 3], [1, 2])
    with pytest.raises(InsufficientDataError):
        paired_ttest([1.0], [2.0])


@settings(max_examples=40, deadline=None)
@given(st.lists(st.floats(-5, 5), min_size=3, max_size=30), st.integers(0, 2**31))
def test_ttest_agrees_with_scipy(diffs, seed):
    b = np.random.default_rng(seed).normal(size=len(diffs))
    a = b + np.array(diffs)
    if np.std(a - b, ddof=1) < 1e-6:
        return
    ours = paired_ttest(a, b)
    ref = scipy.stats.ttest_rel(a, b)
    assert ours.t == pytest.approx(ref.statistic, rel=1e-8, abs=1e-10)
    assert ours.p == pytest.approx(ref.pvalue, rel=1e-7, abs=1e-12)


@settings(max_examples=200, deadline=None)
@given(st.floats(0.05, 60), st.floats(0.05, 60), st.floats(0, 1))
def test_betainc_matches_scipy(a, b, x):
    assert betainc_regularized(a, b, x) == pytest.approx(scipy.special.betainc(a, b, x), rel=1e-9, abs=1e-12)
