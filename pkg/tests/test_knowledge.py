import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays
from scipy import stats

from harmsim.errors import InsufficientDataError, ProtocolError
from harmsim.knowledge import (
    FeatureSummary,
    KnowledgeStore,
    assemble_mixed_batch,
    boxcox_fit,
    boxcox_shift,
    boxcox_transform,
    fit_stability_experiment,
    sample_features,
    stability_table,
    summarize_features,
)

SITES = ("a", "b", "c", "d")


def store_with(n_sites=4, f=3, seed=0):
    rng = np.random.default_rng(seed)
    ids = SITES[:n_sites]
    summaries = {s: FeatureSummary(s, rng.normal(size=f), rng.uniform(0.5, 2, f), 20) for s in ids}
    return KnowledgeStore(ids, summaries, round_tag=1)


def test_summary_examples():
    s = summarize_features(np.tile([1.5, -2.0], (4, 1)), "a")
    assert s.mu.tolist() == [1.5, -2.0] and s.sigma.tolist() == [0.0, 0.0]
    s = summarize_features(np.array([[1.0], [3.0]]), "a")
    assert (s.mu[0], s.sigma[0], s.n_samples) == (2.0, 1.0, 2)


def test_summary_needs_two_rows():
    with pytest.raises(InsufficientDataError, match="'solo'"):
        summarize_features(np.zeros((1, 3)), "solo")


def test_summary_of_standard_normal_draws():
    s = summarize_features(np.random.default_rng(0).standard_normal((10_000, 4)), "a")
    assert np.all(np.abs(s.mu) < 0.05) and np.all(np.abs(s.sigma - 1) < 0.05)


def test_summary_matches_numpy_population_std():
    Q = np.random.default_rng(1).normal(3.0, 2.0, (57, 5))
    s = summarize_features(Q, "a")
    np.testing.assert_allclose(s.mu, Q.mean(axis=0), rtol=0, atol=1e-12)
    np.testing.assert_allclose(s.sigma, Q.std(axis=0), rtol=0, atol=1e-12)


@settings(max_examples=50, deadline=None)
@given(
    arrays(np.float64, st.tuples(st.integers(2, 30), st.integers(1, 4)), elements=st.floats(-1e6, 1e6)),
    st.randoms(use_true_random=False),
)
def test_summary_is_row_order_invariant(Q, rnd):
    perm = list(range(Q.shape[0]))
    rnd.shuffle(perm)
    a, b = summarize_features(Q, "a"), summarize_features(Q[perm], "a")
    assert np.array_equal(a.mu, b.mu) and np.array_equal(a.sigma, b.sigma)


def test_sampling_examples():
    s = FeatureSummary("a", [1.0, -2.0], [0.0, 0.0], 5)
    assert np.all(sample_features(s, 7, 3) == [1.0, -2.0])
    s = FeatureSummary("a", [1.0, -2.0], [0.5, 3.0], 5)
    assert np.array_equal(sample_features(s, 7, 3), sample_features(s, 7, 3))


def test_sampling_clt_bound():
    s = FeatureSummary("a", [1.0, -2.0, 10.0], [0.5, 3.0, 1.0], 5)
    x = sample_features(s, 10_000, 11)
    assert np.all(np.abs(x.mean(axis=0) - s.mu) <= 4 * s.sigma / np.sqrt(10_000))


def test_mixed_batch_layout():
    store = store_with()
    q = np.random.default_rng(0).normal(size=(16, 3))
    batch = assemble_mixed_batch(q, "b", store, 5)
    assert batch.Q.shape == (32, 3)
    assert np.sum(batch.d == store.index("b")) == 16
    # the 16 real rows survive the shuffle unchanged
    real = batch.Q[batch.d == store.index("b")]
    assert sorted(map(tuple, real)) == sorted(map(tuple, q))


def test_mixed_batch_two_sites():
    store = store_with(n_sites=2)
    batch = assemble_mixed_batch(np.zeros((8, 3)), "a", store, 0)
    assert sorted(batch.d.tolist()) == [0] * 8 + [1] * 8


def test_mixed_batch_uniform_composition():
    store = store_with()
    counts = np.zeros(4)
    for seed in range(1000):
        counts += np.bincount(assemble_mixed_batch(np.zeros((16, 3)), "a", store, seed).d, minlength=4)
    per_site = counts[1:] / 1000
    assert np.all(np.abs(per_site - 16 / 3) <= 0.1 * 16 / 3)


def test_mixed_batch_errors():
    lonely = KnowledgeStore(("a",), {"a": FeatureSummary("a", [0.0], [1.0], 3)})
    with pytest.raises(ProtocolError):
        assemble_mixed_batch(np.zeros((4, 1)), "a", lonely, 0)
    empty = KnowledgeStore(("a", "b"))
    with pytest.raises(ProtocolError):
        assemble_mixed_batch(np.zeros((4, 1)), "a", empty, 0)


def test_boxcox_transform_matches_scipy():
    x = np.random.default_rng(0).lognormal(size=200)
    for lam in (-1.3, 0.0, 0.4, 2.0):
        np.testing.assert_allclose(boxcox_transform(x, lam), stats.boxcox(x, lmbda=lam), rtol=1e-12, atol=1e-12)
    np.testing.assert_allclose(boxcox_transform(x, 1.0), x - 1.0, rtol=0, atol=1e-15)


def test_boxcox_fit_matches_scipy_mle():
    rng = np.random.default_rng(1)
    for x in (rng.lognormal(0, 0.5, 300), rng.gamma(2.0, 1.0, 300), rng.normal(10, 1, 300)):
        assert boxcox_fit(x) == pytest.approx(stats.boxcox_normmax(x, method="mle"), abs=2e-3)


def test_boxcox_fit_lognormal_near_zero():
    x = np.random.default_rng(2).lognormal(0, 1, 5000)
    assert abs(boxcox_fit(x)) < 0.15


def test_boxcox_normal_data_stays_symmetric():
    x = np.random.default_rng(3).normal(0, 1, 5000)
    x = x + boxcox_shift(x)
    assert abs(stats.skew(boxcox_transform(x, boxcox_fit(x)))) < 0.1


def test_boxcox_rejects_non_positive():
    with pytest.raises(ValueError):
        boxcox_fit(np.array([1.0, 0.0, 2.0]))


def test_boxcox_shift_convention():
    x = np.array([-2.0, 0.5, 3.0])
    assert boxcox_shift(x) == pytest.approx(2.0 + 1e-3)
    assert boxcox_shift(np.array([0.1, 2.0])) == 0.0


def test_stability_experiment_layout_and_degenerate_case():
    x = np.random.default_rng(0).normal(size=40)
    rows = fit_stability_experiment(x, [5, 40], repeats=10, rng_seed=0, replace=False)
    assert [(r.method, r.sample_size) for r in rows] == [("gaussian", 5), ("boxcox", 5), ("gaussian", 40), ("boxcox", 40)]
    table = stability_table(rows)
    assert table["gaussian"][40] == pytest.approx(0.0, abs=1e-12)
    assert table["boxcox"][40] == pytest.approx(0.0, abs=1e-12)


def test_stability_decreases_with_sample_size():
    x = np.random.default_rng(4).normal(5, 2, 3000)
    table = stability_table(fit_stability_experiment(x, [5, 10, 20, 30, 50, 100], repeats=100, rng_seed=1))
    for method in ("gaussian", "boxcox"):
        seq = [table[method][n] for n in (5, 10, 20, 30, 50, 100)]
        assert all(b <= 1.05 * a for a, b in zip(seq, seq[1:]))


def test_stability_rejects_empty():
    with pytest.raises(ValueError):
        fit_stability_experiment([], [5])
    with pytest.raises(ValueError):
        fit_stability_experiment([1.0, 2.0, 3.0], [])
