"""Per-site Gaussian feature summaries and the shared knowledge store.

A site shares only a mean and a standard deviation per feature (plus its row
count). Other sites draw surrogate features from those summaries to train
their domain predictor. Box-Cox fitting is kept for the stability comparison.
"""
from __future__ import annotations

import math
import statistics
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .errors import DimensionError, InsufficientDataError, ProtocolError

SAMPLING_SIGMA_FLOOR = 1e-6
BOXCOX_BOUNDS = (-5.0, 5.0)
BOXCOX_TOL = 1e-4
BOXCOX_SHIFT_MARGIN = 1e-3


@dataclass(frozen=True)
class FeatureSummary:
    site_id: str
    mu: np.ndarray
    sigma: np.ndarray
    n_samples: int

    def __post_init__(self):
        mu = np.asarray(self.mu, dtype=np.float64)
        sigma = np.asarray(self.sigma, dtype=np.float64)
        if mu.ndim != 1 or mu.shape != sigma.shape:
            raise DimensionError(f"mu {mu.shape} and sigma {sigma.shape} must be equal-length vectors")
        if np.any(sigma < 0):
            raise ValueError("sigma entries must be >= 0")
        object.__setattr__(self, "mu", mu)
        object.__setattr__(self, "sigma", sigma)

    @property
    def feature_dim(self) -> int:
        return self.mu.shape[0]


@dataclass
class KnowledgeStore:
    """Summaries for the whole federation, keyed by site.

    ``site_ids`` is the federation roster; a site's position in it is its
    domain label.
    """

    site_ids: tuple[str, ...]
    summaries: dict[str, FeatureSummary] = field(default_factory=dict)
    round_tag: int = 0

    def __post_init__(self):
        self.site_ids = tuple(self.site_ids)
        if len(set(self.site_ids)) != len(self.site_ids):
            raise ValueError("duplicate site ids in roster")
        dims = {s.feature_dim for s in self.summaries.values()}
        if len(dims) > 1:
            raise DimensionError(f"summaries disagree on feature dimension: {sorted(dims)}")
        for key, s in self.summaries.items():
            if key != s.site_id or key not in self.site_ids:
                raise ValueError(f"summary for {s.site_id!r} filed under {key!r}")

    def index(self, site_id: str) -> int:
        return self.site_ids.index(site_id)

    def with_summary(self, summary: FeatureSummary) -> "KnowledgeStore":
        summaries = dict(self.summaries)
        summaries[summary.site_id] = summary
        return KnowledgeStore(self.site_ids, summaries, self.round_tag)


@dataclass(frozen=True)
class FeatureBatch:
    Q: np.ndarray
    d: np.ndarray


def summarize_features(Q: np.ndarray, site: str) -> FeatureSummary:
    """Column means and population standard deviations (divisor N).

    Sums are exactly rounded, so the result does not depend on row order.
    """
    Q = np.asarray(Q, dtype=np.float64)
    if Q.ndim != 2:
        raise DimensionError(f"features must be 2-D, got {Q.shape}")
    n = Q.shape[0]
    if n < 2:
        raise InsufficientDataError(f"site {site!r}: need at least 2 rows to summarise, got {n}")
    mu = np.empty(Q.shape[1])
    sigma = np.empty(Q.shape[1])
    for j in range(Q.shape[1]):
        col = Q[:, j].tolist()
        m = math.fsum(col) / n
        mu[j] = m
        sigma[j] = math.sqrt(math.fsum((v - m) ** 2 for v in col) / n)
    return FeatureSummary(site, mu, sigma, n)


def _draw(summary: FeatureSummary, n: int, rng: np.random.Generator, sigma_floor: float = 0.0) -> np.ndarray:
    sigma = np.maximum(summary.sigma, sigma_floor) if sigma_floor > 0 else summary.sigma
    z = rng.standard_normal((n, summary.feature_dim))
    return summary.mu + z * sigma


def sample_features(summary: FeatureSummary, n: int, rng_seed: int) -> np.ndarray:
    """``n`` rows with column j drawn independently from N(mu[j], sigma[j]^2)."""
    if n < 0:
        raise ValueError("n must be >= 0")
    return _draw(summary, n, np.random.default_rng(rng_seed))


def assemble_mixed_batch(
    Q_local: np.ndarray,
    local_site: str,
    store: KnowledgeStore,
    rng_seed,
) -> FeatureBatch:
    """Real local features plus an equal number of surrogates from the other sites, shuffled.

    Each surrogate row picks its source site uniformly among the other sites.
    """
    Q_local = np.asarray(Q_local, dtype=np.float64)
    b = Q_local.shape[0]
    if b < 1:
        raise ValueError("local batch is empty")
    others = [s for s in store.site_ids if s != local_site]
    if not others:
        raise ProtocolError(f"no other sites in the store to contrast {local_site!r} against")
    missing = [s for s in others if s not in store.summaries]
    if missing:
        raise ProtocolError(f"knowledge store lacks summaries for {missing}")

    rng = np.random.default_rng(rng_seed)
    picks = rng.integers(0, len(others), size=b)
    counts = np.bincount(picks, minlength=len(others))
    rows = [Q_local]
    labels = [np.full(b, store.index(local_site), dtype=np.int64)]
    for site, count in zip(others, counts):
        if count == 0:
            continue
        summary = store.summaries[site]
        if summary.feature_dim != Q_local.shape[1]:
            raise DimensionError(f"summary for {site!r} has {summary.feature_dim} features, batch has {Q_local.shape[1]}")
        rows.append(_draw(summary, int(count), rng, SAMPLING_SIGMA_FLOOR))
        labels.append(np.full(count, store.index(site), dtype=np.int64))
    Q = np.concatenate(rows)
    d = np.concatenate(labels)
    order = rng.permutation(2 * b)
    return FeatureBatch(Q[order], d[order])


# --- Box-Cox --------------------------------------------------------------------

def boxcox_transform(x: np.ndarray, lam: float) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    logx = np.log(x)
    if abs(lam) < 1e-12:
        return logx
    return np.expm1(lam * logx) / lam


def boxcox_loglik(x: np.ndarray, lam: float) -> float:
    """Profile log-likelihood of the Box-Cox model at ``lam`` (constants dropped)."""
    x = np.asarray(x, dtype=np.float64)
    n = x.size
    y = boxcox_transform(x, lam)
    var = np.mean((y - y.mean()) ** 2)
    if var <= 0.0:
        return -math.inf
    return (lam - 1.0) * float(np.log(x).sum()) - 0.5 * n * math.log(var)


def boxcox_shift(x: np.ndarray) -> float:
    """Offset that makes ``x`` strictly positive (0 if it already is)."""
    m = float(np.min(x))
    return 0.0 if m > 0 else -m + BOXCOX_SHIFT_MARGIN


def boxcox_fit(x, bounds: tuple[float, float] = BOXCOX_BOUNDS, tol: float = BOXCOX_TOL) -> float:
    """Maximum-likelihood Box-Cox lambda by golden-section search."""
    x = np.asarray(x, dtype=np.float64).reshape(-1)
    if x.size < 2:
        raise InsufficientDataError("Box-Cox fit needs at least 2 values")
    if np.any(x <= 0) or not np.all(np.isfinite(x)):
        raise ValueError("Box-Cox input must be finite and strictly positive")

    invphi = (math.sqrt(5.0) - 1.0) / 2.0
    a, b = bounds
    c = b - invphi * (b - a)
    d = a + invphi * (b - a)
    fc = boxcox_loglik(x, c)
    fd = boxcox_loglik(x, d)
    while b - a > tol:
        if fc >= fd:
            b, d, fd = d, c, fc
            c = b - invphi * (b - a)
            fc = boxcox_loglik(x, c)
        else:
            a, c, fc = c, d, fd
            d = a + invphi * (b - a)
            fd = boxcox_loglik(x, d)
    return 0.5 * (a + b)


@dataclass(frozen=True)
class StabilityRow:
    method: str
    sample_size: int
    std_of_mean_estimates: float


STABILITY_METHODS = ("gaussian", "boxcox")


def fit_stability_experiment(
    feature_values,
    sample_sizes: Sequence[int],
    repeats: int = 100,
    rng_seed: int = 0,
    replace: bool = True,
) -> list[StabilityRow]:
    """Spread of fitted means under resampling, direct Gaussian fit vs Box-Cox then Gaussian.

    For each sample size, draw ``repeats`` subsamples, record the fitted mean
    (in transformed units for Box-Cox) and report the standard deviation of
    those estimates.
    """
    values = np.asarray(feature_values, dtype=np.float64).reshape(-1)
    if values.size == 0 or len(sample_sizes) == 0:
        raise ValueError("feature values and sample sizes must be non-empty")
    if repeats < 2:
        raise ValueError("repeats must be >= 2")
    if max(sample_sizes) > values.size or min(sample_sizes) < 2:
        raise ValueError(f"sample sizes must lie in [2, {values.size}]")
    positive = values + boxcox_shift(values)

    rng = np.random.default_rng(rng_seed)
    rows = []
    for size in sample_sizes:
        gauss, boxcox = [], []
        for _ in range(repeats):
            idx = rng.choice(values.size, size=size, replace=replace)
            sub = np.sort(positive[idx])
            gauss.append(math.fsum(values[idx].tolist()) / size)
            lam = boxcox_fit(sub)
            boxcox.append(math.fsum(boxcox_transform(sub, lam).tolist()) / size)
        rows.append(StabilityRow("gaussian", int(size), statistics.pstdev(gauss)))
        rows.append(StabilityRow("boxcox", int(size), statistics.pstdev(boxcox)))
    return rows


def stability_table(rows: Sequence[StabilityRow]) -> dict[str, dict[int, float]]:
    """Pivot stability rows into {method: {sample_size: std}}."""
    table: dict[str, dict[int, float]] = {m: {} for m in STABILITY_METHODS}
    for r in rows:
        table[r.method][r.sample_size] = r.std_of_mean_estimates
    return table
