"""Evaluation battery: per-site MAE, scanner classification probe, PCA, overlap, paired t-test."""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from .errors import DimensionError, InsufficientDataError
from .model import Component, ModelParams, feature_extract, mlp_backward, mlp_forward, predict
from .ndcore import AdamState, adam_update, softmax_rows
from .synthdata import SiteDataset


@dataclass
class RoundMetrics:
    per_site_mae: dict
    average_mae: float
    sca_percent: float

    def __post_init__(self):
        if not 0.0 <= self.sca_percent <= 100.0:
            raise ValueError(f"SCA must lie in [0, 100], got {self.sca_percent}")


def abs_errors(params: ModelParams, ds: SiteDataset, split: str = "test") -> np.ndarray:
    X, y = ds.part(split)
    if y is None:
        raise ValueError(f"site {ds.site_id!r} has no targets")
    if len(y) == 0:
        raise InsufficientDataError(f"site {ds.site_id!r} has an empty {split} split")
    return np.abs(predict(X, params) - y)


def mae_per_site(params: ModelParams, datasets: Sequence[SiteDataset], split: str = "test") -> dict:
    return {ds.site_id: float(np.mean(abs_errors(params, ds, split))) for ds in datasets}


def average_mae(per_site: dict) -> float:
    """Unweighted mean over sites: every site counts once regardless of size."""
    return float(np.mean(list(per_site.values())))


# --- scanner classification probe -----------------------------------------------------

@dataclass(frozen=True)
class ProbeConfig:
    epochs: int = 200
    lr: float = 1e-3
    batch_size: int = 16
    patience: int = 20
    standardize: bool = True


def _features_by_split(params: ModelParams, datasets: Sequence[SiteDataset]) -> dict:
    out = {}
    for split in ("train", "val", "test"):
        qs, ds_labels = [], []
        for k, ds in enumerate(datasets):
            X, _ = ds.part(split)
            qs.append(feature_extract(X, params))
            ds_labels.append(np.full(X.shape[0], k, dtype=np.int64))
        out[split] = (np.concatenate(qs), np.concatenate(ds_labels))
    return out


def _class_weights(d: np.ndarray, n_classes: int) -> np.ndarray:
    counts = np.bincount(d, minlength=n_classes).astype(np.float64)
    w = np.zeros(n_classes)
    present = counts > 0
    w[present] = d.size / (present.sum() * counts[present])
    return w


def balanced_accuracy(pred: np.ndarray, d: np.ndarray, n_classes: int) -> float:
    """Mean per-class recall over the classes present in ``d``."""
    recalls = [np.mean(pred[d == k] == k) for k in range(n_classes) if np.any(d == k)]
    return float(np.mean(recalls))


def train_site_probe(
    Q: np.ndarray,
    d: np.ndarray,
    Q_val: np.ndarray,
    d_val: np.ndarray,
    shapes,
    cfg: ProbeConfig,
    seed: int,
) -> Component:
    """Class-balanced cross-entropy probe, early-stopped on validation loss."""
    n_classes = shapes[-1][1]
    rng = np.random.default_rng(seed)
    chunks = []
    for i, o in shapes:
        bound = math.sqrt(6.0 / i)
        chunks += [rng.uniform(-bound, bound, size=i * o), np.zeros(o)]
    probe = Component(tuple(shapes), np.concatenate(chunks))
    w = _class_weights(d, n_classes)
    w_val = _class_weights(d_val, n_classes)

    def val_loss(comp):
        p = softmax_rows(mlp_forward(Q_val, comp)[0])
        picked = np.maximum(p[np.arange(len(d_val)), d_val], 1e-12)
        return float(np.mean(w_val[d_val] * -np.log(picked)))

    state = AdamState.zeros(probe.values.size, cfg.lr)
    best, best_loss, stale = probe, val_loss(probe), 0
    n = Q.shape[0]
    for _ in range(cfg.epochs):
        perm = rng.permutation(n)
        for i in range(0, n, cfg.batch_size):
            idx = perm[i : i + cfg.batch_size]
            logits, cache = mlp_forward(Q[idx], probe)
            p = softmax_rows(logits)
            g = p.copy()
            g[np.arange(len(idx)), d[idx]] -= 1.0
            g *= w[d[idx]][:, None] / len(idx)
            grad, _ = mlp_backward(cache, probe, g)
            values, state = adam_update(probe.values, grad, state)
            probe = probe.with_values(values)
        loss = val_loss(probe)
        if loss < best_loss:
            best, best_loss, stale = probe, loss, 0
        else:
            stale += 1
            if stale >= cfg.patience:
                break
    return best


def scanner_classification_accuracy(
    params: ModelParams,
    datasets: Sequence[SiteDataset],
    probe_cfg: ProbeConfig | None = None,
    seed: int = 0,
) -> float:
    """Balanced test accuracy (percent) of a fresh site classifier on frozen features.

    The probe has the domain head's architecture, is trained on training-split
    features and early-stopped on validation-split features. Chance is 100/H.
    """
    if len(datasets) < 2:
        raise ValueError("scanner classification needs at least 2 sites")
    cfg = probe_cfg or ProbeConfig()
    feats = _features_by_split(params, datasets)
    (Q_tr, d_tr), (Q_va, d_va), (Q_te, d_te) = feats["train"], feats["val"], feats["test"]
    if cfg.standardize:
        mean = Q_tr.mean(axis=0)
        std = Q_tr.std(axis=0)
        std[std < 1e-12] = 1.0
        Q_tr, Q_va, Q_te = ((q - mean) / std for q in (Q_tr, Q_va, Q_te))
    shapes = params.spec.shapes("dom")
    if shapes[-1][1] != len(datasets):
        raise DimensionError(f"domain head has {shapes[-1][1]} outputs for {len(datasets)} sites")
    probe = train_site_probe(Q_tr, d_tr, Q_va, d_va, shapes, cfg, seed)
    pred = np.argmax(mlp_forward(Q_te, probe)[0], axis=1)
    return 100.0 * balanced_accuracy(pred, d_te, len(datasets))


# --- PCA and overlap -------------------------------------------------------------------

@dataclass
class PCAResult:
    projections: np.ndarray
    components: np.ndarray  # F x k, orthonormal columns
    explained_variance: np.ndarray
    total_variance: float
    warning: Optional[str] = None

    @property
    def explained_ratio(self) -> np.ndarray:
        return self.explained_variance / self.total_variance


def pca_project(Q: np.ndarray, k: int, rank_tol: float = 1e-10) -> PCAResult:
    """Mean-centred PCA through the eigendecomposition of the feature covariance.

    Each component's first non-negligible coordinate is made positive. If the
    data have rank below ``k`` the result keeps only the supported components
    and says so in ``warning``.
    """
    Q = np.asarray(Q, dtype=np.float64)
    n, f = Q.shape
    if not 1 <= k <= f:
        raise DimensionError(f"k must lie in [1, {f}], got {k}")
    if n <= k:
        raise InsufficientDataError(f"need more than {k} rows, got {n}")
    centred = Q - Q.mean(axis=0)
    cov = centred.T @ centred / (n - 1)
    evals, evecs = np.linalg.eigh(cov)
    order = np.argsort(evals)[::-1]
    evals = np.clip(evals[order], 0.0, None)
    evecs = evecs[:, order]
    total = float(np.trace(cov))
    warning = None
    rank = int(np.sum(evals > rank_tol * max(evals[0], 1e-300)))
    if rank < k:
        warning = f"covariance rank {rank} < requested k={k}; returning {rank} components"
        k = max(rank, 1)
    comps = evecs[:, :k].copy()
    for j in range(k):
        nz = np.flatnonzero(np.abs(comps[:, j]) > 1e-12)
        if nz.size and comps[nz[0], j] < 0:
            comps[:, j] = -comps[:, j]
    return PCAResult(centred @ comps, comps, evals[:k], total, warning)


def site_overlap_score(Q: np.ndarray, site_labels) -> float:
    """Mean pairwise distance between site centroids in units of pooled within-site std.

    Distances are root-mean-square over features, so the score does not grow
    with feature dimension. Lower means more overlap.
    """
    Q = np.asarray(Q, dtype=np.float64)
    labels = np.asarray(site_labels)
    sites = list(dict.fromkeys(labels.tolist()))
    if len(sites) < 2:
        raise ValueError("overlap needs at least 2 sites")
    centroids = []
    sq = 0.0
    for s in sites:
        rows = Q[labels == s]
        c = rows.mean(axis=0)
        centroids.append(c)
        sq += float(((rows - c) ** 2).sum())
    pooled = math.sqrt(sq / (Q.shape[0] * Q.shape[1]))
    if pooled == 0.0:
        pooled = 1e-300
    dists = [
        math.sqrt(float(np.mean((centroids[i] - centroids[j]) ** 2)))
        for i in range(len(sites))
        for j in range(i + 1, len(sites))
    ]
    return float(np.mean(dists)) / pooled


def site_features(params: ModelParams, datasets: Sequence[SiteDataset], split: str = "test") -> tuple[np.ndarray, np.ndarray]:
    """Stacked features and site-id labels for one split of every site."""
    qs, labels = [], []
    for ds in datasets:
        X, _ = ds.part(split)
        qs.append(feature_extract(X, params))
        labels += [ds.site_id] * X.shape[0]
    return np.concatenate(qs), np.array(labels)


# --- paired t-test -----------------------------------------------------------------------

def _betacf(a: float, b: float, x: float, max_iter: int = 300, eps: float = 1e-15) -> float:
    """Continued fraction for the incomplete beta function (modified Lentz)."""
    tiny = 1e-300
    qab, qap, qam = a + b, a + 1.0, a - 1.0
    c = 1.0
    d = 1.0 - qab * x / qap
    d = 1.0 / (d if abs(d) > tiny else tiny)
    h = d
    for m in range(1, max_iter + 1):
        m2 = 2 * m
        aa = m * (b - m) * x / ((qam + m2) * (a + m2))
        d = 1.0 + aa * d
        d = 1.0 / (d if abs(d) > tiny else tiny)
        c = 1.0 + aa / c
        c = c if abs(c) > tiny else tiny
        h *= d * c
        aa = -(a + m) * (qab + m) * x / ((a + m2) * (qap + m2))
        d = 1.0 + aa * d
        d = 1.0 / (d if abs(d) > tiny else tiny)
        c = 1.0 + aa / c
        c = c if abs(c) > tiny else tiny
        delta = d * c
        h *= delta
        if abs(delta - 1.0) < eps:
            break
    return h


def betainc_regularized(a: float, b: float, x: float) -> float:
    if not 0.0 <= x <= 1.0:
        raise ValueError("x must lie in [0, 1]")
    if x == 0.0 or x == 1.0:
        return x
    log_bt = math.lgamma(a + b) - math.lgamma(a) - math.lgamma(b) + a * math.log(x) + b * math.log1p(-x)
    bt = math.exp(log_bt)
    if x < (a + 1.0) / (a + b + 2.0):
        return bt * _betacf(a, b, x) / a
    return 1.0 - bt * _betacf(b, a, 1.0 - x) / b


@dataclass(frozen=True)
class TTestResult:
    t: float
    p: float
    df: int
    degenerate: bool = False


def paired_ttest(errors_a, errors_b) -> TTestResult:
    """Two-sided paired t-test. Zero-variance differences give the flagged tie (t=0, p=1)."""
    a = np.asarray(errors_a, dtype=np.float64).reshape(-1)
    b = np.asarray(errors_b, dtype=np.float64).reshape(-1)
    if a.shape != b.shape:
        raise DimensionError(f"paired samples differ in length: {a.size} vs {b.size}")
    n = a.size
    if n < 2:
        raise InsufficientDataError("paired t-test needs at least 2 pairs")
    diff = a - b
    sd = float(np.std(diff, ddof=1))
    # constant differences can carry rounding noise, e.g. (a + 1) - a
    if sd <= 1e-10 * abs(float(np.mean(diff))) or sd == 0.0:
        return TTestResult(0.0, 1.0, n - 1, degenerate=True)
    t = float(np.mean(diff)) / (sd / math.sqrt(n))
    df = n - 1
    p = betainc_regularized(0.5 * df, 0.5, df / (df + t * t))
    return TTestResult(t, min(max(p, 0.0), 1.0), df)
