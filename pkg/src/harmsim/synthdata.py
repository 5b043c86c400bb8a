"""Synthetic multi-site regression benchmark and CSV ingestion.

Each subject gets an age-like target drawn from its site's range. Half of the
input features are smooth functions of the target (the biological signal), the
rest are noise; every site then applies its own per-feature shift and scale,
which is the scanner effect to be unlearned.
"""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from fractions import Fraction
from pathlib import Path
from typing import Callable, Optional, Sequence

import numpy as np

from .errors import ConfigError, ParseError

SPLITS = ("train", "val", "test")
DEFAULT_FRACTIONS = (0.7, 0.1, 0.2)

# Train counts 35/127/69/39 after the 70/10/20 split. Target ranges overlap
# heavily so that the target alone says little about the site (a Bayes
# classifier on the exact target reaches ~33% balanced accuracy), while the
# widest and narrowest sites still differ in mean.
DEFAULT_SITES = (
    ("site0", 50, (8.0, 26.0)),
    ("site1", 182, (6.0, 30.0)),
    ("site2", 99, (7.0, 25.0)),
    ("site3", 56, (6.0, 23.0)),
)
DEFAULT_TARGET_CENTER = 17.0
DEFAULT_TARGET_SCALE = 6.0


@dataclass(frozen=True)
class SiteEffectSpec:
    feature_shift: np.ndarray
    feature_scale: np.ndarray
    target_range: tuple[float, float]
    n_subjects: int
    site_id: str = ""

    def __post_init__(self):
        shift = np.asarray(self.feature_shift, dtype=np.float64)
        scale = np.asarray(self.feature_scale, dtype=np.float64)
        if shift.ndim != 1 or shift.shape != scale.shape:
            raise ConfigError("feature_shift and feature_scale must be equal-length vectors")
        if np.any(scale <= 0):
            raise ConfigError("feature_scale entries must be positive")
        lo, hi = self.target_range
        if not lo < hi:
            raise ConfigError(f"target_range low must be < high, got {self.target_range}")
        if self.n_subjects < 10:
            raise ConfigError(f"a site needs at least 10 subjects, got {self.n_subjects}")
        object.__setattr__(self, "feature_shift", shift)
        object.__setattr__(self, "feature_scale", scale)
        object.__setattr__(self, "target_range", (float(lo), float(hi)))

    def to_dict(self) -> dict:
        return {
            "site_id": self.site_id,
            "feature_shift": self.feature_shift.tolist(),
            "feature_scale": self.feature_scale.tolist(),
            "target_range": list(self.target_range),
            "n_subjects": self.n_subjects,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "SiteEffectSpec":
        return cls(
            feature_shift=d["feature_shift"],
            feature_scale=d["feature_scale"],
            target_range=tuple(d["target_range"]),
            n_subjects=int(d["n_subjects"]),
            site_id=d.get("site_id", ""),
        )


@dataclass
class Split:
    train: np.ndarray
    val: np.ndarray
    test: np.ndarray

    def sizes(self) -> tuple[int, int, int]:
        return len(self.train), len(self.val), len(self.test)

    def to_dict(self) -> dict:
        return {name: getattr(self, name).tolist() for name in SPLITS}

    @classmethod
    def from_dict(cls, d: dict) -> "Split":
        return cls(**{name: np.asarray(d[name], dtype=np.int64) for name in SPLITS})


@dataclass
class SiteDataset:
    site_id: str
    X: np.ndarray
    y: Optional[np.ndarray]
    split: Split = None
    labeled: bool = field(init=False)

    def __post_init__(self):
        self.X = np.asarray(self.X, dtype=np.float64)
        if self.y is not None:
            self.y = np.asarray(self.y, dtype=np.float64).reshape(-1)
            if self.y.shape[0] != self.X.shape[0]:
                raise ValueError(f"site {self.site_id}: {self.X.shape[0]} rows vs {self.y.shape[0]} targets")
        self.labeled = self.y is not None
        if self.split is None:
            self.split = split_dataset(self.X.shape[0], DEFAULT_FRACTIONS, seed=0)

    @property
    def n(self) -> int:
        return self.X.shape[0]

    def rows(self, split: str) -> np.ndarray:
        return getattr(self.split, split)

    def part(self, split: str) -> tuple[np.ndarray, Optional[np.ndarray]]:
        idx = self.rows(split)
        return self.X[idx], (self.y[idx] if self.y is not None else None)


def split_sizes(n: int, fractions: Sequence[float] = DEFAULT_FRACTIONS) -> tuple[int, ...]:
    """Largest-remainder apportionment of ``n`` rows.

    Leftover rows go to the largest fractional remainders; ties favour the
    later splits, so train only takes a leftover row when it clearly earns it.
    """
    fracs = [Fraction(str(f)) for f in fractions]
    if sum(fracs) != 1 or any(f < 0 for f in fracs):
        raise ConfigError(f"split fractions must be non-negative and sum to 1, got {tuple(fractions)}")
    quotas = [f * n for f in fracs]
    sizes = [math.floor(q) for q in quotas]
    leftover = n - sum(sizes)
    order = sorted(range(len(fracs)), key=lambda i: (-(quotas[i] - sizes[i]), -i))
    for i in order[:leftover]:
        sizes[i] += 1
    for name, f, s in zip(SPLITS, fracs, sizes):
        if f > 0 and s == 0:
            raise ConfigError(f"{name} split of {n} rows at fraction {float(f)} rounds to zero rows")
    return tuple(sizes)


def split_dataset(n: int, fractions: Sequence[float] = DEFAULT_FRACTIONS, seed: int = 0) -> Split:
    """Random disjoint train/val/test assignment of ``n`` rows."""
    sizes = split_sizes(n, fractions)
    perm = np.random.default_rng(seed).permutation(n)
    a, b = sizes[0], sizes[0] + sizes[1]
    return Split(np.sort(perm[:a]), np.sort(perm[a:b]), np.sort(perm[b:]))


def make_signal_fn(
    n_features: int,
    seed: int = 1234,
    center: float = DEFAULT_TARGET_CENTER,
    scale: float = DEFAULT_TARGET_SCALE,
    hidden: int = 8,
) -> Callable[[np.ndarray], np.ndarray]:
    """Fixed random two-layer tanh map from a scalar target to ``n_features`` smooth features.

    Outputs are standardised over a reference grid of targets in
    [center - 2*scale, center + 3*scale].
    """
    rng = np.random.default_rng(seed)
    a = rng.normal(0.0, 1.5, size=hidden)
    b = rng.normal(0.0, 0.5, size=hidden)
    m = rng.normal(0.0, 1.0, size=(hidden, n_features))

    def raw(y):
        z = (np.asarray(y, dtype=np.float64).reshape(-1, 1) - center) / scale
        return np.tanh(z * a + b) @ m

    grid = raw(np.linspace(center - 2 * scale, center + 3 * scale, 512))
    mean, std = grid.mean(axis=0), grid.std(axis=0)
    std[std == 0] = 1.0

    def signal(y):
        return (raw(y) - mean) / std

    return signal


def default_site_specs(
    input_dim: int = 16,
    seed: int = 2022,
    signal_shift_sd: float = 0.5,
    carrier_shift_sd: float = 0.5,
    log_scale_sd: float = 0.15,
) -> list[SiteEffectSpec]:
    """Four sites with the default subject counts and randomly drawn scanner effects.

    Shifts on the first ``input_dim // 2`` features (the signal) and on the
    pure site-carrier features can be drawn with different spreads. The
    effects depend only on ``seed``, not on the data seed.
    """
    rng = np.random.default_rng(seed)
    n_signal = input_dim // 2
    shift_sd = np.r_[np.full(n_signal, signal_shift_sd), np.full(input_dim - n_signal, carrier_shift_sd)]
    specs = []
    for site_id, n, target_range in DEFAULT_SITES:
        specs.append(
            SiteEffectSpec(
                feature_shift=rng.normal(0.0, 1.0, size=input_dim) * shift_sd,
                feature_scale=np.exp(rng.normal(0.0, log_scale_sd, size=input_dim)),
                target_range=target_range,
                n_subjects=n,
                site_id=site_id,
            )
        )
    return specs


def generate_multisite(
    specs: Sequence[SiteEffectSpec],
    input_dim: int = 16,
    signal_fn: Optional[Callable[[np.ndarray], np.ndarray]] = None,
    noise_sd: float = 0.1,
    seed: int = 0,
    fractions: Sequence[float] = DEFAULT_FRACTIONS,
) -> list[SiteDataset]:
    if len(specs) < 2:
        raise ConfigError("need at least 2 sites")
    if input_dim < 2:
        raise ConfigError("input_dim must be >= 2")
    n_signal = input_dim // 2
    if signal_fn is None:
        signal_fn = make_signal_fn(n_signal)
    root = np.random.SeedSequence(seed)
    datasets = []
    for k, (spec, child) in enumerate(zip(specs, root.spawn(len(specs)))):
        if spec.feature_shift.shape != (input_dim,):
            raise ConfigError(f"site {k}: shift has {spec.feature_shift.size} entries, expected {input_dim}")
        rng = np.random.default_rng(child)
        n = spec.n_subjects
        lo, hi = spec.target_range
        y = rng.uniform(lo, hi, size=n)
        bio = signal_fn(y) + noise_sd * rng.standard_normal((n, n_signal))
        carriers = rng.standard_normal((n, input_dim - n_signal))
        base = np.concatenate([bio, carriers], axis=1)
        X = base * spec.feature_scale + spec.feature_shift
        site_id = spec.site_id or f"site{k}"
        split_seed = int(rng.integers(2**31))
        datasets.append(SiteDataset(site_id, X, y, split_dataset(n, fractions, split_seed)))
    return datasets


def default_benchmark(seed: int = 0, input_dim: int = 16) -> list[SiteDataset]:
    return generate_multisite(default_site_specs(input_dim), input_dim=input_dim, seed=seed)


# --- CSV ------------------------------------------------------------------------

def write_csv(path, datasets: Sequence[SiteDataset], site_column: str = "site", target_column: str = "y") -> None:
    """Write one or more sites to a single CSV (floats in round-trip repr)."""
    dims = {ds.X.shape[1] for ds in datasets}
    if len(dims) != 1:
        raise ValueError("datasets disagree on feature count")
    d = dims.pop()
    header = [site_column] + [f"x{j}" for j in range(d)] + [target_column]
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        for ds in datasets:
            for i in range(ds.n):
                target = repr(float(ds.y[i])) if ds.y is not None else ""
                w.writerow([ds.site_id, *(repr(float(v)) for v in ds.X[i]), target])


def load_csv(
    path,
    site_column: str = "site",
    target_column: Optional[str] = "y",
    require_labels: bool = False,
    fractions: Sequence[float] = DEFAULT_FRACTIONS,
    seed: int = 0,
) -> list[SiteDataset]:
    """Read a CSV into one dataset per distinct site value, in first-seen order.

    Every column other than the site and target columns is a feature. Rows with
    an empty target make their whole site unlabeled.
    """
    path = Path(path)
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise ParseError(f"{path}: empty file, header row required") from None
        if site_column not in header:
            raise ParseError(f"{path}: no site column {site_column!r} in header")
        has_target = target_column is not None and target_column in header
        if require_labels and not has_target:
            raise ConfigError(f"{path}: target column {target_column!r} required but missing")
        s_idx = header.index(site_column)
        t_idx = header.index(target_column) if has_target else None
        f_idx = [i for i in range(len(header)) if i not in (s_idx, t_idx)]
        if not f_idx:
            raise ParseError(f"{path}: no feature columns")

        rows: dict[str, list] = {}
        targets: dict[str, list] = {}
        for line_no, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != len(header):
                raise ParseError(f"{path}:{line_no}: expected {len(header)} cells, got {len(row)}")
            try:
                feats = [float(row[i]) for i in f_idx]
                target = float(row[t_idx]) if t_idx is not None and row[t_idx] != "" else None
            except ValueError as exc:
                raise ParseError(f"{path}:{line_no}: non-numeric cell ({exc})") from None
            if not all(math.isfinite(v) for v in feats):
                raise ParseError(f"{path}:{line_no}: non-finite feature value")
            site = row[s_idx]
            rows.setdefault(site, []).append(feats)
            targets.setdefault(site, []).append(target)

    datasets = []
    for k, (site, feats) in enumerate(rows.items()):
        ys = targets[site]
        labeled = all(t is not None for t in ys)
        if require_labels and not labeled:
            raise ConfigError(f"{path}: site {site!r} has rows without a target")
        X = np.array(feats, dtype=np.float64)
        y = np.array(ys, dtype=np.float64) if labeled else None
        split = split_dataset(len(feats), fractions, seed + k)
        datasets.append(SiteDataset(site, X, y, split))
    return datasets
