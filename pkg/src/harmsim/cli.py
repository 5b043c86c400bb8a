"""Command-line entry point: ``harmsim generate|train|compare|stability``.

Configuration is a JSON file (see README) whose values command-line flags
override. Exit codes: 0 success, 2 configuration or input error, 3 numerical
divergence, 4 I/O error.
"""
from __future__ import annotations

import argparse
import csv
import dataclasses
import json
import logging
import os
import sys
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from . import __version__, wire
from .errors import ConfigError, DivergenceError, HarmsimError, ParseError
from .evaluation import (
    abs_errors,
    average_mae,
    mae_per_site,
    paired_ttest,
    pca_project,
    scanner_classification_accuracy,
    site_features,
    site_overlap_score,
)
from .federation import METHOD_PRESETS, AggregationStrategy, Hyper, TrainingMode, run_protocol
from .knowledge import fit_stability_experiment
from .model import NetworkSpec, feature_extract
from .synthdata import (
    DEFAULT_FRACTIONS,
    DEFAULT_TARGET_CENTER,
    DEFAULT_TARGET_SCALE,
    SiteDataset,
    SiteEffectSpec,
    Split,
    default_site_specs,
    generate_multisite,
    load_csv,
    write_csv,
)

log = logging.getLogger("harmsim")

EXIT_OK, EXIT_CONFIG, EXIT_DIVERGED, EXIT_IO = 0, 2, 3, 4
STABILITY_SIZES = (5, 10, 20, 30, 50, 100)
ALL_METHODS = tuple(METHOD_PRESETS)


# --- configuration -------------------------------------------------------------------

@dataclass
class NetworkConfig:
    feature_dim: int = 16
    repr_hidden: list = field(default_factory=lambda: [64, 32])
    pred_hidden: list = field(default_factory=lambda: [32])
    dom_hidden: list = field(default_factory=lambda: [32])
    # null: benchmark constants for generated data, pooled training-target
    # mean/std of the labeled sites for CSV data
    target_offset: Optional[float] = None
    target_scale: Optional[float] = None


@dataclass
class DataConfig:
    source: str = "generate"  # "generate" or "csv"
    path: Optional[str] = None  # CSV file, or a directory written by `harmsim generate`
    input_dim: int = 16
    noise_sd: float = 0.1
    sites: Optional[list] = None  # SiteEffectSpec dicts; null means the default four sites
    site_column: str = "site"
    target_column: str = "y"
    fractions: list = field(default_factory=lambda: list(DEFAULT_FRACTIONS))


@dataclass
class StabilityConfig:
    sample_sizes: list = field(default_factory=lambda: list(STABILITY_SIZES))
    repeats: int = 100
    feature: int = 0
    checkpoint: Optional[str] = None  # features from a trained extractor; raw inputs otherwise


@dataclass
class RunConfig:
    seed: int = 0
    method: str = "fedharmony"
    methods: list = field(default_factory=lambda: list(ALL_METHODS))  # for `compare`
    # explicit component flags; null keeps what the method preset says
    strategy: Optional[str] = None
    harmonize: Optional[bool] = None
    prox: Optional[bool] = None
    labeled_sites: Optional[list] = None
    out: str = "harmsim-out"
    timing: bool = False
    probe_seed: int = 0
    hyper: Hyper = field(default_factory=Hyper)
    network: NetworkConfig = field(default_factory=NetworkConfig)
    data: DataConfig = field(default_factory=DataConfig)
    stability: StabilityConfig = field(default_factory=StabilityConfig)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)


_SECTIONS = {"hyper": Hyper, "network": NetworkConfig, "data": DataConfig, "stability": StabilityConfig}


def _build(cls, raw: dict, where: str):
    if not isinstance(raw, dict):
        raise ConfigError(f"{where} must be a JSON object")
    known = {f.name for f in dataclasses.fields(cls)}
    unknown = sorted(set(raw) - known)
    if unknown:
        raise ConfigError(f"unknown key(s) in {where}: {', '.join(unknown)}")
    kwargs = {}
    for name, value in raw.items():
        if name in _SECTIONS and cls is RunConfig:
            value = _build(_SECTIONS[name], value, name)
        kwargs[name] = value
    try:
        return cls(**kwargs)
    except TypeError as exc:
        raise ConfigError(f"{where}: {exc}") from None


def parse_config(raw: dict) -> RunConfig:
    """Build and validate a RunConfig from a decoded JSON object."""
    cfg = _build(RunConfig, raw, "config")
    validate(cfg)
    return cfg


def validate(cfg: RunConfig) -> None:
    for name in [cfg.method, *cfg.methods]:
        if name not in METHOD_PRESETS:
            raise ConfigError(f"unknown method {name!r}; choose from {', '.join(ALL_METHODS)}")
    if cfg.strategy is not None and cfg.strategy not in {s.value for s in AggregationStrategy}:
        raise ConfigError(f"strategy must be 'fedavg' or 'fedequal', got {cfg.strategy!r}")
    if cfg.labeled_sites is not None and not cfg.labeled_sites:
        raise ConfigError("labeled_sites must be non-empty when given")
    if cfg.data.source not in ("generate", "csv"):
        raise ConfigError(f"data.source must be 'generate' or 'csv', got {cfg.data.source!r}")
    if cfg.data.source == "csv" and not cfg.data.path:
        raise ConfigError("data.path is required when data.source is 'csv'")
    if cfg.data.input_dim < 2:
        raise ConfigError("data.input_dim must be >= 2")
    if cfg.network.feature_dim < 1:
        raise ConfigError("network.feature_dim must be >= 1")
    if cfg.network.target_scale is not None and cfg.network.target_scale <= 0:
        raise ConfigError("network.target_scale must be positive")
    if cfg.stability.repeats < 2:
        raise ConfigError("stability.repeats must be >= 2")
    if not cfg.stability.sample_sizes or min(cfg.stability.sample_sizes) < 2:
        raise ConfigError("stability.sample_sizes must be non-empty and >= 2")
    if not isinstance(cfg.hyper, Hyper):
        raise ConfigError("hyper must be an object")


def load_config(path: Optional[str]) -> dict:
    if path is None:
        return {}
    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as exc:
        raise OSError(f"cannot read config {path}: {exc.strerror}") from exc
    try:
        return json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON ({exc})") from None


def resolve_config(args: argparse.Namespace) -> RunConfig:
    raw = load_config(args.config)
    if args.seed is not None:
        raw["seed"] = args.seed
    if args.out is not None:
        raw["out"] = args.out
    if args.labeled_sites is not None:
        raw["labeled_sites"] = [s for s in args.labeled_sites.split(",") if s]
    if args.method is not None:
        names = [m for m in args.method.split(",") if m]
        if args.command == "compare":
            raw["methods"] = names
        elif len(names) != 1:
            raise ConfigError("--method takes a single name except for `compare`")
        else:
            raw["method"] = names[0]
    return parse_config(raw)


def method_components(cfg: RunConfig, method: str) -> tuple[AggregationStrategy, TrainingMode]:
    strategy, harmonize, prox = METHOD_PRESETS[method]
    if cfg.strategy is not None:
        strategy = AggregationStrategy(cfg.strategy)
    if cfg.harmonize is not None:
        harmonize = cfg.harmonize
    if cfg.prox is not None:
        prox = cfg.prox
    labeled = frozenset(cfg.labeled_sites) if cfg.labeled_sites is not None else None
    return strategy, TrainingMode(harmonize=harmonize, prox=prox, labeled_sites=labeled)


# --- data ------------------------------------------------------------------------------

def site_specs(cfg: RunConfig) -> list[SiteEffectSpec]:
    if cfg.data.sites is None:
        return default_site_specs(cfg.data.input_dim)
    try:
        return [SiteEffectSpec.from_dict(d) for d in cfg.data.sites]
    except (KeyError, TypeError) as exc:
        raise ConfigError(f"invalid site spec: {exc}") from None


def load_generated_dir(directory: Path, cfg: RunConfig) -> list[SiteDataset]:
    manifest = json.loads((directory / "manifest.json").read_text(encoding="utf-8"))
    datasets = []
    for entry in manifest["sites"]:
        (ds,) = load_csv(directory / entry["file"], cfg.data.site_column, cfg.data.target_column)
        datasets.append(SiteDataset(ds.site_id, ds.X, ds.y, Split.from_dict(entry["split"])))
    return datasets


def load_data(cfg: RunConfig) -> list[SiteDataset]:
    if cfg.data.source == "generate":
        return generate_multisite(
            site_specs(cfg), cfg.data.input_dim, noise_sd=cfg.data.noise_sd, seed=cfg.seed, fractions=cfg.data.fractions
        )
    path = Path(cfg.data.path)
    if path.is_dir():
        return load_generated_dir(path, cfg)
    return load_csv(path, cfg.data.site_column, cfg.data.target_column, fractions=cfg.data.fractions, seed=cfg.seed)


def network_spec(cfg: RunConfig, datasets: Sequence[SiteDataset]) -> NetworkSpec:
    net = cfg.network
    offset, scale = net.target_offset, net.target_scale
    if offset is None or scale is None:
        if cfg.data.source == "generate":
            auto = (DEFAULT_TARGET_CENTER, DEFAULT_TARGET_SCALE)
        else:
            ys = [ds.part("train")[1] for ds in datasets if ds.labeled]
            if not ys:
                raise ConfigError("no labeled site to derive the target scaling from")
            pooled = np.concatenate(ys)
            auto = (float(pooled.mean()), float(pooled.std()) or 1.0)
        offset = auto[0] if offset is None else offset
        scale = auto[1] if scale is None else scale
    return NetworkSpec(
        input_dim=datasets[0].X.shape[1],
        repr_layers=(*net.repr_hidden, net.feature_dim),
        pred_layers=(*net.pred_hidden, 1),
        dom_layers=(*net.dom_hidden, len(datasets)),
        target_offset=float(offset),
        target_scale=float(scale),
    )


# --- outputs ---------------------------------------------------------------------------

def write_json(path: Path, obj) -> None:
    path.write_text(json.dumps(obj, indent=2, sort_keys=True, allow_nan=False) + "\n", encoding="utf-8")


def write_manifest(out: Path, command: str, cfg: RunConfig, extra: dict | None = None) -> None:
    manifest = {"command": command, "version": __version__, "seed": cfg.seed, "config": cfg.to_dict()}
    if extra:
        manifest.update(extra)
    write_json(out / "manifest.json", manifest)


def _fmt(x: float) -> str:
    return repr(float(x))


@dataclass
class TrainOutcome:
    method: str
    per_site_mae: dict
    average_mae: float
    sca: float
    overlap: float
    rounds: int
    best_round: int
    test_errors: dict  # site -> absolute test errors, for paired tests


def train_one(cfg: RunConfig, method: str, datasets, spec: NetworkSpec, out: Path, run_id: str) -> TrainOutcome:
    out.mkdir(parents=True, exist_ok=True)
    strategy, mode = method_components(cfg, method)
    labeled_ids = {ds.site_id for ds in datasets if ds.labeled}
    if mode.labeled_sites is None and labeled_ids != {ds.site_id for ds in datasets}:
        mode = TrainingMode(mode.harmonize, mode.prox, frozenset(labeled_ids))
    write_manifest(out, "train", cfg, {"method": method, "run_id": run_id, "network": spec.to_dict()})

    log_lines = []
    result = run_protocol(
        datasets,
        spec,
        cfg.hyper,
        strategy,
        mode,
        cfg.seed,
        on_round=lambda rec: log_lines.append(json.dumps(rec.to_dict(), sort_keys=True, allow_nan=False)),
        timing=cfg.timing,
    )
    (out / "rounds.jsonl").write_text("".join(line + "\n" for line in log_lines), encoding="utf-8")
    params = result.params
    wire.save_checkpoint(out / "checkpoint.json", params, cfg.hyper.to_dict(), result.best_round, {"method": method})
    wire.save_store(out / "knowledge_store.json", result.store)

    scored = [ds for ds in datasets if ds.labeled]
    per_site = mae_per_site(params, scored, "test")
    sca = scanner_classification_accuracy(params, datasets, seed=cfg.probe_seed)
    Q, labels = site_features(params, datasets, "test")
    overlap = site_overlap_score(Q, labels)
    errors = {ds.site_id: abs_errors(params, ds, "test") for ds in scored}
    outcome = TrainOutcome(method, per_site, average_mae(per_site), sca, overlap, result.rounds_run, result.best_round, errors)

    write_json(
        out / "metrics.json",
        {
            "run_id": run_id,
            "method": method,
            "per_site_mae": per_site,
            "average_mae": outcome.average_mae,
            "sca_percent": sca,
            "overlap": overlap,
            "rounds": result.rounds_run,
            "best_round": result.best_round,
        },
    )
    with open(out / "metrics.csv", "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["run_id", "method", "site", "split", "mae", "sca", "overlap", "rounds"])
        for site, mae in per_site.items():
            w.writerow([run_id, method, site, "test", _fmt(mae), _fmt(sca), _fmt(overlap), result.rounds_run])
        w.writerow([run_id, method, "average", "test", _fmt(outcome.average_mae), _fmt(sca), _fmt(overlap), result.rounds_run])

    pca = pca_project(Q, 2)
    if pca.warning:
        log.warning("PCA: %s", pca.warning)
    with open(out / "pca.csv", "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["site", "pc1", "pc2"])
        for site, row in zip(labels, pca.projections):
            coords = list(row) + [0.0] * (2 - len(row))
            w.writerow([site, _fmt(coords[0]), _fmt(coords[1])])
    return outcome


# --- commands --------------------------------------------------------------------------

def cmd_generate(cfg: RunConfig) -> int:
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    specs = site_specs(cfg)
    datasets = generate_multisite(specs, cfg.data.input_dim, noise_sd=cfg.data.noise_sd, seed=cfg.seed, fractions=cfg.data.fractions)
    entries = []
    for spec, ds in zip(specs, datasets):
        name = f"{ds.site_id}.csv"
        write_csv(out / name, [ds], cfg.data.site_column, cfg.data.target_column)
        entries.append({"site_id": ds.site_id, "file": name, "spec": spec.to_dict(), "split": ds.split.to_dict()})
    write_manifest(out, "generate", cfg, {"sites": entries})
    for ds in datasets:
        log.info("%s: %d rows (train/val/test %s)", ds.site_id, ds.n, ds.split.sizes())
    return EXIT_OK


def cmd_train(cfg: RunConfig) -> int:
    datasets = load_data(cfg)
    spec = network_spec(cfg, datasets)
    res = train_one(cfg, cfg.method, datasets, spec, Path(cfg.out), run_id=f"{cfg.method}-seed{cfg.seed}")
    print(f"{cfg.method}: average test MAE {res.average_mae:.4f}, SCA {res.sca:.1f}%, "
          f"overlap {res.overlap:.3f}, rounds {res.rounds} (best {res.best_round})")
    return EXIT_OK


def _threads() -> int:
    raw = os.environ.get("HARMSIM_THREADS", "1")
    try:
        n = int(raw)
    except ValueError:
        raise ConfigError(f"HARMSIM_THREADS must be an integer, got {raw!r}") from None
    if n < 1:
        raise ConfigError("HARMSIM_THREADS must be >= 1")
    return n


def comparison_table(outcomes: Sequence[TrainOutcome]) -> tuple[list[str], list[list[str]]]:
    sites = list(outcomes[0].per_site_mae)
    header = ["method", *(f"mae_{s}" for s in sites), "average_mae", "sca", "overlap", "rounds"]
    rows = [
        [o.method, *(f"{o.per_site_mae[s]:.4f}" for s in sites), f"{o.average_mae:.4f}", f"{o.sca:.1f}", f"{o.overlap:.3f}", str(o.rounds)]
        for o in outcomes
    ]
    return header, rows


def aligned(header: Sequence[str], rows: Sequence[Sequence[str]]) -> str:
    widths = [max(len(str(r[i])) for r in [header, *rows]) for i in range(len(header))]
    lines = ["  ".join(str(c).ljust(w) for c, w in zip(r, widths)).rstrip() for r in [header, *rows]]
    lines.insert(1, "  ".join("-" * w for w in widths))
    return "\n".join(lines) + "\n"


def cmd_compare(cfg: RunConfig) -> int:
    if len(cfg.methods) < 2:
        raise ConfigError("compare needs at least two methods")
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    datasets = load_data(cfg)
    spec = network_spec(cfg, datasets)
    write_manifest(out, "compare", cfg, {"network": spec.to_dict()})

    def job(item):
        i, method = item
        run_id = f"{i:02d}-{method}"
        return train_one(cfg, method, datasets, spec, out / run_id, run_id)

    workers = min(_threads(), len(cfg.methods))
    items = list(enumerate(cfg.methods))
    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            outcomes = list(pool.map(job, items))
    else:
        outcomes = [job(it) for it in items]

    header, rows = comparison_table(outcomes)
    with open(out / "comparison.csv", "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        for o in outcomes:
            sites = list(o.per_site_mae)
            w.writerow([o.method, *(_fmt(o.per_site_mae[s]) for s in sites), _fmt(o.average_mae), _fmt(o.sca), _fmt(o.overlap), o.rounds])

    # paired tests between the two best distinct methods by average MAE (first listed wins ties)
    ranked = sorted(outcomes, key=lambda o: o.average_mae)
    distinct = [o for i, o in enumerate(ranked) if o.method not in {p.method for p in ranked[:i]}]
    first, second = (distinct + ranked)[:2] if len(distinct) < 2 else distinct[:2]
    test_rows = []
    for site in first.test_errors:
        r = paired_ttest(first.test_errors[site], second.test_errors[site])
        test_rows.append([site, first.method, second.method, f"{r.t:.4f}", f"{r.p:.4g}", str(r.df), str(r.degenerate).lower()])
    t_header = ["site", "method_a", "method_b", "t", "p", "df", "degenerate"]
    with open(out / "ttests.csv", "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(t_header)
        w.writerows(test_rows)

    text = aligned(header, rows) + "\nPaired t-tests on per-subject test errors\n" + aligned(t_header, test_rows)
    (out / "comparison.txt").write_text(text, encoding="utf-8")
    sys.stdout.write(text)
    return EXIT_OK


def stability_values(cfg: RunConfig) -> np.ndarray:
    datasets = load_data(cfg)
    X = np.concatenate([ds.part("train")[0] for ds in datasets])
    if cfg.stability.checkpoint:
        params, _ = wire.load_checkpoint(cfg.stability.checkpoint)
        X = feature_extract(X, params)
    j = cfg.stability.feature
    if not 0 <= j < X.shape[1]:
        raise ConfigError(f"stability.feature {j} out of range for {X.shape[1]} features")
    return X[:, j]


def cmd_stability(cfg: RunConfig) -> int:
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    values = stability_values(cfg)
    if max(cfg.stability.sample_sizes) > values.size:
        raise ConfigError(f"largest sample size exceeds the {values.size} available feature values")
    rows = fit_stability_experiment(values, cfg.stability.sample_sizes, cfg.stability.repeats, rng_seed=cfg.seed)
    write_manifest(out, "stability", cfg)
    with open(out / "stability.csv", "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["method", "sample_size", "std_of_mean_estimates"])
        for r in rows:
            w.writerow([r.method, r.sample_size, _fmt(r.std_of_mean_estimates)])
    by_size: dict[int, dict[str, float]] = {}
    for r in rows:
        by_size.setdefault(r.sample_size, {})[r.method] = r.std_of_mean_estimates
    table = [[str(n), f"{v['gaussian']:.5f}", f"{v['boxcox']:.5f}"] for n, v in by_size.items()]
    sys.stdout.write(aligned(["n", "gaussian", "boxcox"], table))
    return EXIT_OK


COMMANDS = {"generate": cmd_generate, "train": cmd_train, "compare": cmd_compare, "stability": cmd_stability}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="harmsim", description="Federated harmonisation simulator.")
    parser.add_argument("command", choices=sorted(COMMANDS))
    parser.add_argument("--config", help="JSON run configuration")
    parser.add_argument("--seed", type=int, help="global seed (overrides the config)")
    parser.add_argument("--method", help="method preset; a comma-separated list for compare")
    parser.add_argument("--labeled-sites", help="comma-separated site ids that hold labels")
    parser.add_argument("--out", help="output directory")
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    return parser


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = resolve_config(args)
        return COMMANDS[args.command](cfg)
    except DivergenceError as exc:
        print(f"harmsim: diverged: {exc}", file=sys.stderr)
        return EXIT_DIVERGED
    except (ConfigError, ParseError, HarmsimError, ValueError) as exc:
        print(f"harmsim: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except OSError as exc:
        print(f"harmsim: I/O error: {exc}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
