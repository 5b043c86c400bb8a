"""The federated protocol: broadcast, knowledge update, local training, aggregation.

Sites talk to the coordinator only through a :class:`Channel`, which carries
serialized bytes. Per round a site uploads one feature summary and, if it
trains, one set of model weights.
"""
from __future__ import annotations

import enum
import logging
import time
import zlib
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field, fields
from functools import reduce
from math import gcd
from typing import Callable, Optional, Sequence

import numpy as np

from . import wire
from .errors import ConfigError, DivergenceError, InsufficientDataError, ProtocolError
from .knowledge import KnowledgeStore, assemble_mixed_batch, summarize_features
from .model import (
    COMPONENTS,
    ModelParams,
    NetworkSpec,
    backward_confusion,
    backward_domain,
    backward_task,
    feature_extract,
    init_params,
    predict,
)
from .ndcore import AdamState, adam_update
from .synthdata import SiteDataset

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class Hyper:
    batch_size: int = 16
    lr: float = 1e-4
    local_epochs: int = 10
    mu: float = 0.01
    alpha: float = 1.0
    beta: float = 100.0
    max_rounds: int = 150
    patience: int = 10
    task_loss: str = "mse"
    phase_granularity: str = "batch"

    def __post_init__(self):
        for name in ("batch_size", "local_epochs", "max_rounds", "patience"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be >= 1")
        if self.lr <= 0:
            raise ConfigError("lr must be positive")
        if min(self.mu, self.alpha, self.beta) < 0:
            raise ConfigError("mu, alpha and beta must be >= 0")
        if self.task_loss not in ("mse", "mae"):
            raise ConfigError(f"task_loss must be 'mse' or 'mae', got {self.task_loss!r}")
        if self.phase_granularity not in ("batch", "epoch"):
            raise ConfigError(f"phase_granularity must be 'batch' or 'epoch', got {self.phase_granularity!r}")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def field_names(cls) -> tuple[str, ...]:
        return tuple(f.name for f in fields(cls))


class AggregationStrategy(enum.Enum):
    FEDAVG = "fedavg"
    FEDEQUAL = "fedequal"


@dataclass(frozen=True)
class TrainingMode:
    """Which optional parts of local training are on, and which sites train.

    ``labeled_sites=None`` means every site trains.
    """

    harmonize: bool = False
    prox: bool = False
    labeled_sites: Optional[frozenset] = None

    def __post_init__(self):
        if self.labeled_sites is not None:
            object.__setattr__(self, "labeled_sites", frozenset(self.labeled_sites))
            if not self.labeled_sites:
                raise ConfigError("labeled_sites must be non-empty")

    def trains(self, site_id: str) -> bool:
        return self.labeled_sites is None or site_id in self.labeled_sites


# name -> (strategy, harmonize, prox); the component lattice of the method table
METHOD_PRESETS = {
    "fedavg": (AggregationStrategy.FEDAVG, False, False),
    "fedprox": (AggregationStrategy.FEDAVG, False, True),
    "fedequal": (AggregationStrategy.FEDEQUAL, False, False),
    "ablation-a": (AggregationStrategy.FEDAVG, True, False),
    "ablation-b": (AggregationStrategy.FEDEQUAL, True, False),
    "ablation-c": (AggregationStrategy.FEDAVG, True, True),
    "fedharmony": (AggregationStrategy.FEDEQUAL, True, True),
}


def method_preset(name: str, labeled_sites=None) -> tuple[AggregationStrategy, TrainingMode]:
    try:
        strategy, harm, prox = METHOD_PRESETS[name]
    except KeyError:
        raise ConfigError(f"unknown method {name!r}; choose from {sorted(METHOD_PRESETS)}") from None
    return strategy, TrainingMode(harmonize=harm, prox=prox, labeled_sites=labeled_sites)


@dataclass
class ProtocolState:
    round: int
    global_params: ModelParams
    store: KnowledgeStore
    best_val_mae: float = float("inf")
    rounds_since_improvement: int = 0


@dataclass(frozen=True)
class LocalMetrics:
    site_id: str
    n_train: int
    task_loss: float
    domain_loss: float = float("nan")
    confusion_loss: float = float("nan")


@dataclass(frozen=True)
class Message:
    round: int
    sender: str
    receiver: str
    kind: str
    payload: bytes


class Channel:
    """In-process transport. Every payload is bytes; ``record=True`` keeps a copy."""

    COORDINATOR = "coordinator"

    def __init__(self, record: bool = False):
        self.record = record
        self.messages: list[Message] = []

    def send(self, round_index: int, sender: str, receiver: str, kind: str, payload: bytes) -> bytes:
        if not isinstance(payload, bytes):
            raise TypeError("channel payloads must be bytes")
        if self.record:
            self.messages.append(Message(round_index, sender, receiver, kind, payload))
        return payload

    def uplink(self, sender: str | None = None, round_index: int | None = None) -> list[Message]:
        return [
            m
            for m in self.messages
            if m.receiver == self.COORDINATOR
            and (sender is None or m.sender == sender)
            and (round_index is None or m.round == round_index)
        ]


def derive_seed(global_seed: int, site_id: str, round_index: int) -> int:
    """Per-site, per-round seed; independent of execution order."""
    ss = np.random.SeedSequence([int(global_seed), zlib.crc32(site_id.encode("utf-8")), int(round_index)])
    return int(ss.generate_state(1, dtype=np.uint64)[0])


# --- coordinator steps ------------------------------------------------------------

def broadcast(state: ProtocolState, site_ids: Sequence[str], channel: Channel | None = None) -> dict:
    """Send the global weights and knowledge store to every site.

    Each site gets its own decoded copy of the same bytes.
    """
    channel = channel or Channel()
    params_bytes = wire.encode_params(state.global_params)
    store_bytes = wire.encode_store(state.store)
    out = {}
    for site in site_ids:
        p = channel.send(state.round, Channel.COORDINATOR, site, "params", params_bytes)
        s = channel.send(state.round, Channel.COORDINATOR, site, "store", store_bytes)
        out[site] = (wire.decode_params(p), wire.decode_store(s))
    return out


def site_summary(site: SiteDataset, params: ModelParams):
    X, _ = site.part("train")
    if X.shape[0] < 2:
        raise InsufficientDataError(f"site {site.site_id!r} has {X.shape[0]} training rows; need >= 2")
    return summarize_features(feature_extract(X, params), site.site_id)


def update_knowledge(
    state: ProtocolState,
    site_datasets: Sequence[SiteDataset],
    channel: Channel | None = None,
) -> KnowledgeStore:
    """Every site (labeled or not) summarises its training features under the current extractor."""
    channel = channel or Channel()
    site_ids = tuple(ds.site_id for ds in site_datasets)
    summaries = {}
    for ds in site_datasets:
        payload = wire.encode_summary(site_summary(ds, state.global_params), state.round)
        received = channel.send(state.round, ds.site_id, Channel.COORDINATOR, "summary", payload)
        summary, tag = wire.decode_summary(received)
        if tag != state.round or summary.site_id != ds.site_id:
            raise ProtocolError(f"stale or misaddressed summary from {ds.site_id!r}")
        summaries[summary.site_id] = summary
    return KnowledgeStore(site_ids, summaries, state.round)


# --- local training -----------------------------------------------------------------

def _check_finite(value: float, round_index: int, epoch: int, phase: str, site: str) -> None:
    if not np.isfinite(value):
        raise DivergenceError(f"non-finite {phase} loss at site {site!r}, round {round_index}, epoch {epoch}")


def local_round(
    site: SiteDataset,
    global_params: ModelParams,
    store: KnowledgeStore | None,
    hyper: Hyper,
    mode: TrainingMode,
    seed: int,
    round_index: int = 0,
) -> tuple[ModelParams, LocalMetrics]:
    """E local epochs of three-phase training starting from the broadcast weights.

    Per minibatch: (1) Adam step on repr+pred for task loss + mu * proximal
    term against the broadcast weights; (2) Adam step on dom for the domain
    loss over real + surrogate features; (3) Adam step on repr for beta times
    the confusion loss, with features recomputed after phase 1. Phases 2-3 only
    run with ``mode.harmonize``.
    """
    if not mode.trains(site.site_id):
        raise ProtocolError(f"site {site.site_id!r} is not a training site in this mode")
    X, y = site.part("train")
    if y is None:
        raise ProtocolError(f"site {site.site_id!r} has no labels to train on")
    if mode.harmonize and store is None:
        raise ProtocolError("harmonisation needs a knowledge store")
    n = X.shape[0]
    mu = hyper.mu if mode.prox else 0.0
    anchor = global_params
    params = global_params.copy()

    shuffle_ss, mix_ss = np.random.SeedSequence(seed).spawn(2)
    shuffle_rng = np.random.default_rng(shuffle_ss)
    mix_rng = np.random.default_rng(mix_ss)
    # one optimiser per phase, fresh every round
    opt = {
        "task_repr": AdamState.zeros(params.repr.values.size, hyper.lr),
        "task_pred": AdamState.zeros(params.pred.values.size, hyper.lr),
        "dom": AdamState.zeros(params.dom.values.size, hyper.lr),
        "conf_repr": AdamState.zeros(params.repr.values.size, hyper.lr),
    }
    epoch_losses: dict[str, list] = {}

    def task_step(idx, epoch):
        nonlocal params
        loss, g = backward_task(X[idx], y[idx], params, anchor, mu, hyper.task_loss)
        _check_finite(loss, round_index, epoch, "task", site.site_id)
        new_repr, opt["task_repr"] = adam_update(params.repr.values, g.repr, opt["task_repr"])
        new_pred, opt["task_pred"] = adam_update(params.pred.values, g.pred, opt["task_pred"])
        params = params.replace(repr=new_repr, pred=new_pred)
        epoch_losses["task"].append(loss)

    def domain_step(idx, epoch):
        nonlocal params
        q = feature_extract(X[idx], params)
        batch = assemble_mixed_batch(q, site.site_id, store, int(mix_rng.integers(2**63)))
        loss, g = backward_domain(batch.Q, batch.d, params, hyper.alpha)
        _check_finite(loss, round_index, epoch, "domain", site.site_id)
        new_dom, opt["dom"] = adam_update(params.dom.values, g.dom, opt["dom"])
        params = params.replace(dom=new_dom)
        epoch_losses["domain"].append(loss)

    def confusion_step(idx, epoch):
        nonlocal params
        loss, g = backward_confusion(X[idx], params, hyper.beta)
        _check_finite(loss, round_index, epoch, "confusion", site.site_id)
        new_repr, opt["conf_repr"] = adam_update(params.repr.values, g.repr, opt["conf_repr"])
        params = params.replace(repr=new_repr)
        epoch_losses["confusion"].append(loss)

    for epoch in range(hyper.local_epochs):
        epoch_losses = {"task": [], "domain": [], "confusion": []}
        perm = shuffle_rng.permutation(n)
        batches = [perm[i : i + hyper.batch_size] for i in range(0, n, hyper.batch_size)]
        if hyper.phase_granularity == "batch":
            for idx in batches:
                task_step(idx, epoch)
                if mode.harmonize:
                    domain_step(idx, epoch)
                    confusion_step(idx, epoch)
        else:
            for idx in batches:
                task_step(idx, epoch)
            if mode.harmonize:
                for idx in batches:
                    domain_step(idx, epoch)
                for idx in batches:
                    confusion_step(idx, epoch)

    def mean(xs):
        return float(np.mean(xs)) if xs else float("nan")

    metrics = LocalMetrics(
        site.site_id,
        n,
        mean(epoch_losses["task"]),
        mean(epoch_losses["domain"]),
        mean(epoch_losses["confusion"]),
    )
    return params, metrics


# --- aggregation ----------------------------------------------------------------------

def _weighted_mean(vectors: Sequence[np.ndarray], weights: Sequence[int]) -> np.ndarray:
    """Order-independent weighted mean.

    Integer weights are reduced by their gcd (so equal weights take exactly the
    unweighted path) and each coordinate is summed in sorted order.
    """
    g = reduce(gcd, weights)
    w = [k // g for k in weights]
    stacked = np.stack([v if k == 1 else k * v for v, k in zip(vectors, w)])
    stacked.sort(axis=0)
    acc = stacked[0].copy()
    for row in stacked[1:]:
        acc += row
    return acc / sum(w)


def _aggregate(params_list: Sequence[ModelParams], weights: Sequence[int]) -> ModelParams:
    if not params_list:
        raise ProtocolError("cannot aggregate an empty update list")
    spec = params_list[0].spec
    if any(p.spec != spec for p in params_list):
        raise ProtocolError("updates disagree on network shape")
    vectors = {name: _weighted_mean([getattr(p, name).values for p in params_list], weights) for name in COMPONENTS}
    return params_list[0].replace(**vectors)


def aggregate_fedavg(updates: Sequence[tuple[ModelParams, int]]) -> ModelParams:
    """Mean weighted by each site's training-set size, per component."""
    if not updates:
        raise ProtocolError("cannot aggregate an empty update list")
    counts = [int(n) for _, n in updates]
    if min(counts) < 1:
        raise ProtocolError("sample counts must be positive")
    return _aggregate([p for p, _ in updates], counts)


def aggregate_fedequal(updates: Sequence[ModelParams]) -> ModelParams:
    """Unweighted per-component mean: every site counts once."""
    return _aggregate(list(updates), [1] * len(updates))


# --- the loop ---------------------------------------------------------------------------

@dataclass
class RoundRecord:
    round: int
    per_site_train_loss: dict
    per_site_val_mae: dict
    mean_val_mae: float
    aggregation: str
    wall_ms: Optional[int] = None

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class ProtocolResult:
    params: ModelParams
    best_round: int
    log: list[RoundRecord] = field(default_factory=list)
    store: Optional[KnowledgeStore] = None
    final_state: Optional[ProtocolState] = None

    @property
    def rounds_run(self) -> int:
        return len(self.log)


def validation_mae(params: ModelParams, datasets: Sequence[SiteDataset]) -> dict:
    out = {}
    for ds in datasets:
        X, y = ds.part("val")
        if y is None or len(y) == 0:
            continue
        out[ds.site_id] = float(np.mean(np.abs(predict(X, params) - y)))
    return out


def run_protocol(
    datasets: Sequence[SiteDataset],
    spec: NetworkSpec,
    hyper: Hyper,
    strategy: AggregationStrategy,
    mode: TrainingMode,
    seed: int,
    channel: Channel | None = None,
    on_round: Callable[[RoundRecord], None] | None = None,
    workers: int = 1,
    timing: bool = False,
) -> ProtocolResult:
    """Rounds of broadcast -> knowledge update -> local training -> aggregation.

    Stops once the mean validation MAE over every site with labels has not improved
    for ``hyper.patience`` rounds, or after ``hyper.max_rounds``. Returns the
    weights from the best validation round.
    """
    site_ids = tuple(ds.site_id for ds in datasets)
    if len(set(site_ids)) != len(site_ids):
        raise ConfigError("duplicate site ids")
    if spec.n_sites != len(datasets):
        raise ConfigError(f"domain head has {spec.n_sites} outputs for {len(datasets)} sites")
    for ds in datasets:
        if ds.X.shape[1] != spec.input_dim:
            raise ConfigError(f"site {ds.site_id!r} has {ds.X.shape[1]} features, network expects {spec.input_dim}")
    if mode.labeled_sites is not None and not mode.labeled_sites <= set(site_ids):
        raise ConfigError(f"labeled sites {sorted(mode.labeled_sites - set(site_ids))} not in the federation")
    trainers = [ds for ds in datasets if mode.trains(ds.site_id)]
    for ds in trainers:
        if not ds.labeled:
            raise ConfigError(f"training site {ds.site_id!r} has no labels")
    channel = channel or Channel()

    state = ProtocolState(0, init_params(spec, seed), KnowledgeStore(site_ids))
    best = state.global_params
    best_round = 0
    records: list[RoundRecord] = []
    pool = ThreadPoolExecutor(max_workers=workers) if workers > 1 else None
    try:
        for t in range(1, hyper.max_rounds + 1):
            start = time.perf_counter()
            state.round = t
            # step 3: summaries go up, the collated store comes back with the weights
            state.store = update_knowledge(state, datasets, channel)
            received = broadcast(state, site_ids, channel)

            def train(ds):
                params, store = received[ds.site_id]
                return local_round(ds, params, store, hyper, mode, derive_seed(seed, ds.site_id, t), t)

            results = list(pool.map(train, trainers)) if pool else [train(ds) for ds in trainers]

            updates = []
            for ds, (params, metrics) in zip(trainers, results):
                payload = channel.send(t, ds.site_id, Channel.COORDINATOR, "params", wire.encode_params(params))
                updates.append((wire.decode_params(payload), state.store.summaries[ds.site_id].n_samples))
            if strategy is AggregationStrategy.FEDAVG:
                new_params = aggregate_fedavg(updates)
            else:
                new_params = aggregate_fedequal([p for p, _ in updates])
            if not new_params.is_finite():
                raise DivergenceError(f"aggregated weights are non-finite after round {t}")
            state.global_params = new_params

            val = validation_mae(new_params, datasets)
            mean_val = float(np.mean(list(val.values()))) if val else float("nan")
            if mean_val < state.best_val_mae:
                state.best_val_mae = mean_val
                state.rounds_since_improvement = 0
                best, best_round = new_params, t
            else:
                state.rounds_since_improvement += 1

            record = RoundRecord(
                round=t,
                per_site_train_loss={m.site_id: m.task_loss for _, m in results},
                per_site_val_mae=val,
                mean_val_mae=mean_val,
                aggregation=strategy.value,
                wall_ms=int(round((time.perf_counter() - start) * 1000)) if timing else None,
            )
            records.append(record)
            log.debug("round %d: mean val MAE %.4f", t, mean_val)
            if on_round is not None:
                on_round(record)
            if state.rounds_since_improvement >= hyper.patience:
                break
    finally:
        if pool is not None:
            pool.shutdown()
    return ProtocolResult(best.copy(), best_round, records, state.store, state)
