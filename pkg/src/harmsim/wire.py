"""JSON encodings for everything that crosses a site boundary or hits disk.

Floats are written with Python's shortest round-trip repr, so every decode
is bit-exact.
"""
from __future__ import annotations

import json
from pathlib import Path

import numpy as np

from .knowledge import FeatureSummary, KnowledgeStore
from .model import COMPONENTS, Component, ModelParams, NetworkSpec

CHECKPOINT_VERSION = 1
SUMMARY_KEYS = ("site_id", "mu", "sigma", "n_samples", "round_tag")


def dumps(obj) -> bytes:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"), allow_nan=False).encode("utf-8")


def loads(data: bytes):
    return json.loads(data.decode("utf-8"))


def params_to_dict(params: ModelParams) -> dict:
    return {
        "spec": params.spec.to_dict(),
        **{name: getattr(params, name).values.tolist() for name in COMPONENTS},
    }


def params_from_dict(d: dict) -> ModelParams:
    spec = NetworkSpec.from_dict(d["spec"])
    parts = {name: Component(spec.shapes(name), np.array(d[name], dtype=np.float64)) for name in COMPONENTS}
    return ModelParams(spec, **parts)


def summary_to_dict(summary: FeatureSummary, round_tag: int) -> dict:
    return {
        "site_id": summary.site_id,
        "mu": summary.mu.tolist(),
        "sigma": summary.sigma.tolist(),
        "n_samples": int(summary.n_samples),
        "round_tag": int(round_tag),
    }


def summary_from_dict(d: dict) -> tuple[FeatureSummary, int]:
    extra = set(d) - set(SUMMARY_KEYS)
    if extra:
        raise ValueError(f"unexpected summary fields {sorted(extra)}")
    return FeatureSummary(d["site_id"], d["mu"], d["sigma"], int(d["n_samples"])), int(d["round_tag"])


def encode_params(params: ModelParams) -> bytes:
    return dumps(params_to_dict(params))


def decode_params(data: bytes) -> ModelParams:
    return params_from_dict(loads(data))


def encode_summary(summary: FeatureSummary, round_tag: int) -> bytes:
    return dumps(summary_to_dict(summary, round_tag))


def decode_summary(data: bytes) -> tuple[FeatureSummary, int]:
    return summary_from_dict(loads(data))


def store_to_list(store: KnowledgeStore) -> list:
    """Summaries in roster order; sites without a summary are skipped."""
    return [summary_to_dict(store.summaries[s], store.round_tag) for s in store.site_ids if s in store.summaries]


def encode_store(store: KnowledgeStore) -> bytes:
    return dumps({"site_ids": list(store.site_ids), "summaries": store_to_list(store), "round_tag": store.round_tag})


def decode_store(data: bytes) -> KnowledgeStore:
    d = loads(data)
    summaries = {}
    for item in d["summaries"]:
        s, _ = summary_from_dict(item)
        summaries[s.site_id] = s
    return KnowledgeStore(tuple(d["site_ids"]), summaries, int(d["round_tag"]))


def save_store(path, store: KnowledgeStore) -> None:
    Path(path).write_text(json.dumps(store_to_list(store), indent=1, allow_nan=False) + "\n", encoding="utf-8")


def save_checkpoint(path, params: ModelParams, hyper: dict, round_index: int, extra: dict | None = None) -> None:
    payload = {
        "format": "harmsim-checkpoint",
        "version": CHECKPOINT_VERSION,
        "round": int(round_index),
        "hyper": hyper,
        "params": params_to_dict(params),
    }
    if extra:
        payload["extra"] = extra
    Path(path).write_text(json.dumps(payload, sort_keys=True, allow_nan=False) + "\n", encoding="utf-8")


def load_checkpoint(path) -> tuple[ModelParams, dict]:
    payload = json.loads(Path(path).read_text(encoding="utf-8"))
    if payload.get("format") != "harmsim-checkpoint":
        raise ValueError(f"{path} is not a harmsim checkpoint")
    if payload.get("version") != CHECKPOINT_VERSION:
        raise ValueError(f"unsupported checkpoint version {payload.get('version')}")
    return params_from_dict(payload["params"]), payload
