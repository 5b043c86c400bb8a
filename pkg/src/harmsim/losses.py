"""Task, proximal, domain and confusion losses, plus their gradients w.r.t. network outputs.

All batch reductions are means so the loss weights keep their meaning across
batch sizes. Log-losses floor probabilities at ``PROB_FLOOR``.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import DimensionError

PROB_FLOOR = 1e-12


@dataclass(frozen=True)
class LossWeights:
    alpha: float = 1.0
    beta: float = 100.0
    mu: float = 0.01

    def __post_init__(self):
        if min(self.alpha, self.beta, self.mu) < 0:
            raise ValueError(f"loss weights must be >= 0, got {self}")


@dataclass(frozen=True)
class LossComponents:
    task: float
    domain: float = 0.0
    confusion: float = 0.0


def _pair(y, y_hat) -> tuple[np.ndarray, np.ndarray]:
    y = np.asarray(y, dtype=np.float64).reshape(-1)
    y_hat = np.asarray(y_hat, dtype=np.float64).reshape(-1)
    if y.size == 0:
        raise ValueError("task loss needs at least one sample")
    if y.shape != y_hat.shape:
        raise DimensionError(f"targets {y.shape} vs predictions {y_hat.shape}")
    return y, y_hat


def task_loss(y, y_hat) -> float:
    """Mean squared error."""
    y, y_hat = _pair(y, y_hat)
    r = y_hat - y
    return float(np.mean(r * r))


def task_loss_mae(y, y_hat) -> float:
    y, y_hat = _pair(y, y_hat)
    return float(np.mean(np.abs(y_hat - y)))


def task_loss_grad(y, y_hat, kind: str = "mse") -> np.ndarray:
    """d(loss)/d(y_hat) for the chosen task loss."""
    y, y_hat = _pair(y, y_hat)
    if kind == "mse":
        return 2.0 * (y_hat - y) / y.size
    if kind == "mae":
        return np.sign(y_hat - y) / y.size
    raise ValueError(f"unknown task loss {kind!r}")


def prox_loss(global_params, local_params) -> float:
    """Squared distance between the repr and pred weights of two models.

    The domain predictor is deliberately left out.
    """
    total = 0.0
    for name in ("repr", "pred"):
        a = getattr(global_params, name).values
        b = getattr(local_params, name).values
        if a.shape != b.shape:
            raise DimensionError(f"{name} params differ in shape: {a.shape} vs {b.shape}")
        diff = a - b
        total += float(diff @ diff)
    return total


def combined_task_objective(y, y_hat, global_params, local_params, mu: float) -> float:
    return task_loss(y, y_hat) + mu * prox_loss(global_params, local_params)


def _check_probs(p: np.ndarray) -> np.ndarray:
    p = np.asarray(p, dtype=np.float64)
    if p.ndim != 2 or p.shape[0] == 0:
        raise DimensionError(f"probabilities must be a non-empty N x H matrix, got {p.shape}")
    return p


def _check_labels(d, n: int, h: int) -> np.ndarray:
    d = np.asarray(d)
    if d.shape != (n,):
        raise DimensionError(f"domain labels {d.shape} vs {n} rows")
    if d.size and (d.min() < 0 or d.max() >= h):
        raise ValueError(f"domain label out of range [0, {h})")
    return d.astype(np.int64)


def domain_loss(p, d) -> float:
    """Mean categorical cross-entropy of site probabilities against site labels."""
    p = _check_probs(p)
    d = _check_labels(d, p.shape[0], p.shape[1])
    picked = p[np.arange(p.shape[0]), d]
    return float(np.mean(-np.log(np.maximum(picked, PROB_FLOOR))))


def confusion_loss(p) -> float:
    """Mean cross-entropy of site probabilities against the uniform distribution."""
    p = _check_probs(p)
    h = p.shape[1]
    return float(np.mean(-np.log(np.maximum(p, PROB_FLOOR)).sum(axis=1) / h))


# Gradients w.r.t. the pre-softmax logits. The probability floor is ignored here;
# it only bites below 1e-12.
def domain_loss_grad_logits(p: np.ndarray, d) -> np.ndarray:
    p = _check_probs(p)
    d = _check_labels(d, p.shape[0], p.shape[1])
    g = p.copy()
    g[np.arange(p.shape[0]), d] -= 1.0
    return g / p.shape[0]


def confusion_loss_grad_logits(p: np.ndarray) -> np.ndarray:
    p = _check_probs(p)
    return (p - 1.0 / p.shape[1]) / p.shape[0]


def total_loss(components: LossComponents, weights: LossWeights) -> float:
    """L = L_p + alpha * L_d + beta * L_conf (diagnostic only; training applies the parts in phases)."""
    return components.task + weights.alpha * components.domain + weights.beta * components.confusion
