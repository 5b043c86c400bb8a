"""Dense-layer numerical kernel: affine/ReLU/softmax passes, Adam, gradcheck.

Matrices are plain 2-D ``float64`` numpy arrays. Everything here is a pure
function of its arguments.
"""
from __future__ import annotations

from dataclasses import dataclass, replace
from typing import Callable

import numpy as np

from .errors import DimensionError, OracleError

FD_EPS = 1e-5


def as_matrix(data, name: str = "matrix") -> np.ndarray:
    """Coerce ``data`` to a finite 2-D float64 array."""
    arr = np.array(data, dtype=np.float64)
    if arr.ndim != 2:
        raise DimensionError(f"{name} must be 2-D, got shape {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise ValueError(f"{name} contains NaN or Inf")
    return arr


@dataclass(frozen=True)
class LayerGrads:
    d_weights: np.ndarray
    d_bias: np.ndarray
    d_input: np.ndarray


@dataclass(frozen=True)
class AdamState:
    m: np.ndarray
    v: np.ndarray
    step_count: int = 0
    lr: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    def __post_init__(self):
        if self.m.shape != self.v.shape:
            raise DimensionError(f"adam moments differ: {self.m.shape} vs {self.v.shape}")
        if self.step_count < 0:
            raise ValueError("step_count must be >= 0")
        if not (0.0 < self.beta1 < 1.0 and 0.0 < self.beta2 < 1.0):
            raise ValueError("beta1 and beta2 must lie in (0, 1)")

    @classmethod
    def zeros(cls, size: int, lr: float = 1e-4, **kwargs) -> "AdamState":
        return cls(m=np.zeros(size), v=np.zeros(size), lr=lr, **kwargs)


def _check_affine(x: np.ndarray, w: np.ndarray) -> None:
    if x.ndim != 2 or w.ndim != 2 or x.shape[1] != w.shape[0]:
        raise DimensionError(f"input {x.shape} does not conform to weights {w.shape}")


def affine_forward(x: np.ndarray, w: np.ndarray, b: np.ndarray) -> np.ndarray:
    _check_affine(x, w)
    if b.shape != (w.shape[1],):
        raise DimensionError(f"bias {b.shape} does not conform to weights {w.shape}")
    return x @ w + b


def affine_backward(x: np.ndarray, w: np.ndarray, upstream: np.ndarray) -> LayerGrads:
    _check_affine(x, w)
    if upstream.shape != (x.shape[0], w.shape[1]):
        raise DimensionError(
            f"upstream {upstream.shape} does not match forward output {(x.shape[0], w.shape[1])}"
        )
    return LayerGrads(
        d_weights=x.T @ upstream,
        d_bias=upstream.sum(axis=0),
        d_input=upstream @ w.T,
    )


def relu_forward(x: np.ndarray) -> np.ndarray:
    return np.maximum(x, 0.0)


def relu_backward(x: np.ndarray, upstream: np.ndarray) -> np.ndarray:
    if x.shape != upstream.shape:
        raise DimensionError(f"relu input {x.shape} vs upstream {upstream.shape}")
    return np.where(x > 0.0, upstream, 0.0)


def softmax_rows(logits: np.ndarray) -> np.ndarray:
    shifted = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=1, keepdims=True)


def adam_update(params: np.ndarray, grads: np.ndarray, state: AdamState) -> tuple[np.ndarray, AdamState]:
    """One bias-corrected Adam step. Returns new arrays; inputs are not mutated."""
    if params.shape != grads.shape or params.shape != state.m.shape:
        raise DimensionError(
            f"adam length mismatch: params {params.shape}, grads {grads.shape}, state {state.m.shape}"
        )
    t = state.step_count + 1
    m = state.beta1 * state.m + (1.0 - state.beta1) * grads
    v = state.beta2 * state.v + (1.0 - state.beta2) * grads * grads
    m_hat = m / (1.0 - state.beta1**t)
    v_hat = v / (1.0 - state.beta2**t)
    new_params = params - state.lr * m_hat / (np.sqrt(v_hat) + state.eps)
    return new_params, replace(state, m=m, v=v, step_count=t)


def fd_gradient(f: Callable[[np.ndarray], float], x: np.ndarray, eps: float = FD_EPS) -> np.ndarray:
    """Central finite-difference gradient of a scalar function."""
    x = np.array(x, dtype=np.float64)
    g = np.empty_like(x)
    flat = x.reshape(-1)
    gflat = g.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + eps
        fp = float(f(x))
        flat[i] = orig - eps
        fm = float(f(x))
        flat[i] = orig
        if not (np.isfinite(fp) and np.isfinite(fm)):
            raise OracleError(f"non-finite function value at coordinate {i}")
        gflat[i] = (fp - fm) / (2.0 * eps)
    return g


def fd_gradcheck(
    f: Callable[[np.ndarray], float],
    x: np.ndarray,
    analytic_grad: np.ndarray,
    eps: float = FD_EPS,
) -> float:
    """Max over coordinates of |g_fd - g_an| / max(1, |g_fd| + |g_an|)."""
    g_fd = fd_gradient(f, x, eps)
    g_an = np.asarray(analytic_grad, dtype=np.float64)
    if g_fd.shape != g_an.shape:
        raise DimensionError(f"analytic grad {g_an.shape} vs parameter {g_fd.shape}")
    if g_fd.size == 0:
        return 0.0
    err = np.abs(g_fd - g_an) / np.maximum(1.0, np.abs(g_fd) + np.abs(g_an))
    return float(err.max())
