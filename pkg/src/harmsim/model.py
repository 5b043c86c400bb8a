"""Three-part network: feature extractor, label predictor, domain predictor.

Each part is a stack of affine layers stored as one flat parameter vector.
Hidden layers use ReLU; the last layer of every part is affine only, so the
extracted features can be negative.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterator, Optional

import numpy as np

from . import losses
from .errors import DimensionError
from .ndcore import affine_backward, affine_forward, relu_backward, relu_forward, softmax_rows

COMPONENTS = ("repr", "pred", "dom")


@dataclass(frozen=True)
class NetworkSpec:
    """Layer widths for the three parts.

    ``target_offset``/``target_scale`` are fixed (untrained) constants mapping
    the label head's raw output into target units.
    """

    input_dim: int
    repr_layers: tuple[int, ...]
    pred_layers: tuple[int, ...]
    dom_layers: tuple[int, ...]
    target_offset: float = 0.0
    target_scale: float = 1.0

    def __post_init__(self):
        object.__setattr__(self, "repr_layers", tuple(int(w) for w in self.repr_layers))
        object.__setattr__(self, "pred_layers", tuple(int(w) for w in self.pred_layers))
        object.__setattr__(self, "dom_layers", tuple(int(w) for w in self.dom_layers))
        widths = (self.input_dim, *self.repr_layers, *self.pred_layers, *self.dom_layers)
        if not self.repr_layers or not self.pred_layers or not self.dom_layers:
            raise ValueError("every network part needs at least one layer")
        if min(widths) < 1:
            raise ValueError(f"all layer widths must be >= 1: {self}")
        if self.pred_layers[-1] != 1:
            raise ValueError("label predictor must end in a single output")
        if self.target_scale <= 0:
            raise ValueError("target_scale must be positive")

    @classmethod
    def default(cls, input_dim: int, n_sites: int, feature_dim: int = 16, **kwargs) -> "NetworkSpec":
        return cls(
            input_dim=input_dim,
            repr_layers=(64, 32, feature_dim),
            pred_layers=(32, 1),
            dom_layers=(32, n_sites),
            **kwargs,
        )

    @property
    def feature_dim(self) -> int:
        return self.repr_layers[-1]

    @property
    def n_sites(self) -> int:
        return self.dom_layers[-1]

    def shapes(self, component: str) -> tuple[tuple[int, int], ...]:
        if component == "repr":
            dims = (self.input_dim, *self.repr_layers)
        elif component == "pred":
            dims = (self.feature_dim, *self.pred_layers)
        elif component == "dom":
            dims = (self.feature_dim, *self.dom_layers)
        else:
            raise KeyError(component)
        return tuple(zip(dims[:-1], dims[1:]))

    def to_dict(self) -> dict:
        return {
            "input_dim": self.input_dim,
            "repr_layers": list(self.repr_layers),
            "pred_layers": list(self.pred_layers),
            "dom_layers": list(self.dom_layers),
            "target_offset": self.target_offset,
            "target_scale": self.target_scale,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "NetworkSpec":
        return cls(**d)


def _n_params(shapes) -> int:
    return sum(i * o + o for i, o in shapes)


@dataclass
class Component:
    """One network part: its layer shapes and a flat parameter vector."""

    shapes: tuple[tuple[int, int], ...]
    values: np.ndarray

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        if self.values.shape != (_n_params(self.shapes),):
            raise DimensionError(
                f"parameter vector {self.values.shape} does not match layer shapes {self.shapes}"
            )

    def layers(self) -> Iterator[tuple[np.ndarray, np.ndarray]]:
        """Yield (weights, bias) views into ``values``."""
        offset = 0
        for i, o in self.shapes:
            w = self.values[offset : offset + i * o].reshape(i, o)
            offset += i * o
            b = self.values[offset : offset + o]
            offset += o
            yield w, b

    def copy(self) -> "Component":
        return Component(self.shapes, self.values.copy())

    def with_values(self, values: np.ndarray) -> "Component":
        return Component(self.shapes, values)


@dataclass
class ModelParams:
    spec: NetworkSpec
    repr: Component
    pred: Component
    dom: Component

    def __post_init__(self):
        for name in COMPONENTS:
            comp = getattr(self, name)
            if comp.shapes != self.spec.shapes(name):
                raise DimensionError(f"{name} shapes {comp.shapes} do not match spec")
            if not np.all(np.isfinite(comp.values)):
                raise ValueError(f"{name} parameters contain NaN or Inf")

    def copy(self) -> "ModelParams":
        return ModelParams(self.spec, self.repr.copy(), self.pred.copy(), self.dom.copy())

    def replace(self, **vectors: np.ndarray) -> "ModelParams":
        """New params with the named components' vectors swapped in."""
        parts = {name: getattr(self, name) for name in COMPONENTS}
        for name, vec in vectors.items():
            parts[name] = parts[name].with_values(vec)
        return ModelParams(self.spec, **parts)

    def bit_equal(self, other: "ModelParams") -> bool:
        return self.spec == other.spec and all(
            np.array_equal(getattr(self, n).values, getattr(other, n).values) for n in COMPONENTS
        )

    def is_finite(self) -> bool:
        return all(np.all(np.isfinite(getattr(self, n).values)) for n in COMPONENTS)


@dataclass(frozen=True)
class Gradients:
    """Per-component gradients; ``None`` means the component gets no update."""

    repr: Optional[np.ndarray] = None
    pred: Optional[np.ndarray] = None
    dom: Optional[np.ndarray] = None


def init_params(spec: NetworkSpec, seed: int) -> ModelParams:
    """Kaiming-uniform weights (bound sqrt(6 / fan_in)), zero biases."""
    rng = np.random.default_rng(seed)
    parts = {}
    for name in COMPONENTS:
        shapes = spec.shapes(name)
        chunks = []
        for i, o in shapes:
            bound = np.sqrt(6.0 / i)
            chunks.append(rng.uniform(-bound, bound, size=i * o))
            chunks.append(np.zeros(o))
        parts[name] = Component(shapes, np.concatenate(chunks))
    return ModelParams(spec, **parts)


# --- generic MLP passes -------------------------------------------------------

@dataclass
class LayerCache:
    inputs: list = field(default_factory=list)  # input to each affine layer
    pre: list = field(default_factory=list)  # pre-activation output of each affine layer


def mlp_forward(x: np.ndarray, comp: Component) -> tuple[np.ndarray, LayerCache]:
    cache = LayerCache()
    layers = list(comp.layers())
    h = x
    for k, (w, b) in enumerate(layers):
        cache.inputs.append(h)
        z = affine_forward(h, w, b)
        cache.pre.append(z)
        h = relu_forward(z) if k < len(layers) - 1 else z
    return h, cache


def mlp_backward(cache: LayerCache, comp: Component, upstream: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Returns (flat parameter gradient, gradient w.r.t. the MLP input)."""
    layers = list(comp.layers())
    grads = [None] * len(layers)
    g = upstream
    for k in range(len(layers) - 1, -1, -1):
        if k < len(layers) - 1:
            g = relu_backward(cache.pre[k], g)
        lg = affine_backward(cache.inputs[k], layers[k][0], g)
        grads[k] = (lg.d_weights.reshape(-1), lg.d_bias)
        g = lg.d_input
    flat = np.concatenate([part for pair in grads for part in pair])
    return flat, g


def _check_input(x: np.ndarray, width: int, what: str) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 2 or x.shape[1] != width:
        raise DimensionError(f"{what} must have shape (N, {width}), got {x.shape}")
    return x


# --- forwards -------------------------------------------------------------------

def feature_extract(X: np.ndarray, params: ModelParams) -> np.ndarray:
    X = _check_input(X, params.spec.input_dim, "inputs")
    return mlp_forward(X, params.repr)[0]


def predict_label(Q: np.ndarray, params: ModelParams) -> np.ndarray:
    Q = _check_input(Q, params.spec.feature_dim, "features")
    out = mlp_forward(Q, params.pred)[0][:, 0]
    return params.spec.target_offset + params.spec.target_scale * out


def domain_logits(Q: np.ndarray, params: ModelParams) -> np.ndarray:
    Q = _check_input(Q, params.spec.feature_dim, "features")
    return mlp_forward(Q, params.dom)[0]


def predict_domain(Q: np.ndarray, params: ModelParams) -> np.ndarray:
    return softmax_rows(domain_logits(Q, params))


def predict(X: np.ndarray, params: ModelParams) -> np.ndarray:
    return predict_label(feature_extract(X, params), params)


# --- phase-specific backward passes -------------------------------------------

def backward_task(
    X: np.ndarray,
    y: np.ndarray,
    params: ModelParams,
    prox_anchor: Optional[ModelParams] = None,
    mu: float = 0.0,
    loss: str = "mse",
) -> tuple[float, Gradients]:
    """Task loss plus ``mu`` times the proximal term; gradients for repr and pred only."""
    X = _check_input(X, params.spec.input_dim, "inputs")
    y = np.asarray(y, dtype=np.float64).reshape(-1)
    if y.shape[0] != X.shape[0]:
        raise DimensionError(f"{X.shape[0]} input rows vs {y.shape[0]} targets")
    Q, repr_cache = mlp_forward(X, params.repr)
    out, pred_cache = mlp_forward(Q, params.pred)
    scale = params.spec.target_scale
    y_hat = params.spec.target_offset + scale * out[:, 0]

    value = losses.task_loss(y, y_hat) if loss == "mse" else losses.task_loss_mae(y, y_hat)
    d_out = (scale * losses.task_loss_grad(y, y_hat, loss))[:, None]
    g_pred, d_q = mlp_backward(pred_cache, params.pred, d_out)
    g_repr, _ = mlp_backward(repr_cache, params.repr, d_q)

    if prox_anchor is not None and mu > 0.0:
        value += mu * losses.prox_loss(prox_anchor, params)
        g_repr = g_repr + 2.0 * mu * (params.repr.values - prox_anchor.repr.values)
        g_pred = g_pred + 2.0 * mu * (params.pred.values - prox_anchor.pred.values)
    return value, Gradients(repr=g_repr, pred=g_pred)


def backward_domain(Qmix: np.ndarray, d: np.ndarray, params: ModelParams, alpha: float = 1.0) -> tuple[float, Gradients]:
    """``alpha`` times the domain cross-entropy on a feature batch; gradient for dom only."""
    Qmix = _check_input(Qmix, params.spec.feature_dim, "features")
    logits, cache = mlp_forward(Qmix, params.dom)
    p = softmax_rows(logits)
    value = alpha * losses.domain_loss(p, d)
    g_dom, _ = mlp_backward(cache, params.dom, alpha * losses.domain_loss_grad_logits(p, d))
    return value, Gradients(dom=g_dom)


def backward_confusion(X: np.ndarray, params: ModelParams, beta: float = 1.0) -> tuple[float, Gradients]:
    """``beta`` times the confusion loss; gradient for repr only, domain head held fixed."""
    X = _check_input(X, params.spec.input_dim, "inputs")
    Q, repr_cache = mlp_forward(X, params.repr)
    logits, dom_cache = mlp_forward(Q, params.dom)
    p = softmax_rows(logits)
    value = beta * losses.confusion_loss(p)
    _, d_q = mlp_backward(dom_cache, params.dom, beta * losses.confusion_loss_grad_logits(p))
    g_repr, _ = mlp_backward(repr_cache, params.repr, d_q)
    return value, Gradients(repr=g_repr)
