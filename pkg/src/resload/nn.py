"""Dense-layer numerics: activations, affine forward/backward, inverted
dropout, Adam, and a finite-difference gradient checker.

Everything runs in float64. Layers accept a single vector or a (batch, width)
array; gradients are exact reverse-mode derivatives of the forward pass.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np

SELU_LAMBDA = 1.0577
SELU_ALPHA = 1.6733

ACTIVATIONS = ("relu", "prelu", "selu", "identity")


class ShapeError(ValueError):
    """Array widths do not match the layer or cache they are used with."""


def _check_slopes(kind: str, slopes) -> None:
    if kind == "prelu":
        if slopes is None:
            raise ValueError("prelu requires a slope parameter")
    elif slopes is not None:
        raise ValueError(f"{kind} takes no slope parameter")


def activate(kind: str, y, slopes=None):
    """Apply an activation elementwise; `slopes` only with kind='prelu'."""
    _check_slopes(kind, slopes)
    y = np.asarray(y, dtype=np.float64)
    if kind == "relu":
        out = np.maximum(y, 0.0)
    elif kind == "prelu":
        out = np.where(y > 0.0, y, slopes * y)
    elif kind == "selu":
        # negative branch lambda*alpha*(e^y - 1); saturates at -lambda*alpha
        out = SELU_LAMBDA * np.where(y > 0.0, y, SELU_ALPHA * np.expm1(y))
    elif kind == "identity":
        out = y + 0.0
    else:
        raise ValueError(f"unknown activation {kind!r}")
    return float(out) if out.ndim == 0 else out


def activation_grad(kind: str, z, slopes=None):
    """d activation / d preactivation, elementwise at z."""
    _check_slopes(kind, slopes)
    z = np.asarray(z, dtype=np.float64)
    if kind == "relu":
        return (z > 0.0).astype(np.float64)
    if kind == "prelu":
        return np.where(z > 0.0, 1.0, slopes * np.ones_like(z))
    if kind == "selu":
        return SELU_LAMBDA * np.where(z > 0.0, 1.0, SELU_ALPHA * np.exp(np.minimum(z, 0.0)))
    if kind == "identity":
        return np.ones_like(z)
    raise ValueError(f"unknown activation {kind!r}")


@dataclass
class DenseLayer:
    """Affine map plus activation: out = act(weights @ x + biases)."""

    weights: np.ndarray  # (out_width, in_width)
    biases: np.ndarray   # (out_width,)
    activation: str = "selu"
    prelu_slopes: Optional[np.ndarray] = None

    def __post_init__(self):
        self.weights = np.ascontiguousarray(self.weights, dtype=np.float64)
        self.biases = np.ascontiguousarray(self.biases, dtype=np.float64)
        if self.weights.ndim != 2 or self.biases.shape != (self.weights.shape[0],):
            raise ShapeError("weights must be (out, in) with matching biases")
        if self.activation not in ACTIVATIONS:
            raise ValueError(f"unknown activation {self.activation!r}")
        if self.activation == "prelu":
            if self.prelu_slopes is None:
                raise ValueError("prelu layer needs slopes")
            self.prelu_slopes = np.ascontiguousarray(self.prelu_slopes, dtype=np.float64)
            if self.prelu_slopes.shape != (self.out_width,):
                raise ShapeError("prelu slopes must match out_width")
        elif self.prelu_slopes is not None:
            raise ValueError(f"{self.activation} layer takes no slopes")

    @property
    def in_width(self) -> int:
        return self.weights.shape[1]

    @property
    def out_width(self) -> int:
        return self.weights.shape[0]

    @classmethod
    def init(cls, in_width: int, out_width: int, activation: str = "selu", rng=None) -> "DenseLayer":
        """Zero-mean Gaussian weights with variance 1/fan_in; zero biases."""
        rng = np.random.default_rng(0) if rng is None else rng
        w = rng.normal(0.0, 1.0 / np.sqrt(in_width), size=(out_width, in_width))
        slopes = np.full(out_width, 0.25) if activation == "prelu" else None
        return cls(w, np.zeros(out_width), activation, slopes)


@dataclass
class ForwardCache:
    x: np.ndarray  # layer input as seen by the forward pass
    z: np.ndarray  # preactivation


@dataclass
class LayerGrads:
    weights: np.ndarray
    biases: np.ndarray
    prelu_slopes: Optional[np.ndarray] = None


def dense_forward(layer: DenseLayer, x) -> tuple[np.ndarray, ForwardCache]:
    x = np.asarray(x, dtype=np.float64)
    if x.ndim not in (1, 2) or x.shape[-1] != layer.in_width:
        raise ShapeError(f"input width {x.shape} does not match layer in_width {layer.in_width}")
    z = x @ layer.weights.T + layer.biases
    out = activate(layer.activation, z, layer.prelu_slopes)
    return out, ForwardCache(x, z)


def dense_backward(layer: DenseLayer, cache: ForwardCache, upstream) -> tuple[np.ndarray, LayerGrads]:
    """Gradients w.r.t. the layer input and parameters given d loss/d out."""
    upstream = np.asarray(upstream, dtype=np.float64)
    if cache.x.shape[-1] != layer.in_width or cache.z.shape[-1] != layer.out_width:
        raise ShapeError("stale or mismatched forward cache")
    if upstream.shape != cache.z.shape:
        raise ShapeError(f"upstream shape {upstream.shape} does not match cache {cache.z.shape}")
    dz = upstream * activation_grad(layer.activation, cache.z, layer.prelu_slopes)
    dslopes = None
    if layer.activation == "prelu":
        contrib = upstream * np.where(cache.z > 0.0, 0.0, cache.z)
        dslopes = contrib if cache.z.ndim == 1 else contrib.sum(axis=0)
    if cache.z.ndim == 1:
        dw = np.outer(dz, cache.x)
        db = dz.copy()
        dx = layer.weights.T @ dz
    else:
        dw = dz.T @ cache.x
        db = dz.sum(axis=0)
        dx = dz @ layer.weights
    return dx, LayerGrads(dw, db, dslopes)


# --- dropout ------------------------------------------------------------------

@dataclass(frozen=True)
class DropoutSpec:
    """Inverted dropout: zero units with probability p, scale the rest by
    1/(1-p) so the expectation is unchanged."""

    p: float
    rng_seed: int = 0

    def __post_init__(self):
        if not 0.0 <= self.p < 1.0:
            raise ValueError(f"dropout p must be in [0, 1), got {self.p}")


def dropout_mask(p: float, shape, rng) -> np.ndarray:
    return rng.random(shape) >= p


def dropout_apply(spec: DropoutSpec, x, training: bool = True, rng=None):
    """Returns (out, mask). training=False (plain inference) passes x through;
    MC sampling runs with training=True. Without an explicit rng, the mask is
    derived from spec.rng_seed, so repeated calls are identical.
    """
    x = np.asarray(x, dtype=np.float64)
    if not training or spec.p == 0.0:
        return x.copy(), np.ones(x.shape, dtype=bool)
    if rng is None:
        rng = np.random.default_rng(spec.rng_seed)
    mask = dropout_mask(spec.p, x.shape, rng)
    return x * mask / (1.0 - spec.p), mask


# --- Adam ----------------------------------------------------------------------

@dataclass
class AdamState:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8
    step_count: int = 0
    first_moment: dict = field(default_factory=dict)
    second_moment: dict = field(default_factory=dict)


def adam_step(state: AdamState, params: dict, grads: dict) -> tuple[dict, AdamState]:
    """One bias-corrected Adam update, in place on the param arrays."""
    if set(params) != set(grads):
        raise ShapeError("params and grads must share the same keys")
    state.step_count += 1
    t = state.step_count
    c1 = 1.0 - state.beta1 ** t
    c2 = 1.0 - state.beta2 ** t
    for key, p in params.items():
        g = np.asarray(grads[key], dtype=np.float64)
        if g.shape != p.shape:
            raise ShapeError(f"grad shape {g.shape} != param shape {p.shape} for {key!r}")
        m = state.first_moment.get(key)
        v = state.second_moment.get(key)
        if m is None:
            m = np.zeros_like(p)
            v = np.zeros_like(p)
        m = state.beta1 * m + (1.0 - state.beta1) * g
        v = state.beta2 * v + (1.0 - state.beta2) * (g * g)
        state.first_moment[key] = m
        state.second_moment[key] = v
        p -= state.lr * (m / c1) / (np.sqrt(v / c2) + state.epsilon)
    return params, state


# --- gradient checking ----------------------------------------------------------

def gradient_check(
    loss_fn: Callable[[], float],
    params: dict,
    analytic_grads: dict,
    eps: float = 1e-6,
    denom_floor: float = 1e-3,
) -> float:
    """Worst relative disagreement between analytic gradients and central
    finite differences.

    loss_fn() must recompute the scalar loss from the live `params` arrays and
    be deterministic (dropout off); nondeterminism raises RuntimeError. The
    relative error denominator is floored at denom_floor so that ~1e-8 of
    finite-difference rounding noise on near-zero gradients cannot dominate
    the report.
    """
    l0 = float(loss_fn())
    if l0 != float(loss_fn()):
        raise RuntimeError("loss function is not deterministic; disable dropout/sampling")
    worst = 0.0
    for key, arr in params.items():
        if key not in analytic_grads:
            raise ShapeError(f"missing analytic gradient for {key!r}")
        gflat = np.asarray(analytic_grads[key], dtype=np.float64).reshape(-1)
        flat = arr.reshape(-1)  # view: perturbations hit the live parameters
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + eps
            lp = float(loss_fn())
            flat[i] = orig - eps
            lm = float(loss_fn())
            flat[i] = orig
            fd = (lp - lm) / (2.0 * eps)
            a = gflat[i]
            rel = abs(a - fd) / max(abs(a), abs(fd), denom_floor)
            if rel > worst:
                worst = rel
    return worst
