"""Small differentiable classifiers with an explicit latent layer.

Two architectures:

* ``linear`` -- a single affine layer; the latent map is the identity,
  ``z(x) = x``.
* ``mlp1`` -- one rectified hidden layer; ``z(x) = relu(W1 x + b1)`` followed
  by an affine output layer.

All gradients are closed-form.  The loss is softmax cross-entropy computed
through log-sum-exp, so it stays finite for logit magnitudes far beyond 1e3.

Gradient semantics for perturbed latents: when the caller evaluates the loss
at some ``z'`` other than ``z(x)``, the parameter gradient treats ``z'`` as a
constant input to the output layer, so hidden-layer parameters receive no
gradient.  Passing ``backprop_through_feature=True`` adds the hidden-layer
gradient obtained by routing the latent gradient at ``z'`` through the
unperturbed forward pass at ``x`` (useful for ablations).  When ``z'`` equals
``z(x)`` exactly the result is ordinary backpropagation either way.
"""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np

from .errors import ParameterError

LINEAR = "linear"
MLP1 = "mlp1"
DEFAULT_HIDDEN_WIDTH = 32


@dataclass(frozen=True)
class ModelParams:
    """Immutable parameter bundle; ``w_hidden is None`` marks the linear model."""

    w_out: np.ndarray
    b_out: np.ndarray
    w_hidden: np.ndarray | None = None
    b_hidden: np.ndarray | None = None

    @property
    def architecture(self) -> str:
        return LINEAR if self.w_hidden is None else MLP1

    @property
    def num_classes(self) -> int:
        return self.w_out.shape[0]

    @property
    def latent_dim(self) -> int:
        return self.w_out.shape[1]

    @property
    def input_dim(self) -> int:
        return self.latent_dim if self.w_hidden is None else self.w_hidden.shape[1]


@dataclass(frozen=True)
class ParamGrads:
    w_out: np.ndarray
    b_out: np.ndarray
    w_hidden: np.ndarray | None = None
    b_hidden: np.ndarray | None = None


@dataclass
class ForwardRecord:
    z: np.ndarray
    logits: np.ndarray
    loss: float | np.ndarray
    grad_z: np.ndarray | None = None
    grad_theta: ParamGrads | None = None


@dataclass(frozen=True)
class ModelSpec:
    """How to build a fresh model; used by experiment configs."""

    architecture: str = LINEAR
    hidden_width: int = DEFAULT_HIDDEN_WIDTH

    def __post_init__(self):
        if self.architecture not in (LINEAR, MLP1):
            raise ParameterError(f"unknown architecture {self.architecture!r}")
        if self.hidden_width < 1:
            raise ParameterError("hidden_width must be positive")


def _uniform_fan_in(rng, shape, fan_in):
    bound = 1.0 / np.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=shape)


def init_params(spec: ModelSpec, input_dim: int, num_classes: int, seed: int = 0) -> ModelParams:
    """Seeded uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)) initialization."""
    rng = np.random.default_rng(seed)
    if spec.architecture == LINEAR:
        return ModelParams(
            w_out=_uniform_fan_in(rng, (num_classes, input_dim), input_dim),
            b_out=_uniform_fan_in(rng, (num_classes,), input_dim),
        )
    h = spec.hidden_width
    return ModelParams(
        w_out=_uniform_fan_in(rng, (num_classes, h), h),
        b_out=_uniform_fan_in(rng, (num_classes,), h),
        w_hidden=_uniform_fan_in(rng, (h, input_dim), input_dim),
        b_hidden=_uniform_fan_in(rng, (h,), input_dim),
    )


def latent(theta: ModelParams, x: np.ndarray) -> np.ndarray:
    """The representation fed to the output layer; identity for linear models."""
    x = np.asarray(x, dtype=np.float64)
    if x.shape[-1] != theta.input_dim:
        raise ParameterError(f"expected input dim {theta.input_dim}, got {x.shape[-1]}")
    if theta.w_hidden is None:
        return x
    return np.maximum(0.0, x @ theta.w_hidden.T + theta.b_hidden)


def logits_from_latent(theta: ModelParams, z: np.ndarray) -> np.ndarray:
    z = np.asarray(z, dtype=np.float64)
    if z.shape[-1] != theta.latent_dim:
        raise ParameterError(f"expected latent dim {theta.latent_dim}, got {z.shape[-1]}")
    return z @ theta.w_out.T + theta.b_out


def log_softmax(logits: np.ndarray) -> np.ndarray:
    shifted = logits - logits.max(axis=-1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=-1, keepdims=True))


def softmax(logits: np.ndarray) -> np.ndarray:
    return np.exp(log_softmax(logits))


def cross_entropy(logits: np.ndarray, y) -> float | np.ndarray:
    """-log softmax(logits)[y]; scalar for a single example, vector for a batch."""
    ls = log_softmax(logits)
    if ls.ndim == 1:
        return float(-ls[int(y)])
    y = np.asarray(y, dtype=np.int64)
    return -ls[np.arange(ls.shape[0]), y]


def forward(theta: ModelParams, x: np.ndarray, y, with_grads: bool = False) -> ForwardRecord:
    """Full forward pass; gradients are filled in only on request."""
    z = latent(theta, x)
    logits = logits_from_latent(theta, z)
    loss = cross_entropy(logits, y)
    rec = ForwardRecord(z=z, logits=logits, loss=loss)
    if with_grads:
        rec.grad_z = grad_wrt_latent(theta, z, y)
        rec.grad_theta = grad_wrt_params(theta, z, x, y)
    return rec


def _dlogits(theta: ModelParams, z: np.ndarray, y) -> np.ndarray:
    """softmax(logits) - onehot(y), batched or single."""
    p = softmax(logits_from_latent(theta, z))
    if p.ndim == 1:
        p[int(y)] -= 1.0
        return p
    y = np.asarray(y, dtype=np.int64)
    p[np.arange(p.shape[0]), y] -= 1.0
    return p


def grad_wrt_latent(theta: ModelParams, z: np.ndarray, y) -> np.ndarray:
    """Exact gradient of the cross-entropy through the output layer at ``z``."""
    z = np.asarray(z, dtype=np.float64)
    return _dlogits(theta, z, y) @ theta.w_out


def grad_wrt_params(
    theta: ModelParams,
    z_prime: np.ndarray,
    x: np.ndarray,
    y,
    backprop_through_feature: bool = False,
) -> ParamGrads:
    """Gradient of the loss at ``z_prime`` with respect to the parameters.

    For batched inputs (2-D ``z_prime``/``x``) the batch-mean gradient is
    returned.  See the module docstring for the treatment of hidden-layer
    parameters when ``z_prime`` differs from ``z(x)``.
    """
    z_prime = np.asarray(z_prime, dtype=np.float64)
    x = np.asarray(x, dtype=np.float64)
    dlogits = _dlogits(theta, z_prime, y)

    if z_prime.ndim == 1:
        g_w_out = np.outer(dlogits, z_prime)
        g_b_out = dlogits
    else:
        batch = z_prime.shape[0]
        g_w_out = dlogits.T @ z_prime / batch
        g_b_out = dlogits.mean(axis=0)

    if theta.w_hidden is None:
        return ParamGrads(w_out=g_w_out, b_out=g_b_out)

    unperturbed = np.array_equal(z_prime, latent(theta, x))
    if not (unperturbed or backprop_through_feature):
        return ParamGrads(
            w_out=g_w_out, b_out=g_b_out,
            w_hidden=np.zeros_like(theta.w_hidden),
            b_hidden=np.zeros_like(theta.b_hidden),
        )

    pre = x @ theta.w_hidden.T + theta.b_hidden
    delta = (dlogits @ theta.w_out) * (pre > 0)
    if z_prime.ndim == 1:
        g_w_hidden = np.outer(delta, x)
        g_b_hidden = delta
    else:
        g_w_hidden = delta.T @ x / z_prime.shape[0]
        g_b_hidden = delta.mean(axis=0)
    return ParamGrads(w_out=g_w_out, b_out=g_b_out, w_hidden=g_w_hidden, b_hidden=g_b_hidden)


def sgd_step(theta: ModelParams, grads: ParamGrads, step: float) -> ModelParams:
    return ModelParams(
        w_out=theta.w_out - step * grads.w_out,
        b_out=theta.b_out - step * grads.b_out,
        w_hidden=None if theta.w_hidden is None else theta.w_hidden - step * grads.w_hidden,
        b_hidden=None if theta.b_hidden is None else theta.b_hidden - step * grads.b_hidden,
    )


def average_params(avg: ModelParams, new: ModelParams, count: int) -> ModelParams:
    """Running uniform average after ``count`` contributions including ``new``."""
    w = 1.0 / count
    return ModelParams(
        w_out=avg.w_out + w * (new.w_out - avg.w_out),
        b_out=avg.b_out + w * (new.b_out - avg.b_out),
        w_hidden=None if avg.w_hidden is None else avg.w_hidden + w * (new.w_hidden - avg.w_hidden),
        b_hidden=None if avg.b_hidden is None else avg.b_hidden + w * (new.b_hidden - avg.b_hidden),
    )


def flatten_params(theta: ModelParams) -> np.ndarray:
    parts = [theta.w_out.ravel(), theta.b_out.ravel()]
    if theta.w_hidden is not None:
        parts.extend([theta.w_hidden.ravel(), theta.b_hidden.ravel()])
    return np.concatenate(parts)


def unflatten_params(vec: np.ndarray, template: ModelParams) -> ModelParams:
    vec = np.asarray(vec, dtype=np.float64)
    pieces = {}
    offset = 0
    for name in ("w_out", "b_out", "w_hidden", "b_hidden"):
        arr = getattr(template, name)
        if arr is None:
            pieces[name] = None
            continue
        size = arr.size
        pieces[name] = vec[offset:offset + size].reshape(arr.shape)
        offset += size
    return ModelParams(**pieces)


def flatten_grads(grads: ParamGrads) -> np.ndarray:
    parts = [grads.w_out.ravel(), grads.b_out.ravel()]
    if grads.w_hidden is not None:
        parts.extend([grads.w_hidden.ravel(), grads.b_hidden.ravel()])
    return np.concatenate(parts)


def params_norm(theta: ModelParams) -> float:
    return float(np.linalg.norm(flatten_params(theta)))


def grads_finite(grads: ParamGrads) -> bool:
    return bool(np.all(np.isfinite(flatten_grads(grads))))


def params_equal(a: ModelParams, b: ModelParams) -> bool:
    if (a.w_hidden is None) != (b.w_hidden is None):
        return False
    same = np.array_equal(a.w_out, b.w_out) and np.array_equal(a.b_out, b.b_out)
    if a.w_hidden is not None:
        same = same and np.array_equal(a.w_hidden, b.w_hidden)
        same = same and np.array_equal(a.b_hidden, b.b_hidden)
    return same


def save_params(theta: ModelParams, path) -> None:
    """JSON checkpoint: architecture tag plus row-major weight lists."""
    payload = {
        "architecture": theta.architecture,
        "w_out": theta.w_out.tolist(),
        "b_out": theta.b_out.tolist(),
    }
    if theta.w_hidden is not None:
        payload["w_hidden"] = theta.w_hidden.tolist()
        payload["b_hidden"] = theta.b_hidden.tolist()
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(payload, fh)


def load_params(path) -> ModelParams:
    with open(path, "r", encoding="utf-8") as fh:
        payload = json.load(fh)
    kwargs = {
        "w_out": np.asarray(payload["w_out"], dtype=np.float64),
        "b_out": np.asarray(payload["b_out"], dtype=np.float64),
    }
    if payload["architecture"] == MLP1:
        kwargs["w_hidden"] = np.asarray(payload["w_hidden"], dtype=np.float64)
        kwargs["b_hidden"] = np.asarray(payload["b_hidden"], dtype=np.float64)
    return ModelParams(**kwargs)
