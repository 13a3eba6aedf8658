"""Dense float32 kernels with hand-derived gradients.

Three differentiable primitives (affine, ReLU, softmax cross-entropy)
plus the uniform fan-in initializer. Parameters and activations are
32-bit floats throughout; test oracles re-derive everything in 64-bit.

Matrix products delegate to numpy's BLAS. Callers that need a pinned
thread count (training-time benchmarks) wrap their loop in
``threadpoolctl.threadpool_limits``; results are deterministic for a
fixed thread count.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ShapeError, ValidationError
from .seeding import Rng, make_rng

__all__ = [
    "AffineParams",
    "Rng",
    "make_rng",
    "affine_forward",
    "affine_backward",
    "relu_forward",
    "relu_backward",
    "softmax_cross_entropy",
    "init_uniform",
]


def as_matrix(x, name: str = "x") -> np.ndarray:
    """Coerce to a contiguous 2-D float32 array."""
    arr = np.asarray(x, dtype=np.float32)
    if arr.ndim != 2:
        raise ShapeError(f"{name} must be 2-D, got shape {arr.shape}", actual=arr.shape)
    return np.ascontiguousarray(arr)


@dataclass
class AffineParams:
    """One dense layer: weights, bias, and matching grad/velocity buffers.

    Gradient and velocity buffers always mirror the parameter shapes;
    velocities are all-zero at construction.
    """

    weight: np.ndarray  # (fan_in, fan_out)
    bias: np.ndarray  # (fan_out,)

    def __post_init__(self):
        self.weight = as_matrix(self.weight, "weight")
        self.bias = np.ascontiguousarray(np.asarray(self.bias, dtype=np.float32))
        if self.bias.ndim != 1 or self.bias.shape[0] != self.weight.shape[1]:
            raise ShapeError(
                f"bias shape {self.bias.shape} does not match weight {self.weight.shape}",
                expected=(self.weight.shape[1],),
                actual=self.bias.shape,
            )
        self.grad_weight = np.zeros_like(self.weight)
        self.grad_bias = np.zeros_like(self.bias)
        self.vel_weight = np.zeros_like(self.weight)
        self.vel_bias = np.zeros_like(self.bias)

    @property
    def fan_in(self) -> int:
        return self.weight.shape[0]

    @property
    def fan_out(self) -> int:
        return self.weight.shape[1]

    @property
    def n_params(self) -> int:
        return self.weight.size + self.bias.size

    def zero_grads(self) -> None:
        self.grad_weight.fill(0.0)
        self.grad_bias.fill(0.0)

    def clone(self) -> "AffineParams":
        """Fresh parameters with the same values and zeroed buffers."""
        return AffineParams(self.weight.copy(), self.bias.copy())


def affine_forward(x, params: AffineParams) -> np.ndarray:
    """out[i, j] = sum_k x[i, k] * W[k, j] + b[j]"""
    x = as_matrix(x)
    if x.shape[1] != params.fan_in:
        raise ShapeError(
            f"affine_forward: input {x.shape} incompatible with weights "
            f"{params.weight.shape}",
            expected=(x.shape[0], params.fan_in),
            actual=x.shape,
        )
    return x @ params.weight + params.bias


def affine_backward(
    x, params: AffineParams, d_out, *, need_dx: bool = True
) -> np.ndarray | None:
    """Write grad_weight = x^T d_out and grad_bias = column sums of d_out;
    return dX = d_out W^T (skipped when ``need_dx`` is false, e.g. for the
    first layer of a head whose input gradient is never used)."""
    x = as_matrix(x)
    d_out = as_matrix(d_out, "d_out")
    if x.shape[1] != params.fan_in or d_out.shape[1] != params.fan_out:
        raise ShapeError(
            f"affine_backward: x {x.shape}, d_out {d_out.shape} incompatible "
            f"with weights {params.weight.shape}",
            expected=params.weight.shape,
            actual=(x.shape[1], d_out.shape[1]),
        )
    if x.shape[0] != d_out.shape[0]:
        raise ShapeError(
            f"affine_backward: batch mismatch x {x.shape} vs d_out {d_out.shape}",
            expected=x.shape[0],
            actual=d_out.shape[0],
        )
    np.matmul(x.T, d_out, out=params.grad_weight)
    np.sum(d_out, axis=0, out=params.grad_bias)
    if not need_dx:
        return None
    return d_out @ params.weight.T


def relu_forward(x) -> tuple[np.ndarray, np.ndarray]:
    """Elementwise max(x, 0) plus the strict x > 0 mask for backward."""
    x = as_matrix(x)
    mask = x > 0
    return np.where(mask, x, np.float32(0.0)), mask


def relu_backward(d_out, mask: np.ndarray) -> np.ndarray:
    d_out = as_matrix(d_out, "d_out")
    if d_out.shape != mask.shape:
        raise ShapeError(
            f"relu_backward: d_out {d_out.shape} vs mask {mask.shape}",
            expected=mask.shape,
            actual=d_out.shape,
        )
    return np.where(mask, d_out, np.float32(0.0))


def softmax_cross_entropy(logits, labels) -> tuple[float, np.ndarray]:
    """Mean negative log softmax likelihood and its gradient.

    Row maxima are subtracted before exponentiation so huge logits do not
    overflow. Returns (loss, dLogits) with dLogits = (softmax - onehot) / B.
    """
    logits = as_matrix(logits, "logits")
    b, c = logits.shape
    if b < 1:
        raise ValidationError("softmax_cross_entropy: empty batch")
    labels = np.asarray(labels)
    if labels.ndim != 1 or labels.shape[0] != b:
        raise ShapeError(
            f"labels shape {labels.shape} does not match batch {b}",
            expected=(b,),
            actual=labels.shape,
        )
    if not np.issubdtype(labels.dtype, np.integer):
        raise ValidationError(f"labels must be integers, got dtype {labels.dtype}")
    if labels.min() < 0 or labels.max() >= c:
        raise ValidationError(
            f"labels must lie in [0, {c}), got range "
            f"[{labels.min()}, {labels.max()}]"
        )
    shifted = logits - logits.max(axis=1, keepdims=True)
    exp = np.exp(shifted)
    norm = exp.sum(axis=1, keepdims=True)
    rows = np.arange(b)
    log_probs = shifted[rows, labels] - np.log(norm[:, 0])
    loss = float(-log_probs.mean(dtype=np.float64))
    d_logits = exp / norm
    d_logits[rows, labels] -= 1.0
    d_logits /= b
    return loss, d_logits


def init_uniform(fan_in: int, fan_out: int, rng: Rng) -> AffineParams:
    """Weights and bias drawn i.i.d. from U(-sqrt(k), sqrt(k)), k = 1/fan_in."""
    if fan_in < 1:
        raise ValidationError(f"init_uniform: fan_in must be >= 1, got {fan_in}")
    if fan_out < 1:
        raise ValidationError(f"init_uniform: fan_out must be >= 1, got {fan_out}")
    bound = float(np.float32(np.sqrt(1.0 / fan_in)))
    weight = rng.uniform(-bound, bound, size=(fan_in, fan_out)).astype(np.float32)
    bias = rng.uniform(-bound, bound, size=fan_out).astype(np.float32)
    return AffineParams(weight, bias)
