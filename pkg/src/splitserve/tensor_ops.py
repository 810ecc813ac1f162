"""Dense float32 kernels with deterministic, row-independent accumulation.

Every higher module computes through these functions.  The load-bearing
property is that matmul output rows depend only on the matching input rows,
bitwise: concatenating requests from different clients along the token
dimension and splitting the result back is indistinguishable from running
each request alone.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ShapeMismatchError

DTYPE = np.float32
NORM_EPS = 1e-6


def tensor(data, dtype=DTYPE) -> np.ndarray:
    return np.asarray(data, dtype=dtype)


def matmul(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """a [m,k] @ b [k,n] -> [m,n] with a fixed per-entry accumulation order.

    optimize=False pins einsum to its naive C loop (no BLAS dispatch), so
    out[i, :] is a pure function of a[i, :] and b regardless of m.
    """
    if a.ndim != 2 or b.ndim != 2:
        raise ShapeMismatchError(f"matmul expects 2-d operands, got {a.shape} @ {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise ShapeMismatchError(f"matmul inner dimensions disagree: {a.shape} @ {b.shape}")
    return np.einsum("ik,kj->ij", a, b, optimize=False)


@dataclass
class AffineParams:
    """One frozen affine layer: y = x @ weight (+ bias).

    Covers both nn.Linear-style layers and the transposed-weight 1-d
    convolution used by GPT-style models; after transposition both are the
    same map, so one type and one backward rule serve both.
    """

    weight: np.ndarray            # [d_in, d_out]
    bias: np.ndarray | None = None  # [d_out]

    def __post_init__(self):
        if self.weight.ndim != 2:
            raise ShapeMismatchError(f"weight must be 2-d, got shape {self.weight.shape}")
        if self.bias is not None and self.bias.shape != (self.weight.shape[1],):
            raise ShapeMismatchError(
                f"bias shape {self.bias.shape} does not match d_out={self.weight.shape[1]}")

    @property
    def d_in(self) -> int:
        return self.weight.shape[0]

    @property
    def d_out(self) -> int:
        return self.weight.shape[1]

    @property
    def nbytes(self) -> int:
        return self.weight.nbytes + (0 if self.bias is None else self.bias.nbytes)


def affine_forward(x: np.ndarray, p: AffineParams) -> np.ndarray:
    """x [t, d_in] -> [t, d_out]; broadcast bias when present."""
    if x.ndim != 2 or x.shape[1] != p.d_in:
        raise ShapeMismatchError(f"affine_forward: input {x.shape} vs weight {p.weight.shape}")
    y = matmul(x, p.weight)
    if p.bias is not None:
        y = y + p.bias
    return y


def affine_backward_input(grad_y: np.ndarray, p: AffineParams) -> np.ndarray:
    """grad_y [t, d_out] -> grad_x [t, d_in] = grad_y @ weight.T.

    Needs only the frozen weights, never the forward activations.
    """
    if grad_y.ndim != 2 or grad_y.shape[1] != p.d_out:
        raise ShapeMismatchError(
            f"affine_backward_input: grad {grad_y.shape} vs weight {p.weight.shape}")
    return matmul(grad_y, p.weight.T)


def softmax_rows(x: np.ndarray) -> np.ndarray:
    """Row-wise softmax with per-row max subtraction for stability."""
    shifted = x - x.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=-1, keepdims=True)


def rmsnorm(x: np.ndarray, gain: np.ndarray, eps: float = NORM_EPS) -> np.ndarray:
    """Per row: x / sqrt(mean(x^2) + eps) * gain."""
    ms = np.mean(x * x, axis=-1, keepdims=True)
    return x / np.sqrt(ms + eps) * gain


def rmsnorm_backward(grad_y: np.ndarray, x: np.ndarray, gain: np.ndarray,
                     eps: float = NORM_EPS) -> np.ndarray:
    """Gradient w.r.t. x of rmsnorm (gains are frozen, no gain grad needed)."""
    d = x.shape[-1]
    ms = np.mean(x * x, axis=-1, keepdims=True)
    r = np.sqrt(ms + eps)
    gg = grad_y * gain
    dot = np.sum(gg * x, axis=-1, keepdims=True)
    return gg / r - x * dot / (d * r * r * r)


def silu(x: np.ndarray) -> np.ndarray:
    """x * sigmoid(x), elementwise."""
    return x / (1.0 + np.exp(-x))


def silu_backward(grad_y: np.ndarray, x: np.ndarray) -> np.ndarray:
    s = 1.0 / (1.0 + np.exp(-x))
    return grad_y * (s * (1.0 + x * (1.0 - s)))


def cross_entropy(logits: np.ndarray, targets: np.ndarray):
    """Mean negative log-softmax of targets over [t, vocab] logits.

    Returns (loss, grad_logits); grad already includes the 1/t factor.
    """
    t, vocab = logits.shape
    targets = np.asarray(targets)
    if targets.min(initial=0) < 0 or targets.max(initial=-1) >= vocab:
        raise IndexError(f"target out of range [0, {vocab})")
    shifted = logits - logits.max(axis=1, keepdims=True)
    logsumexp = np.log(np.sum(np.exp(shifted), axis=1))
    picked = shifted[np.arange(t), targets]
    loss = float(np.mean(logsumexp - picked))
    grad = softmax_rows(logits)
    grad[np.arange(t), targets] -= 1.0
    grad = (grad / t).astype(logits.dtype)
    return loss, grad


def concat_rows(parts: list[np.ndarray]) -> np.ndarray:
    return np.concatenate(parts, axis=0)


def split_rows(x: np.ndarray, counts: list[int]) -> list[np.ndarray]:
    out, pos = [], 0
    for c in counts:
        out.append(x[pos:pos + c])
        pos += c
    if pos != x.shape[0]:
        raise ShapeMismatchError(f"split_rows: counts sum {pos} != rows {x.shape[0]}")
    return out
