"""Client-owned trainable adapters (LoRA, IA3) and their optimizers.

Adapters add a small trainable correction on top of a frozen base layer's
output: LoRA a low-rank delta (alpha/r) * x @ A @ B, IA3 an elementwise
rescaling of the layer output.  Both start as exact no-ops (B = 0, scale = 1).
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .config import IA3_ROLES, LayerAddress, ModelConfig, Role, layer_dims
from .errors import ConfigError, ShapeMismatchError
from .tensor_ops import DTYPE, matmul


def lora_forward(x: np.ndarray, a: np.ndarray, b: np.ndarray,
                 alpha: float, rank: int) -> np.ndarray:
    """(alpha/rank) * x @ A @ B."""
    scale = np.asarray(alpha / rank, dtype=x.dtype)
    return matmul(matmul(x, a), b) * scale


def lora_backward(x_saved: np.ndarray, grad_y: np.ndarray, a: np.ndarray,
                  b: np.ndarray, alpha: float, rank: int):
    """Chain rule for the scaled two-matrix product.

    Returns (grad_a, grad_b, grad_x); x_saved must be the forward input.
    """
    if x_saved.shape[0] != grad_y.shape[0]:
        raise ShapeMismatchError(
            f"lora_backward: x {x_saved.shape} vs grad_y {grad_y.shape}")
    scale = np.asarray(alpha / rank, dtype=x_saved.dtype)
    xa = matmul(x_saved, a)                      # [t, r]
    gyb = matmul(grad_y, b.T)                    # [t, r]
    grad_b = matmul(xa.T, grad_y) * scale        # [r, d_out]
    grad_a = matmul(x_saved.T, gyb) * scale      # [d_in, r]
    grad_x = matmul(gyb, a.T) * scale            # [t, d_in]
    return grad_a, grad_b, grad_x


@dataclass
class AdapterState:
    """Trainable parameters of one client, plus optimizer moments.

    method "lora": per-target A [d_in, r] and B [r, d_out], B zero-initialized
    so the adapter contributes exactly nothing until trained.
    method "ia3": per-target scaling vector over the layer output (K, V and
    FF_UP only), ones-initialized so it starts as the identity.
    """

    method: str
    targets: frozenset[Role]
    rank: int = 0
    alpha: float = 0.0
    lora: dict[LayerAddress, tuple[np.ndarray, np.ndarray]] = field(default_factory=dict)
    ia3: dict[LayerAddress, np.ndarray] = field(default_factory=dict)
    moments: dict = field(default_factory=dict)

    @classmethod
    def init_lora(cls, config: ModelConfig, rank: int, alpha: float,
                  targets, seed: int) -> "AdapterState":
        targets = frozenset(Role(t) for t in targets)
        rng = np.random.default_rng(seed)
        state = cls(method="lora", targets=targets, rank=rank, alpha=alpha)
        for addr in _target_addresses(config, targets):
            d_in, d_out = layer_dims(config, addr.role)
            a = (rng.standard_normal((d_in, rank)) / np.sqrt(d_in)).astype(DTYPE)
            b = np.zeros((rank, d_out), dtype=DTYPE)
            state.lora[addr] = (a, b)
        return state

    @classmethod
    def init_ia3(cls, config: ModelConfig, targets, seed: int = 0) -> "AdapterState":
        targets = frozenset(Role(t) for t in targets)
        bad = targets - IA3_ROLES
        if bad:
            raise ConfigError(f"IA3 targets must be within {sorted(IA3_ROLES)}, got {sorted(bad)}")
        state = cls(method="ia3", targets=targets)
        for addr in _target_addresses(config, targets):
            _, d_out = layer_dims(config, addr.role)
            state.ia3[addr] = np.ones(d_out, dtype=DTYPE)
        return state

    def trainable(self):
        """Yields (key, array) for every trainable tensor, in a fixed order."""
        for addr in sorted(self.lora):
            a, b = self.lora[addr]
            yield (addr, "a"), a
            yield (addr, "b"), b
        for addr in sorted(self.ia3):
            yield (addr, "l"), self.ia3[addr]

    def set_param(self, key, value: np.ndarray) -> None:
        addr, part = key
        if part == "l":
            self.ia3[addr] = value
        else:
            a, b = self.lora[addr]
            self.lora[addr] = (value, b) if part == "a" else (a, value)

    def nbytes(self) -> int:
        total = sum(a.nbytes + b.nbytes for a, b in self.lora.values())
        total += sum(v.nbytes for v in self.ia3.values())
        return total

    def moment_bytes(self) -> int:
        total = 0
        for entry in self.moments.values():
            for arr in entry:
                if isinstance(arr, np.ndarray):
                    total += arr.nbytes
        return total


def _target_addresses(config: ModelConfig, targets: frozenset[Role]):
    for role in sorted(targets):
        if role == Role.LM_HEAD:
            yield LayerAddress(config.n_layers, role)
        else:
            for block in range(config.n_layers):
                yield LayerAddress(block, role)


def apply_adapter(adapter: AdapterState | None, addr: LayerAddress,
                  x: np.ndarray, y_base: np.ndarray) -> np.ndarray:
    """Combine a base layer's output with the client's adapter contribution.

    Applied identically by the monolithic reference and the split client so
    the two paths stay bit-compatible.
    """
    if adapter is None:
        return y_base
    pair = adapter.lora.get(addr)
    if pair is not None:
        a, b = pair
        y_base = y_base + lora_forward(x, a.astype(x.dtype, copy=False),
                                       b.astype(x.dtype, copy=False),
                                       adapter.alpha, adapter.rank)
    scale = adapter.ia3.get(addr)
    if scale is not None:
        y_base = y_base * scale.astype(x.dtype, copy=False)
    return y_base


class SGD:
    def __init__(self, lr: float):
        self.lr = lr

    def step(self, adapter: AdapterState, grads: dict) -> None:
        for key, param in adapter.trainable():
            g = grads.get(key)
            if g is not None:
                adapter.set_param(key, param - self.lr * g)


class Adam:
    def __init__(self, lr: float, beta1: float = 0.9, beta2: float = 0.999,
                 eps: float = 1e-8):
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.t = 0

    def step(self, adapter: AdapterState, grads: dict) -> None:
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        for key, param in adapter.trainable():
            g = grads.get(key)
            if g is None:
                continue
            m, v = adapter.moments.get(key, (np.zeros_like(param), np.zeros_like(param)))
            m = b1 * m + (1.0 - b1) * g
            v = b2 * v + (1.0 - b2) * g * g
            adapter.moments[key] = (m, v)
            m_hat = m / (1.0 - b1 ** self.t)
            v_hat = v / (1.0 - b2 ** self.t)
            adapter.set_param(key, param - self.lr * m_hat / (np.sqrt(v_hat) + self.eps))


def make_optimizer(name: str, lr: float):
    if name == "sgd":
        return SGD(lr)
    if name == "adam":
        return Adam(lr)
    raise ConfigError(f"unknown optimizer {name!r}")
