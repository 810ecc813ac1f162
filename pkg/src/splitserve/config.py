"""Model configuration and the addressing scheme for frozen affine layers."""

from __future__ import annotations

from dataclasses import dataclass
from enum import IntEnum

from .errors import ConfigError


class Role(IntEnum):
    Q = 0
    K = 1
    V = 2
    O = 3
    FF_UP = 4
    FF_DOWN = 5
    LM_HEAD = 6


BLOCK_ROLES = (Role.Q, Role.K, Role.V, Role.O, Role.FF_UP, Role.FF_DOWN)

# IA3 rescales the outputs of exactly these layers.
IA3_ROLES = frozenset({Role.K, Role.V, Role.FF_UP})


@dataclass(frozen=True, order=True)
class LayerAddress:
    """Identifies one frozen affine layer.  LM_HEAD lives at the sentinel
    block index n_layers."""

    block: int
    role: Role


@dataclass(frozen=True)
class ModelConfig:
    n_layers: int
    d_model: int
    n_heads: int
    d_ff: int
    vocab_size: int
    max_seq: int
    seed: int = 0

    def __post_init__(self):
        for name in ("n_layers", "d_model", "n_heads", "d_ff", "vocab_size", "max_seq"):
            if getattr(self, name) <= 0:
                raise ConfigError(f"{name} must be positive, got {getattr(self, name)}")
        if self.d_model % self.n_heads != 0:
            raise ConfigError(
                f"d_model={self.d_model} not divisible by n_heads={self.n_heads}")

    @property
    def d_head(self) -> int:
        return self.d_model // self.n_heads


def layer_dims(config: ModelConfig, role: Role) -> tuple[int, int]:
    """(d_in, d_out) of the affine layer for a role."""
    d = config.d_model
    if role in (Role.Q, Role.K, Role.V, Role.O):
        return d, d
    if role == Role.FF_UP:
        return d, config.d_ff
    if role == Role.FF_DOWN:
        return config.d_ff, d
    if role == Role.LM_HEAD:
        return d, config.vocab_size
    raise ConfigError(f"unknown role {role!r}")


def base_addresses(config: ModelConfig) -> list[LayerAddress]:
    """All frozen layer addresses, in canonical order."""
    addrs = [LayerAddress(b, r) for b in range(config.n_layers) for r in BLOCK_ROLES]
    addrs.append(LayerAddress(config.n_layers, Role.LM_HEAD))
    return addrs


def validate_address(config: ModelConfig, addr: LayerAddress) -> None:
    if addr.role == Role.LM_HEAD:
        if addr.block != config.n_layers:
            raise ConfigError(f"LM_HEAD requires block={config.n_layers}, got {addr.block}")
    elif not 0 <= addr.block < config.n_layers:
        raise ConfigError(f"block {addr.block} out of range [0, {config.n_layers})")


def max_layer_width(config: ModelConfig) -> int:
    """Largest of any base layer's input/output dimension; sizes the
    preallocated per-client shared buffer."""
    return max(max(layer_dims(config, r)) for r in Role)
