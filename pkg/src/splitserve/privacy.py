"""Activation blinding for clients that do not trust the layer service.

Before a forward request, the client adds a precomputed noise matrix to the
activations; the executor's bias-nullified path has already told the client
what that noise does to the layer output, so the reply can be de-noised
exactly: y = (W(x + n) + b) - Wn.  Only affine layers live on the executor,
so the subtraction is exact up to float accumulation error, and with zero
noise the blinded path is bitwise identical to the plain one.

Gradients sent during backward are not blinded; the scheme covers forward
activations only.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .config import LayerAddress, ModelConfig, base_addresses, layer_dims
from .errors import ConfigError, ProtocolError
from .protocol import PASS_NOISE_EFFECT

DEFAULT_NOISE_SCALE = 1.0


@dataclass
class PrivacyConfig:
    enabled: bool = False
    k: int = 2                      # noise matrices per layer
    scale: float = DEFAULT_NOISE_SCALE  # elementwise uniform in [-scale, scale]
    seed: int = 0


def rotate(seed: int, addr: LayerAddress, iteration: int, k: int) -> int:
    """Deterministic per-(layer, iteration) noise index in [0, k).

    Distinct layers may land on distinct indices within one iteration, so an
    observer cannot assume one noise value per pass.
    """
    if k < 1:
        raise ConfigError(f"noise set size must be >= 1, got {k}")
    rng = np.random.default_rng([seed, addr.block, int(addr.role), iteration])
    return int(rng.integers(k))


@dataclass
class NoiseSet:
    """Per-layer noise matrices and their precomputed output effects."""

    seed: int
    k: int
    t_max: int
    noises: dict[LayerAddress, list[np.ndarray]] = field(default_factory=dict)
    effects: dict[LayerAddress, list[np.ndarray]] = field(default_factory=dict)

    def pick(self, addr: LayerAddress, iteration: int) -> int:
        return rotate(self.seed, addr, iteration, self.k)

    def blind(self, addr: LayerAddress, x: np.ndarray, iteration: int) -> tuple[np.ndarray, int]:
        t = x.shape[0]
        if t > self.t_max:
            raise ConfigError(
                f"token count {t} exceeds noise row budget t_max={self.t_max}")
        i = self.pick(addr, iteration)
        return x + self.noises[addr][i][:t], i

    def unblind(self, addr: LayerAddress, y_noisy: np.ndarray, index: int) -> np.ndarray:
        t = y_noisy.shape[0]
        return y_noisy - self.effects[addr][index][:t]


def draw_noise(seed: int, addr: LayerAddress, index: int, t_max: int,
               d_in: int, scale: float) -> np.ndarray:
    rng = np.random.default_rng([seed, addr.block, int(addr.role), index, 7])
    return rng.uniform(-scale, scale, size=(t_max, d_in)).astype(np.float32)


def precompute_noise(channel, config: ModelConfig, k: int, scale: float,
                     seed: int, t_max: int,
                     layers: list[LayerAddress] | None = None) -> NoiseSet:
    """Draw k noises per layer and ask the executor for their bias-free
    effects, once each, ahead of serving.

    Every effect is fetched twice and the two replies compared; a service
    returning inconsistent noise effects is rejected outright.
    """
    if k < 2:
        raise ConfigError(f"need at least 2 noise values per layer, got {k}")
    addrs = layers if layers is not None else base_addresses(config)
    ns = NoiseSet(seed=seed, k=k, t_max=t_max)
    for addr in addrs:
        d_in, _ = layer_dims(config, addr.role)
        ns.noises[addr] = []
        ns.effects[addr] = []
        for j in range(k):
            n = draw_noise(seed, addr, j, t_max, d_in, scale)
            eff = channel.request(addr.block, int(addr.role), PASS_NOISE_EFFECT, n)
            eff = np.array(eff, copy=True)
            check = channel.request(addr.block, int(addr.role), PASS_NOISE_EFFECT, n)
            if not np.allclose(eff, check, atol=1e-5):
                raise ProtocolError(
                    f"noise effect for {addr} not reproducible across requests")
            ns.noises[addr].append(n)
            ns.effects[addr].append(eff)
    return ns
