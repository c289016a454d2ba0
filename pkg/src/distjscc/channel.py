"""Independent complex AWGN channels, one per user."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .diffcore import Tensor, as_tensor

NOISELESS = math.inf


@dataclass(frozen=True)
class ChannelConfig:
    snr_db: float = 5.0
    P: float = 1.0
    seed: int = 0

    def __post_init__(self):
        if not self.P > 0:
            raise ValueError("power budget must be positive")


def noise_variance(cfg: ChannelConfig) -> float:
    """ε² = P / 10^(snr/10); zero for the noiseless sentinel."""
    if cfg.snr_db == NOISELESS:
        return 0.0
    return cfg.P / 10.0 ** (cfg.snr_db / 10.0)


def noise_rng(cfg: ChannelConfig, user: int, pair_id: int, counter: int = 0) -> np.random.Generator:
    """Stream keyed by (seed, user, pair, counter); independent of call order."""
    return np.random.default_rng([cfg.seed, user, pair_id, counter])


def transmit(s, cfg: ChannelConfig, user: int = 1, pair_id: int = 0, counter: int = 0) -> Tensor:
    """ŝ = s + n with circular complex noise; n × 2 (re, im) layout.

    The noise enters backward as an additive constant.
    """
    s = as_tensor(s)
    var = noise_variance(cfg)
    if var == 0.0:
        return s + 0.0
    rng = noise_rng(cfg, user, pair_id, counter)
    return s + rng.normal(0.0, math.sqrt(var / 2.0), size=s.shape)


def awgn_capacity(snr_db: float) -> float:
    """log₂(1 + SNR) bits per complex channel use."""
    if snr_db == -math.inf:
        return 0.0
    return math.log2(1.0 + 10.0 ** (snr_db / 10.0))
