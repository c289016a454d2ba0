"""Analysis, hyper-analysis, hyper-synthesis and joint synthesis transforms.

Each transform is a stack of lossless resampling steps and 1×1 channel maps
with leaky rectifiers in between. Widths are repo choices (see
``ModelConfig``); they are small enough to finite-difference.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .diffcore import (
    Block,
    ChannelLinear,
    Tensor,
    as_tensor,
    concat,
    leaky_relu,
    resample,
    softplus,
)

SIGMA_MIN = 1e-6


@dataclass(frozen=True)
class ModelConfig:
    """Transform widths.

    ``c_lat`` and ``c_hyp`` are not fixed by any reference design; the
    defaults suit 16×32 single-channel images.
    """

    C: int = 1
    c_mid: int = 16
    c_lat: int = 16
    c_hyp: int = 8
    c_hyp_mid: int = 32
    analysis_stages: int = 2
    stage_factor: int = 2
    hyper_factor: int = 2
    slope: float = 0.01

    @property
    def downsample(self) -> int:
        return self.stage_factor ** self.analysis_stages

    def latent_shape(self, H: int, W: int) -> tuple[int, int, int]:
        f = self.downsample
        return self.c_lat, H // f, W // f

    def hyper_shape(self, H: int, W: int) -> tuple[int, int, int]:
        _, h, w = self.latent_shape(H, W)
        return self.c_hyp, h // self.hyper_factor, w // self.hyper_factor


def tokens_of(latent) -> Tensor:
    """c×h×w latent viewed as l×c tokens (row-major over h, w)."""
    latent = as_tensor(latent)
    c, h, w = latent.shape
    return latent.reshape(c, h * w).transpose()


def grid_of(tokens, h: int, w: int) -> Tensor:
    tokens = as_tensor(tokens)
    return tokens.transpose().reshape(tokens.shape[1], h, w)


class Analysis(Block):
    """g_a: image C×H×W -> latent c_lat×(H/f)×(W/f)."""

    def __init__(self, name: str, cfg: ModelConfig, rng: np.random.Generator):
        super().__init__()
        self.cfg = cfg
        f2 = cfg.stage_factor ** 2
        widths = [cfg.C] + [cfg.c_mid] * (cfg.analysis_stages - 1) + [cfg.c_lat]
        self.stages = [ChannelLinear(f"{name}.s{i}", widths[i] * f2, widths[i + 1], rng)
                       for i in range(cfg.analysis_stages)]

    def forward(self, x):
        x = as_tensor(x)
        f = self.cfg.downsample
        if x.shape[-2] % f or x.shape[-1] % f:
            raise ValueError(f"image extents {x.shape[-2:]} not divisible by {f}")
        if x.shape[-3] != self.cfg.C:
            raise ValueError(f"expected {self.cfg.C} channels, got {x.shape[-3]}")
        for i, stage in enumerate(self.stages):
            x = stage(resample(x, self.cfg.stage_factor, "down"))
            if i < len(self.stages) - 1:
                x = leaky_relu(x, self.cfg.slope)
        return x


class HyperAnalysis(Block):
    """h_a: latent -> hyper grid c_hyp×(h/f_z)×(w/f_z)."""

    def __init__(self, name: str, cfg: ModelConfig, rng: np.random.Generator):
        super().__init__()
        self.cfg = cfg
        f2 = cfg.hyper_factor ** 2
        self.s0 = ChannelLinear(f"{name}.s0", cfg.c_lat * f2, cfg.c_hyp_mid, rng)
        self.s1 = ChannelLinear(f"{name}.s1", cfg.c_hyp_mid, cfg.c_hyp, rng)

    def forward(self, y):
        y = as_tensor(y)
        if y.shape[-3] != self.cfg.c_lat:
            raise ValueError(f"expected {self.cfg.c_lat} latent channels, got {y.shape[-3]}")
        h = leaky_relu(self.s0(resample(y, self.cfg.hyper_factor, "down")), self.cfg.slope)
        return self.s1(h)


class HyperSynthesis(Block):
    """h_s: hyper grid -> (mu, sigma) over the latent grid, sigma >= SIGMA_MIN."""

    def __init__(self, name: str, cfg: ModelConfig, rng: np.random.Generator):
        super().__init__()
        self.cfg = cfg
        f2 = cfg.hyper_factor ** 2
        self.s0 = ChannelLinear(f"{name}.s0", cfg.c_hyp, cfg.c_hyp_mid * f2, rng)
        self.s1 = ChannelLinear(f"{name}.s1", cfg.c_hyp_mid, 2 * cfg.c_lat, rng)

    def forward(self, z):
        z = as_tensor(z)
        h = leaky_relu(self.s0(z), self.cfg.slope)
        out = self.s1(resample(h, self.cfg.hyper_factor, "up"))
        c = self.cfg.c_lat
        mu = out[..., :c, :, :]
        sigma = softplus(out[..., c:, :, :]) + SIGMA_MIN
        return mu, sigma


class JointSynthesis(Block):
    """g_s: (own latent, aligned side latent) -> image.

    The output is left unclamped so the distortion gradient is never cut.
    """

    def __init__(self, name: str, cfg: ModelConfig, rng: np.random.Generator):
        super().__init__()
        self.cfg = cfg
        f2 = cfg.stage_factor ** 2
        widths = [2 * cfg.c_lat] + [cfg.c_mid] * (cfg.analysis_stages - 1)
        self.stages = []
        for i in range(cfg.analysis_stages):
            c_out = cfg.c_mid * f2 if i < cfg.analysis_stages - 1 else cfg.C * f2
            self.stages.append(ChannelLinear(f"{name}.s{i}", widths[i], c_out, rng))

    def forward(self, own, side):
        own, side = as_tensor(own), as_tensor(side)
        if own.shape != side.shape:
            raise ValueError(f"own {own.shape} and side {side.shape} latents differ in shape")
        x = concat([own, side], axis=-3)
        for i, stage in enumerate(self.stages):
            x = resample(stage(x), self.cfg.stage_factor, "up")
            if i < len(self.stages) - 1:
                x = leaky_relu(x, self.cfg.slope)
        return x + 0.5


def analyze(block: Analysis, x) -> Tensor:
    return block(x)


def hyper_analyze(block: HyperAnalysis, y) -> Tensor:
    return block(y)


def hyper_synthesize(block: HyperSynthesis, z):
    return block(z)


def joint_synthesize(block: JointSynthesis, own, side) -> Tensor:
    return block(own, side)
