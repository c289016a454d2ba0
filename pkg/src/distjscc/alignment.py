"""Projective alignment of side information by differentiable bilinear sampling.

Normalized coordinates put the center of cell k (of n) at ``-1 + (2k+1)/n``;
u runs along the width axis, v along the height axis. Samples falling
outside the grid read zeros.
"""

from __future__ import annotations

import numpy as np

from .diffcore import (
    Block,
    ChannelLinear,
    Linear,
    Tensor,
    _make,
    as_tensor,
    concat,
    leaky_relu,
    mean,
    resample,
    stack,
)
from .transforms import ModelConfig

W_GUARD = 1e-8


class SingularTransformError(ValueError):
    pass


def cell_centers(n: int) -> np.ndarray:
    return -1.0 + (2.0 * np.arange(n) + 1.0) / n


class Localizer(Block):
    """Maps ŷ₁⊕ŷ₂ to two projective matrices with M[2][2] fixed at 1.

    The output layer starts at zero, so both matrices start as identity.
    """

    def __init__(self, name: str, cfg: ModelConfig, rng: np.random.Generator, hidden: int = 16):
        super().__init__()
        self.cfg = cfg
        self.conv = ChannelLinear(f"{name}.conv", 2 * cfg.c_lat * 4, hidden, rng)
        self.fc1 = Linear(f"{name}.fc1", hidden, hidden, rng)
        self.fc2 = Linear(f"{name}.fc2", hidden, 16, rng, zero_init=True)

    def forward(self, concat_latent):
        x = as_tensor(concat_latent)
        x = leaky_relu(self.conv(resample(x, 2, "down")), self.cfg.slope)
        pooled = mean(x, axis=(-2, -1))
        h = leaky_relu(self.fc1(pooled), self.cfg.slope)
        offsets = self.fc2(h)
        eye = np.eye(3).reshape(-1)[:8]
        mats = []
        for i in range(2):
            top = offsets[..., 8 * i:8 * (i + 1)] + eye
            mats.append(concat([top, Tensor(np.ones(offsets.shape[:-1] + (1,)))], axis=-1).reshape(
                *offsets.shape[:-1], 3, 3))
        return stack(mats, axis=0)


def localize(block: Localizer, own, other) -> tuple[Tensor, Tensor]:
    mats = block(concat([as_tensor(own), as_tensor(other)], axis=-3))
    return mats[0], mats[1]


def make_grid(M, h: int, w: int) -> Tensor:
    """Sampling grid h×w×2 of (u, v) source coordinates for projective matrix M."""
    M = as_tensor(M)
    if M.shape != (3, 3):
        raise ValueError("projective matrix must be 3x3")
    if M.data[2, 2] != 1.0:
        raise ValueError("projective matrix must have M[2][2] == 1")
    vv, uu = np.meshgrid(cell_centers(h), cell_centers(w), indexing="ij")
    homog = np.stack([uu, vv, np.ones_like(uu)], axis=-1)  # h×w×3
    mapped = Tensor(homog) @ M.transpose()
    denom = mapped[..., 2:3]
    if np.any(np.abs(denom.data) < W_GUARD):
        raise SingularTransformError("projective transform maps a cell to infinity")
    return mapped[..., 0:2] / denom


def _bilinear_setup(h: int, w: int, grid: np.ndarray):
    px = ((grid[..., 0] + 1.0) * w - 1.0) / 2.0
    py = ((grid[..., 1] + 1.0) * h - 1.0) / 2.0
    # snap round-off so lattice positions reproduce cells exactly
    px = np.where(np.abs(px - np.round(px)) < 1e-9, np.round(px), px)
    py = np.where(np.abs(py - np.round(py)) < 1e-9, np.round(py), py)
    x0 = np.floor(px)
    y0 = np.floor(py)
    return px, py, x0.astype(int), y0.astype(int), px - x0, py - y0


def sample(latent, grid) -> Tensor:
    """Bilinear sampling of a c×h×w latent at grid positions (zero padding)."""
    latent, grid = as_tensor(latent), as_tensor(grid)
    c, h, w = latent.shape
    if grid.shape != (h, w, 2):
        raise ValueError(f"grid shape {grid.shape} does not match latent extents {(h, w)}")
    img = latent.data
    _, _, x0, y0, fx, fy = _bilinear_setup(h, w, grid.data)
    corners = []
    for dy in (0, 1):
        for dx in (0, 1):
            xi, yi = x0 + dx, y0 + dy
            valid = (xi >= 0) & (xi < w) & (yi >= 0) & (yi < h)
            xc, yc = np.clip(xi, 0, w - 1), np.clip(yi, 0, h - 1)
            vals = np.where(valid, img[:, yc, xc], 0.0)
            wx = fx if dx else 1.0 - fx
            wy = fy if dy else 1.0 - fy
            corners.append((dx, dy, xc, yc, valid, vals, wx, wy))
    out = sum(vals * (wx * wy) for _, _, _, _, _, vals, wx, wy in corners)

    def backward(g):
        g_lat = np.zeros_like(img)
        g_px = np.zeros((h, w))
        g_py = np.zeros((h, w))
        for dx, dy, xc, yc, valid, vals, wx, wy in corners:
            contrib = g * (wx * wy) * valid
            np.add.at(g_lat, (slice(None), yc, xc), contrib)
            gv = (g * vals).sum(axis=0)
            g_px += gv * wy * (1.0 if dx else -1.0)
            g_py += gv * wx * (1.0 if dy else -1.0)
        g_grid = np.stack([g_px * w / 2.0, g_py * h / 2.0], axis=-1)
        return g_lat, g_grid

    return _make(out, (latent, grid), backward)


class Aligner(Block):
    """𝒯: produces SI_{2→1} and SI_{1→2} from the two recovered latents."""

    def __init__(self, name: str, cfg: ModelConfig, rng: np.random.Generator):
        super().__init__()
        self.localizer = Localizer(f"{name}.loc", cfg, rng)
        self.calls = 0

    def forward(self, y1, y2):
        self.calls += 1
        y1, y2 = as_tensor(y1), as_tensor(y2)
        m1, m2 = localize(self.localizer, y1, y2)
        _, h, w = y1.shape
        si_21 = sample(y2, make_grid(m1, h, w))
        si_12 = sample(y1, make_grid(m2, h, w))
        return si_21, si_12
