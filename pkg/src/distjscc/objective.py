"""Rate-distortion loss, image metrics, and variational-bound diagnostics."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy import stats

from .diffcore import NonFiniteError, Tensor, as_tensor, clamp_min, mean, relu

MSSSIM_WEIGHTS = (0.0448, 0.2856, 0.3001, 0.2363, 0.1333)
PSNR_INF = math.inf


@dataclass(frozen=True)
class LossConfig:
    lam: float = 0.01
    eta: float = 0.2
    distortion_kind: str = "mse"
    msssim_scales: int = 1

    def __post_init__(self):
        if not self.lam >= 0:
            raise ValueError("lambda must be non-negative")
        if self.distortion_kind not in ("mse", "one_minus_msssim"):
            raise ValueError(f"unknown distortion {self.distortion_kind!r}")


@dataclass
class LossBreakdown:
    d1: Tensor
    d2: Tensor
    r_y1: Tensor
    r_y2: Tensor
    r_z: Tensor
    total: Tensor
    lam: float = 0.0
    eta: float = 0.0

    def values(self) -> dict[str, float]:
        return {k: float(getattr(self, k).data) for k in ("d1", "d2", "r_y1", "r_y2", "r_z", "total")}


def total_loss(d1, d2, r_y1, r_y2, r_z, cfg: LossConfig) -> LossBreakdown:
    """d1 + d2 + λ(η r_y1 + η r_y2 + r_z), rates in bits."""
    parts = [as_tensor(p) for p in (d1, d2, r_y1, r_y2, r_z)]
    for name, p in zip(("d1", "d2", "r_y1", "r_y2", "r_z"), parts):
        if not np.all(np.isfinite(p.data)):
            raise NonFiniteError(f"loss part {name} is not finite")
    d1, d2, r_y1, r_y2, r_z = parts
    total = d1 + d2 + (r_y1 * cfg.eta + r_y2 * cfg.eta + r_z) * cfg.lam
    return LossBreakdown(d1, d2, r_y1, r_y2, r_z, total, cfg.lam, cfg.eta)


def mse(x, x_hat) -> Tensor:
    x, x_hat = as_tensor(x), as_tensor(x_hat)
    if x.shape != x_hat.shape:
        raise ValueError(f"shape mismatch {x.shape} vs {x_hat.shape}")
    diff = x - x_hat
    return mean(diff * diff)


def psnr(x, x_hat, clamp: bool = True) -> float:
    x = np.asarray(as_tensor(x).data)
    x_hat = np.asarray(as_tensor(x_hat).data)
    if x.shape != x_hat.shape:
        raise ValueError(f"shape mismatch {x.shape} vs {x_hat.shape}")
    if clamp:
        x_hat = np.clip(x_hat, 0.0, 1.0)
    err = float(np.mean((x - x_hat) ** 2))
    return psnr_from_mse(err)


def psnr_from_mse(err: float) -> float:
    if err == 0.0:
        return PSNR_INF
    return 10.0 * math.log10(1.0 / err)


def _gaussian_window(size: int = 11, sigma: float = 1.5) -> np.ndarray:
    x = np.arange(size) - (size - 1) / 2.0
    g = np.exp(-x ** 2 / (2 * sigma ** 2))
    return g / g.sum()


def _valid_filter_matrix(n: int, g: np.ndarray) -> np.ndarray:
    m = n - g.size + 1
    mat = np.zeros((m, n))
    for i in range(m):
        mat[i, i:i + g.size] = g
    return mat


def _pool_matrix(n: int) -> np.ndarray:
    m = n // 2
    mat = np.zeros((m, n))
    for i in range(m):
        mat[i, 2 * i:2 * i + 2] = 0.5
    return mat


def max_msssim_scales(h: int, w: int, window: int = 11) -> int:
    scales = 0
    while min(h, w) >= window * 2 ** scales and scales < len(MSSSIM_WEIGHTS):
        scales += 1
    return scales


def ms_ssim(x, x_hat, scales: int = 3, data_range: float = 1.0) -> Tensor:
    """Multi-scale SSIM on C×H×W images (Gaussian 11×11 window, σ=1.5).

    Exponents are the standard five-scale set truncated to ``scales`` and
    renormalized to sum to one. Contrast-structure terms are clamped at
    zero so the result stays in [0, 1]. Differentiable in both arguments.
    """
    x, x_hat = as_tensor(x), as_tensor(x_hat)
    if x.shape != x_hat.shape:
        raise ValueError(f"shape mismatch {x.shape} vs {x_hat.shape}")
    h, w = x.shape[-2:]
    if scales < 1 or min(h, w) < 11 * 2 ** (scales - 1):
        raise ValueError(f"image {h}x{w} too small for {scales} MS-SSIM scales")
    weights = np.array(MSSSIM_WEIGHTS[:scales])
    weights = weights / weights.sum()
    c1 = (0.01 * data_range) ** 2
    c2 = (0.03 * data_range) ** 2
    g = _gaussian_window()
    value = None
    a, b = x, x_hat
    for s in range(scales):
        hh, ww = a.shape[-2:]
        fh = Tensor(_valid_filter_matrix(hh, g))
        fw = Tensor(_valid_filter_matrix(ww, g).T)

        def blur(t):
            return fh @ t @ fw

        mu_a, mu_b = blur(a), blur(b)
        var_a = blur(a * a) - mu_a * mu_a
        var_b = blur(b * b) - mu_b * mu_b
        cov = blur(a * b) - mu_a * mu_b
        cs_map = (cov * 2.0 + c2) / (var_a + var_b + c2)
        if s == scales - 1:
            lum = (mu_a * mu_b * 2.0 + c1) / (mu_a * mu_a + mu_b * mu_b + c1)
            term = mean(lum * cs_map)
        else:
            term = mean(cs_map)
        term = clamp_min(relu(term), 1e-12) ** float(weights[s])
        value = term if value is None else value * term
        if s < scales - 1:
            ph = Tensor(_pool_matrix(hh))
            pw = Tensor(_pool_matrix(ww).T)
            a, b = ph @ a @ pw, ph @ b @ pw
    return value


# ---------------------------------------------------------------------------
# variational-bound diagnostics
# ---------------------------------------------------------------------------

@dataclass
class KLReport:
    distortion: float
    rate_s1: float
    rate_s2: float
    rate_z: float
    total: float
    recombined: float
    noise_var: float = float("nan")
    noise_var_expected: float = float("nan")
    ks_uniform: float = float("nan")
    extra: dict = field(default_factory=dict)

    @property
    def identity_gap(self) -> float:
        return abs(self.total - self.recombined)


def kl_terms(record, lam: float, eta: float) -> KLReport:
    """The four bracketed terms of the bound for one forward record.

    ``record`` provides ``breakdowns`` (list of LossBreakdown), and optionally
    ``channel_noise`` (arrays of ŝ−s), ``noise_var`` and ``hyper_offsets``
    (arrays of z̃−z).
    """
    bds = record.breakdowns
    dist = float(np.mean([float(b.d1.data + b.d2.data) for b in bds]))
    r_s1 = float(np.mean([eta * float(b.r_y1.data) for b in bds]))
    r_s2 = float(np.mean([eta * float(b.r_y2.data) for b in bds]))
    r_z = float(np.mean([float(b.r_z.data) for b in bds]))
    total = float(np.mean([float(b.total.data) for b in bds]))
    recombined = dist + lam * (r_s1 + r_s2 + r_z)
    report = KLReport(dist, r_s1, r_s2, r_z, total, recombined)
    noise = getattr(record, "channel_noise", None)
    if noise:
        flat = np.concatenate([np.asarray(n).ravel() for n in noise])
        # each real component carries half the complex variance
        report.noise_var = float(2.0 * np.var(flat))
        report.noise_var_expected = float(getattr(record, "noise_var", float("nan")))
    offsets = getattr(record, "hyper_offsets", None)
    if offsets:
        flat = np.concatenate([np.asarray(o).ravel() for o in offsets])
        report.ks_uniform = float(stats.kstest(flat, stats.uniform(loc=-0.5, scale=1.0).cdf).statistic)
    return report
