"""Probability models: latent bin likelihoods, the bivariate GMM hyperprior,
code rates, quantization relaxations and the cross-user MMSE estimator.

All rates are in bits.
"""

from __future__ import annotations

import math

import numpy as np
from scipy.special import logsumexp, ndtr

from . import quadrature
from .diffcore import (
    Block,
    Parameter,
    Tensor,
    _make,
    _unbroadcast,
    as_tensor,
    clamp_min,
    exp,
    identity_grad,
    log2,
    softmax,
    softplus,
    sqrt,
    tsum,
)

PROB_FLOOR = 1e-12
CHOL_FLOOR = 1e-4  # diagonal of L >= 1e-4 keeps Sigma's diagonal >= 1e-8
QUAD_TOL = 1e-10
_SQRT_2PI = math.sqrt(2.0 * math.pi)


def _pdf(x):
    return np.exp(-0.5 * x * x) / _SQRT_2PI


def _softplus_inv(y):
    y = np.asarray(y, dtype=np.float64)
    return np.where(y > 30.0, y, np.log(np.expm1(np.maximum(y, 1e-300))))


# ---------------------------------------------------------------------------
# quantization relaxations
# ---------------------------------------------------------------------------

def round_half_away(v) -> np.ndarray:
    v = np.asarray(v, dtype=np.float64)
    return np.sign(v) * np.floor(np.abs(v) + 0.5)


def noisy_quantize(v, mode: str = "train", rng: np.random.Generator | int | None = None) -> Tensor:
    """Additive U(-½, ½) noise in ``train`` mode; straight-through rounding in ``eval``."""
    v = as_tensor(v)
    if mode == "train":
        rng = np.random.default_rng(rng)
        return v + rng.uniform(-0.5, 0.5, size=v.shape)
    if mode == "eval":
        return identity_grad(v, round_half_away(v.data))
    raise ValueError(f"unknown quantization mode {mode!r}")


# ---------------------------------------------------------------------------
# univariate Gaussian bins
# ---------------------------------------------------------------------------

def normal_interval(lo, hi) -> Tensor:
    """Φ(hi) − Φ(lo), evaluated on the side of zero that avoids cancellation."""
    lo, hi = as_tensor(lo), as_tensor(hi)
    upper = lo.data > 0
    val = np.where(upper, ndtr(-lo.data) - ndtr(-hi.data), ndtr(hi.data) - ndtr(lo.data))
    return _make(val, (lo, hi), lambda g: (-g * _pdf(lo.data), g * _pdf(hi.data)))


def latent_bin_prob(y, mu, sigma) -> Tensor:
    """Mass of N(mu, sigma²) ⊛ U(−½, ½) on the unit bin at ``y``."""
    y, mu, sigma = as_tensor(y), as_tensor(mu), as_tensor(sigma)
    centered = y - mu
    return normal_interval((centered - 0.5) / sigma, (centered + 0.5) / sigma)


def bits_of(prob) -> Tensor:
    """−log₂ p elementwise with the probability floored at ``PROB_FLOOR``."""
    return -log2(clamp_min(prob, PROB_FLOOR))


def latent_rate_bits(y, mu, sigma, axis=None) -> Tensor:
    """Sum of −log₂ bin probabilities (over ``axis``, default all elements)."""
    return tsum(bits_of(latent_bin_prob(y, mu, sigma)), axis=axis)


def token_bits_at_mean(sigma) -> np.ndarray:
    """Per-token bits with every element at its mean; sigma has shape l×c."""
    sigma = np.asarray(sigma, dtype=np.float64)
    p = 2.0 * ndtr(0.5 / sigma) - 1.0
    return -np.log2(np.maximum(p, PROB_FLOOR)).sum(axis=-1)


# ---------------------------------------------------------------------------
# bivariate rectangle probability
# ---------------------------------------------------------------------------

U_LIMIT = 12.0


def rect_prob_values(x_lo, x_hi, y_lo, y_hi, rho, r=None, tol: float = QUAD_TOL) -> np.ndarray:
    """P(x_lo<X<x_hi, y_lo<Y<y_hi) for standard bivariate normals with correlation rho.

    Reduced to ∫ φ(u)[Φ((y_hi−ρu)/r) − Φ((y_lo−ρu)/r)] du over u ∈ [x_lo, x_hi]
    and integrated adaptively. ``r`` is √(1−ρ²) when a more accurate value
    than the direct formula is available.
    """
    x_lo, x_hi, y_lo, y_hi, rho = np.broadcast_arrays(
        *(np.asarray(t, dtype=np.float64) for t in (x_lo, x_hi, y_lo, y_hi, rho)))
    shape = x_lo.shape
    x_lo, x_hi, y_lo, y_hi, rho = (t.ravel() for t in (x_lo, x_hi, y_lo, y_hi, rho))
    r = np.sqrt(np.maximum(1.0 - rho * rho, 0.0)) if r is None else np.broadcast_to(
        np.asarray(r, dtype=np.float64), shape).ravel()
    r = np.maximum(r, 1e-300)

    a = np.clip(x_lo, -U_LIMIT, U_LIMIT)
    b = np.clip(x_hi, -U_LIMIT, U_LIMIT)

    def integrand(u, idx):
        rh, rr = rho[idx, None], r[idx, None]
        lo = (y_lo[idx, None] - rh * u) / rr
        hi = (y_hi[idx, None] - rh * u) / rr
        upper = lo > 0
        band = np.where(upper, ndtr(-lo) - ndtr(-hi), ndtr(hi) - ndtr(lo))
        return _pdf(u) * band

    active = b > a
    out = np.zeros(x_lo.size)
    if np.any(active):
        vals, _ = quadrature.integrate(integrand_subset(integrand, np.flatnonzero(active)),
                                       a[active], b[active], tol=tol, panel=0.5)
        out[active] = vals
    return np.clip(out, 0.0, 1.0).reshape(shape)


def integrand_subset(f, subset: np.ndarray):
    return lambda u, idx: f(u, subset[idx])


def _bvn_pdf(x, y, rho, r):
    q = (x * x - 2.0 * rho * x * y + y * y) / (r * r)
    return np.exp(-0.5 * q) / (2.0 * math.pi * r)


def rect_prob(x_lo, x_hi, y_lo, y_hi, rho, r_value=None, tol: float = QUAD_TOL) -> Tensor:
    """Differentiable rectangle probability of a standard bivariate normal.

    The backward pass is analytic: edge derivatives are a density times a
    conditional band probability, and ∂/∂ρ is the signed sum of the
    bivariate density over the four corners.
    """
    ts = [as_tensor(t) for t in (x_lo, x_hi, y_lo, y_hi, rho)]
    xl, xh, yl, yh, rh = np.broadcast_arrays(*(t.data for t in ts))
    r = np.sqrt(np.maximum(1.0 - rh * rh, 0.0)) if r_value is None else np.broadcast_to(r_value, xl.shape)
    r = np.maximum(r, 1e-300)
    val = rect_prob_values(xl, xh, yl, yh, rh, r, tol=tol)

    def backward(g):
        band_x = lambda x: (normal_interval((yl - rh * x) / r, (yh - rh * x) / r).data)
        band_y = lambda y: (normal_interval((xl - rh * y) / r, (xh - rh * y) / r).data)
        d_xh = _pdf(xh) * band_x(xh)
        d_xl = -_pdf(xl) * band_x(xl)
        d_yh = _pdf(yh) * band_y(yh)
        d_yl = -_pdf(yl) * band_y(yl)
        d_rho = (_bvn_pdf(xh, yh, rh, r) - _bvn_pdf(xl, yh, rh, r)
                 - _bvn_pdf(xh, yl, rh, r) + _bvn_pdf(xl, yl, rh, r))
        return tuple(_unbroadcast(g * d, t.shape) for d, t in zip((d_xl, d_xh, d_yl, d_yh, d_rho), ts))

    return _make(val, ts, backward)


# ---------------------------------------------------------------------------
# hyperprior models
# ---------------------------------------------------------------------------

class JointHyperPrior(Block):
    """Per-index bivariate Gaussian mixture over (z₁ʲ, z₂ʲ).

    Covariances are ``L Lᵀ`` with ``L = [[l11, 0], [l21, l22]]`` and
    ``l11, l22 = CHOL_FLOOR + softplus(raw)``.
    """

    def __init__(self, n_index: int, K: int = 3, rng: np.random.Generator | None = None, name: str = "prior"):
        super().__init__()
        rng = np.random.default_rng(0) if rng is None else rng
        self.n_index, self.K = n_index, K
        self.logits = Parameter(f"{name}.logits", np.zeros((n_index, K)))
        means = rng.uniform(-1.0, 1.0, size=(n_index, K, 1)) * np.ones((1, 1, 2))
        self.means = Parameter(f"{name}.means", means)
        chol = np.zeros((n_index, K, 3))
        chol[..., 0] = _softplus_inv(1.0 - CHOL_FLOOR)
        chol[..., 2] = _softplus_inv(1.0 - CHOL_FLOOR)
        self.chol = Parameter(f"{name}.chol", chol)

    @classmethod
    def from_moments(cls, weights, means, covs, name: str = "prior") -> "JointHyperPrior":
        """Build a prior with fixed parameters; shapes (N,K), (N,K,2), (N,K,2,2)."""
        weights = np.asarray(weights, dtype=np.float64)
        means = np.asarray(means, dtype=np.float64)
        covs = np.asarray(covs, dtype=np.float64)
        n, k = weights.shape
        prior = cls(n, k, name=name)
        prior.logits.data[...] = np.log(weights)
        prior.means.data[...] = means
        l11 = np.sqrt(covs[..., 0, 0])
        l21 = covs[..., 1, 0] / l11
        l22 = np.sqrt(covs[..., 1, 1] - l21 ** 2)
        prior.chol.data[..., 0] = _softplus_inv(l11 - CHOL_FLOOR)
        prior.chol.data[..., 1] = l21
        prior.chol.data[..., 2] = _softplus_inv(l22 - CHOL_FLOOR)
        return prior

    def components(self):
        """Differentiable (weights, m1, m2, s1, s2, rho, r) each shaped N×K."""
        weights = softmax(self.logits, axis=-1)
        l11 = softplus(self.chol[..., 0]) + CHOL_FLOOR
        l21 = self.chol[..., 1]
        l22 = softplus(self.chol[..., 2]) + CHOL_FLOOR
        s2 = sqrt(l21 * l21 + l22 * l22)
        rho = l21 / s2
        r = l22 / s2
        return weights, self.means[..., 0], self.means[..., 1], l11, s2, rho, r

    def covariances(self) -> np.ndarray:
        _, _, _, s1, s2, rho, _ = (t.data for t in self.components())
        cov = np.empty(s1.shape + (2, 2))
        cov[..., 0, 0] = s1 ** 2
        cov[..., 1, 1] = s2 ** 2
        cov[..., 0, 1] = cov[..., 1, 0] = rho * s1 * s2
        return cov

    def weights(self) -> np.ndarray:
        return softmax(self.logits.data, axis=-1).data

    def marginal(self, user: int) -> "MarginalHyperPrior":
        w, m1, m2, s1, s2, _, _ = (t.data for t in self.components())
        m, s = (m1, s1) if user == 1 else (m2, s2)
        return MarginalHyperPrior.from_moments(w, m, s, name=f"marginal{user}")

    def sample(self, n_draws: int, rng: np.random.Generator, index: int = 0) -> np.ndarray:
        w = self.weights()[index]
        comp = rng.choice(self.K, size=n_draws, p=w)
        cov = self.covariances()[index]
        chol = np.linalg.cholesky(cov)
        eps = rng.standard_normal((n_draws, 2))
        return self.means.data[index][comp] + np.einsum("nij,nj->ni", chol[comp], eps)


class MarginalHyperPrior(Block):
    """Per-index univariate Gaussian mixture for one user's hyper grid."""

    def __init__(self, n_index: int, K: int = 3, rng: np.random.Generator | None = None, name: str = "marginal"):
        super().__init__()
        rng = np.random.default_rng(0) if rng is None else rng
        self.n_index, self.K = n_index, K
        self.logits = Parameter(f"{name}.logits", np.zeros((n_index, K)))
        self.means = Parameter(f"{name}.means", rng.uniform(-1.0, 1.0, size=(n_index, K)))
        self.scale = Parameter(f"{name}.scale", np.full((n_index, K), _softplus_inv(1.0 - CHOL_FLOOR)))

    @classmethod
    def from_moments(cls, weights, means, stds, name: str = "marginal") -> "MarginalHyperPrior":
        weights = np.asarray(weights, dtype=np.float64)
        prior = cls(*weights.shape, name=name)
        prior.logits.data[...] = np.log(weights)
        prior.means.data[...] = means
        prior.scale.data[...] = _softplus_inv(np.asarray(stds) - CHOL_FLOOR)
        return prior

    def components(self):
        return softmax(self.logits, axis=-1), self.means, softplus(self.scale) + CHOL_FLOOR

    def mean(self) -> np.ndarray:
        w, m, _ = (t.data for t in self.components())
        return (w * m).sum(axis=-1)


# ---------------------------------------------------------------------------
# densities, bin probabilities, rates
# ---------------------------------------------------------------------------

def _flat(v) -> Tensor:
    v = as_tensor(v)
    return v.reshape(-1)


def gmm_density_all(z1, z2, prior: JointHyperPrior) -> Tensor:
    """Mixture density at (z1ʲ, z2ʲ) for every index j."""
    z1, z2 = _flat(z1), _flat(z2)
    w, m1, m2, s1, s2, rho, r = prior.components()
    u = (z1.reshape(-1, 1) - m1) / s1
    v = (z2.reshape(-1, 1) - m2) / s2
    q = (u * u - 2.0 * rho * u * v + v * v) / (r * r)
    dens = exp(q * -0.5) / (s1 * s2 * r * (2.0 * math.pi))
    return tsum(w * dens, axis=-1)


def gmm_density(z1: float, z2: float, prior: JointHyperPrior, j: int = 0) -> Tensor:
    n = prior.n_index
    z1v = np.full(n, float(z1))
    z2v = np.full(n, float(z2))
    return gmm_density_all(z1v, z2v, prior)[j]


def gmm_bin_prob_all(z1, z2, prior: JointHyperPrior, tol: float = QUAD_TOL) -> Tensor:
    """Mixture mass on the unit squares centred at (z1ʲ, z2ʲ), for every j."""
    z1, z2 = _flat(z1), _flat(z2)
    if z1.shape[0] != prior.n_index or z2.shape[0] != prior.n_index:
        raise ValueError(f"expected {prior.n_index} indices, got {z1.shape[0]} and {z2.shape[0]}")
    w, m1, m2, s1, s2, rho, r = prior.components()
    c1 = z1.reshape(-1, 1) - m1
    c2 = z2.reshape(-1, 1) - m2
    rect = rect_prob((c1 - 0.5) / s1, (c1 + 0.5) / s1, (c2 - 0.5) / s2, (c2 + 0.5) / s2, rho,
                     r_value=r.data, tol=tol)
    return tsum(w * rect, axis=-1)


def gmm_bin_prob(z1: float, z2: float, prior: JointHyperPrior, j: int = 0, tol: float = QUAD_TOL) -> Tensor:
    n = prior.n_index
    return gmm_bin_prob_all(np.full(n, float(z1)), np.full(n, float(z2)), prior, tol)[j]


def joint_hyper_rate_bits(z1, z2, prior: JointHyperPrior, tol: float = QUAD_TOL) -> Tensor:
    return tsum(bits_of(gmm_bin_prob_all(z1, z2, prior, tol)))


def marginal_bin_prob_all(z, prior: MarginalHyperPrior) -> Tensor:
    z = _flat(z)
    w, m, s = prior.components()
    c = z.reshape(-1, 1) - m
    return tsum(w * normal_interval((c - 0.5) / s, (c + 0.5) / s), axis=-1)


def independent_hyper_rate_bits(z1, z2, prior1: MarginalHyperPrior, prior2: MarginalHyperPrior) -> Tensor:
    return (tsum(bits_of(marginal_bin_prob_all(z1, prior1)))
            + tsum(bits_of(marginal_bin_prob_all(z2, prior2))))


def mmse_estimate(z1, prior: JointHyperPrior) -> np.ndarray:
    """Conditional mean E[z₂ | z₁] per index under the joint mixture."""
    z1 = np.asarray(as_tensor(z1).data, dtype=np.float64)
    shape = z1.shape
    z1 = z1.reshape(-1, 1)
    w, m1, m2, s1, s2, rho, _ = (t.data for t in prior.components())
    log_resp = np.log(w) - 0.5 * ((z1 - m1) / s1) ** 2 - np.log(s1)
    resp = np.exp(log_resp - logsumexp(log_resp, axis=-1, keepdims=True))
    cond = m2 + rho * s2 / s1 * (z1 - m1)
    return (resp * cond).sum(axis=-1).reshape(shape)
