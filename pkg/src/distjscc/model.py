"""End-to-end two-user codec: separate encoding, joint decoding.

Modes
-----
``joint``         joint GMM hyperprior, MMSE cross-rate estimate, aligned side info
``independent``   per-user hyperpriors (the cross-rate estimate uses the marginal mean),
                  aligned side info
``no_alignment``  as ``joint`` but side information is passed unaligned
``p2p``           point-to-point: per-user hyperpriors, no cross-user conditioning,
                  zero side information at the synthesis transform
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import entropy
from .alignment import Aligner
from .channel import ChannelConfig, noise_variance, transmit
from .diffcore import Block, Tensor, as_tensor
from .entropy import JointHyperPrior, MarginalHyperPrior
from .jscc import JSCCDecoder, JSCCEncoder, RateAllocation, RateSet, RateTokens, allocate, power_normalize
from .objective import LossBreakdown, LossConfig, mse, ms_ssim, total_loss
from .transforms import (
    Analysis,
    HyperAnalysis,
    HyperSynthesis,
    JointSynthesis,
    ModelConfig,
    grid_of,
    tokens_of,
)

MODES = ("joint", "independent", "no_alignment", "p2p")


@dataclass
class UserPass:
    y: Tensor
    z: Tensor
    z_used: Tensor
    mu: Tensor
    sigma: Tensor
    y_noisy: Tensor
    alloc: RateAllocation
    s: Tensor | None = None
    s_hat: Tensor | None = None
    y_hat: Tensor | None = None
    x_hat: Tensor | None = None


@dataclass
class PairRecord:
    users: tuple[UserPass, UserPass]
    breakdown: LossBreakdown
    pair_id: int

    @property
    def n(self) -> tuple[int, int]:
        return self.users[0].alloc.n, self.users[1].alloc.n


@dataclass
class BatchRecord:
    pairs: list[PairRecord]
    loss: Tensor
    noise_var: float = 0.0
    channel_noise: list = field(default_factory=list)
    hyper_offsets: list = field(default_factory=list)

    @property
    def breakdowns(self) -> list[LossBreakdown]:
        return [p.breakdown for p in self.pairs]


class DistributedCodec(Block):
    def __init__(self, cfg: ModelConfig, image_shape: tuple[int, int, int], rates: RateSet,
                 mode: str = "joint", K: int = 3, seed: int = 0):
        super().__init__()
        if mode not in MODES:
            raise ValueError(f"unknown mode {mode!r}; expected one of {MODES}")
        rng = np.random.default_rng(seed)
        self.cfg, self.rates, self.mode = cfg, rates, mode
        self.image_shape = tuple(image_shape)
        C, H, W = self.image_shape
        if C != cfg.C:
            raise ValueError("image channel count must match the model config")
        self.latent_shape = cfg.latent_shape(H, W)
        self.hyper_shape = cfg.hyper_shape(H, W)
        n_z = int(np.prod(self.hyper_shape))
        if n_z > int(np.prod(self.latent_shape)) // 4:
            raise ValueError("hyper grid must have at most a quarter of the latent elements")
        self.g_a = {u: Analysis(f"g_a{u}", cfg, rng) for u in (1, 2)}
        self.h_a = {u: HyperAnalysis(f"h_a{u}", cfg, rng) for u in (1, 2)}
        self.h_s = {u: HyperSynthesis(f"h_s{u}", cfg, rng) for u in (1, 2)}
        self.f_e = {u: JSCCEncoder(u, cfg.c_lat, rates, rng) for u in (1, 2)}
        self.f_d = {u: JSCCDecoder(u, cfg.c_lat, rates, rng) for u in (1, 2)}
        self.rate_tokens = RateTokens(rates, cfg.c_lat, rng)
        self.g_s = JointSynthesis("g_s", cfg, rng)
        if mode in ("joint", "no_alignment"):
            self.joint_prior = JointHyperPrior(n_z, K, rng, name="psi")
            self.marginal_priors = None
        else:
            self.joint_prior = None
            self.marginal_priors = {u: MarginalHyperPrior(n_z, K, rng, name=f"psi{u}") for u in (1, 2)}
        self.aligner = Aligner("T", cfg, rng) if mode in ("joint", "independent") else None
        self.mmse_calls = 0

    # -- children: dicts of blocks are discovered by Block.children -----

    @property
    def cross_user(self) -> bool:
        return self.mode != "p2p"

    def named_parameters(self) -> dict:
        params = {p.name: p for p in self.parameters()}
        if len(params) != len(self.parameters()):
            raise RuntimeError("parameter names are not unique")
        return params

    # -- rate helpers ----------------------------------------------------
    def allocation_from_hyper(self, user: int, z) -> tuple[np.ndarray, Tensor, Tensor]:
        """Bandwidths for one user from its (noisy or rounded) hyper grid.

        Token bits are evaluated with every latent element at its mean, so
        the transmitter and the receiver reach the same allocation from z.
        """
        mu, sigma = self.h_s[user](as_tensor(z))
        bits = entropy.token_bits_at_mean(tokens_of(sigma).data)
        return allocate(bits, self.rates), mu, sigma

    def estimate_other(self, user: int, z_own: np.ndarray, quantized: bool) -> np.ndarray:
        """Estimated bandwidths of the other user from this user's hyper grid."""
        other = 3 - user
        self.mmse_calls += 1
        if self.joint_prior is not None:
            flat = np.asarray(z_own).reshape(-1)
            if user == 1:
                est = entropy.mmse_estimate(flat, self.joint_prior)
            else:
                est = entropy.mmse_estimate(flat, _SwappedPrior(self.joint_prior))
        else:
            est = self.marginal_priors[other].mean()
        est = est.reshape(self.hyper_shape)
        if quantized:
            est = entropy.round_half_away(est)
        k, _, _ = self.allocation_from_hyper(other, Tensor(est))
        return k

    def hyper_bits(self, z1, z2) -> Tensor:
        if self.joint_prior is not None:
            return entropy.joint_hyper_rate_bits(z1, z2, self.joint_prior)
        return entropy.independent_hyper_rate_bits(z1, z2, self.marginal_priors[1], self.marginal_priors[2])

    # -- forward ---------------------------------------------------------
    def forward_pair(self, x1, x2, *, train: bool, channel: ChannelConfig, loss_cfg: LossConfig,
                     pair_id: int = 0, counter: int = 0, seed: int = 0) -> PairRecord:
        rng = np.random.default_rng([seed, pair_id, counter, 7])
        qmode = "train" if train else "eval"
        passes = []
        for u, x in ((1, x1), (2, x2)):
            y = self.g_a[u](as_tensor(x))
            z = self.h_a[u](y)
            z_used = entropy.noisy_quantize(z, qmode, rng)
            k, mu, sigma = self.allocation_from_hyper(u, z_used)
            y_noisy = entropy.noisy_quantize(y, "train", rng) if train else entropy.noisy_quantize(y, "eval")
            passes.append(UserPass(y, z, z_used, mu, sigma, y_noisy, RateAllocation(k)))

        if self.cross_user:
            for u, p in zip((1, 2), passes):
                p.alloc.k_star = self.estimate_other(u, p.z_used.data, quantized=not train)

        for u, p in zip((1, 2), passes):
            s = self.f_e[u](tokens_of(p.y), p.alloc, self.rate_tokens)
            p.s = power_normalize(s, channel.P)
            p.s_hat = transmit(p.s, channel, user=u, pair_id=pair_id, counter=counter)
        _, h, w = self.latent_shape
        for u, p in zip((1, 2), passes):
            other = passes[2 - u]
            k_other = other.alloc.k if self.cross_user else None
            y_hat_tokens = self.f_d[u](p.s_hat, p.alloc.k, k_other, self.rate_tokens)
            p.y_hat = grid_of(y_hat_tokens, h, w)

        y1h, y2h = passes[0].y_hat, passes[1].y_hat
        if self.aligner is not None:
            si_21, si_12 = self.aligner(y1h, y2h)
        elif self.mode == "no_alignment":
            si_21, si_12 = y2h, y1h
        else:
            zeros = Tensor(np.zeros(self.latent_shape))
            si_21, si_12 = zeros, zeros
        passes[0].x_hat = self.g_s(y1h, si_21)
        passes[1].x_hat = self.g_s(y2h, si_12)

        dists = []
        for p, x in zip(passes, (x1, x2)):
            if loss_cfg.distortion_kind == "mse":
                dists.append(mse(x, p.x_hat))
            else:
                dists.append(1.0 - ms_ssim(x, p.x_hat, loss_cfg.msssim_scales))
        r_y = [entropy.latent_rate_bits(p.y_noisy, p.mu, p.sigma) for p in passes]
        r_z = self.hyper_bits(passes[0].z_used, passes[1].z_used)
        bd = total_loss(dists[0], dists[1], r_y[0], r_y[1], r_z, loss_cfg)
        return PairRecord((passes[0], passes[1]), bd, pair_id)

    def forward_batch(self, pairs, *, train: bool, channel: ChannelConfig, loss_cfg: LossConfig,
                      counter: int = 0, seed: int = 0) -> BatchRecord:
        records = [self.forward_pair(p.x1, p.x2, train=train, channel=channel, loss_cfg=loss_cfg,
                                     pair_id=p.pair_id, counter=counter, seed=seed) for p in pairs]
        loss = records[0].breakdown.total
        for r in records[1:]:
            loss = loss + r.breakdown.total
        loss = loss * (1.0 / len(records))
        batch = BatchRecord(records, loss, noise_var=noise_variance(channel))
        for r in records:
            for u in r.users:
                batch.channel_noise.append(u.s_hat.data - u.s.data)
                if train:
                    batch.hyper_offsets.append(u.z_used.data - u.z.data)
        return batch

    def forward(self, *args, **kwargs):
        return self.forward_batch(*args, **kwargs).loss


class _SwappedPrior:
    """View of a joint prior with the two users exchanged."""

    def __init__(self, prior: JointHyperPrior):
        self.prior = prior

    def components(self):
        w, m1, m2, s1, s2, rho, r = self.prior.components()
        return w, m2, m1, s2, s1, rho, r
