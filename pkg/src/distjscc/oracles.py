"""Independent numerical oracles and the suite driver behind ``oracle-check``.

Every check here recomputes a quantity by a route that does not share code
with the implementation under test: scipy quadrature instead of Φ
differences, Monte Carlo sampling straight from the mixture moments,
central differences instead of the backward pass, and explicit scans
instead of vectorized argmins.
"""

from __future__ import annotations

import math
import time
from dataclasses import dataclass, field
from typing import Callable

import numpy as np
from scipy import integrate, stats

from . import channel as channel_mod
from . import entropy, jscc
from .alignment import Aligner, Localizer, localize, make_grid, sample
from .diffcore import Attention, Lambda, Linear, Tensor, grad_check, nonlinearity
from .harness import awgn_capacity, rate_per_pixel
from .jscc import JSCCDecoder, JSCCEncoder, RateAllocation, RateSet, RateTokens
from .objective import kl_terms, ms_ssim, mse, total_loss, LossConfig
from .sources import SourceConfig, gen_correlated_pair
from .transforms import Analysis, HyperAnalysis, HyperSynthesis, JointSynthesis, ModelConfig, analyze

STD_BIN = 0.3829249  # mass of the standard normal on [−½, ½]


@dataclass
class CheckResult:
    name: str
    op: str
    observed: float
    bound: str
    passed: bool
    seconds: float = 0.0
    detail: str = ""

    def line(self) -> str:
        status = "PASS" if self.passed else "FAIL"
        text = f"{status}  {self.name}: observed {self.observed:.6g}, bound {self.bound}"
        return text + (f" ({self.detail})" if self.detail else "")


@dataclass
class OracleReport:
    results: list[CheckResult] = field(default_factory=list)

    @property
    def passed(self) -> bool:
        return all(r.passed for r in self.results)

    def table(self) -> str:
        rows = [("status", "oracle", "op", "observed", "bound", "seconds")]
        for r in self.results:
            rows.append(("PASS" if r.passed else "FAIL", r.name, r.op, f"{r.observed:.6g}", r.bound,
                         f"{r.seconds:.2f}"))
        widths = [max(len(row[i]) for row in rows) for i in range(len(rows[0]))]
        lines = ["  ".join(cell.ljust(wd) for cell, wd in zip(row, widths)) for row in rows]
        failed = [r for r in self.results if not r.passed]
        lines.append(f"{len(self.results) - len(failed)}/{len(self.results)} oracles passed")
        for r in failed:
            lines.append(f"FAILED {r.op}: observed {r.observed:.6g}, bound {r.bound} {r.detail}".rstrip())
        return "\n".join(lines)


def _timed(name: str, op: str, fn: Callable[[], tuple[float, str, bool] | tuple[float, str, bool, str]]) -> CheckResult:
    t0 = time.perf_counter()
    out = fn()
    detail = out[3] if len(out) > 3 else ""
    return CheckResult(name, op, float(out[0]), out[1], bool(out[2]), time.perf_counter() - t0, detail)


# ---------------------------------------------------------------------------
# reference computations (independent of the implementation)
# ---------------------------------------------------------------------------

def _std_pdf(t):
    return math.exp(-0.5 * t * t) / math.sqrt(2.0 * math.pi)


def quad_bin_prob(y: float, mu: float, sigma: float) -> float:
    """∫ over [y−½, y+½] of the 𝒩(μ, σ²) density by adaptive quadrature."""
    lo, hi = (y - 0.5 - mu) / sigma, (y + 0.5 - mu) / sigma
    val, _ = integrate.quad(_std_pdf, lo, hi, epsabs=1e-14, epsrel=1e-12, limit=200,
                            points=[0.0] if lo < 0.0 < hi else None)
    return val


def random_mixture(rng: np.random.Generator, K: int, rho: float | None = None, mean_range: float = 2.0,
                   std_range: tuple[float, float] = (0.4, 2.5)) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Weights (K,), means (K,2), SPD covariances (K,2,2)."""
    w = rng.dirichlet(np.full(K, 2.0))
    means = rng.uniform(-mean_range, mean_range, size=(K, 2))
    covs = np.empty((K, 2, 2))
    for k in range(K):
        s = rng.uniform(*std_range, size=2)
        r = rho if (rho is not None and k == 0) else rng.uniform(-0.95, 0.95)
        covs[k] = [[s[0] ** 2, r * s[0] * s[1]], [r * s[0] * s[1], s[1] ** 2]]
    return w, means, covs


def sample_mixture(w, means, covs, n: int, rng: np.random.Generator, chunk: int = 1_000_000):
    """Yield chunks of draws from the mixture, straight from its moments."""
    chols = np.linalg.cholesky(covs)
    done = 0
    while done < n:
        m = min(chunk, n - done)
        comp = rng.choice(len(w), size=m, p=w)
        eps = rng.standard_normal((m, 2))
        out = np.empty((m, 2))
        for k in range(len(w)):
            sel = comp == k
            out[sel] = means[k] + eps[sel] @ chols[k].T
        done += m
        yield out


def mc_box_prob(w, means, covs, z1: float, z2: float, n: int, rng) -> tuple[float, float]:
    hits = 0
    for draws in sample_mixture(w, means, covs, n, rng):
        hits += int(np.count_nonzero((np.abs(draws[:, 0] - z1) < 0.5) & (np.abs(draws[:, 1] - z2) < 0.5)))
    p = hits / n
    return p, math.sqrt(max(p * (1 - p), 1e-300) / n)


def mc_conditional_mean(w, means, covs, z1: float, n: int, rng, window: float = 0.01) -> tuple[float, float, int]:
    picked = []
    for draws in sample_mixture(w, means, covs, n, rng):
        picked.append(draws[np.abs(draws[:, 0] - z1) < window, 1])
    vals = np.concatenate(picked)
    return float(vals.mean()), float(vals.std(ddof=1) / math.sqrt(vals.size)), int(vals.size)


def brute_force_allocate(bits: float, eta: float, V) -> int:
    target = eta * bits
    best_v, best_d = None, math.inf
    for v in V:  # ascending: a later element must be strictly closer to win
        d = abs(target - v)
        if d < best_d - 1e-9:
            best_v, best_d = v, d
    return best_v


def _prior(w, means, covs) -> entropy.JointHyperPrior:
    return entropy.JointHyperPrior.from_moments(w[None], means[None], covs[None])


# ---------------------------------------------------------------------------
# gradient suite
# ---------------------------------------------------------------------------

SMALL = ModelConfig(C=1, c_mid=4, c_lat=4, c_hyp=2, c_hyp_mid=4)
GRAD_ENTRIES = 24


def gradient_cases() -> dict[str, Callable[[int], tuple]]:
    """name → builder(seed) returning (block, inputs)."""
    cfg = SMALL
    rates = RateSet(V=(1, 2, 3), eta=0.2)

    def attention(seed):
        rng = np.random.default_rng(seed)
        return Attention("attn", 4, rng), [rng.standard_normal((3, 4))]

    def analysis(seed):
        rng = np.random.default_rng(seed)
        return Analysis("g_a", cfg, rng), [rng.uniform(0, 1, (1, 8, 8))]

    def hyper_analysis(seed):
        rng = np.random.default_rng(seed)
        return HyperAnalysis("h_a", cfg, rng), [rng.standard_normal((4, 4, 8))]

    def hyper_synthesis(seed):
        rng = np.random.default_rng(seed)
        block = HyperSynthesis("h_s", cfg, rng)
        return Lambda(lambda z: _cat(block(z)), block.parameters()), [rng.standard_normal((2, 2, 4))]

    def joint_synthesis(seed):
        rng = np.random.default_rng(seed)
        return JointSynthesis("g_s", cfg, rng), [rng.standard_normal((4, 2, 2)), rng.standard_normal((4, 2, 2))]

    def localizer(seed):
        rng = np.random.default_rng(seed)
        block = Localizer("loc", cfg, rng)
        block.fc2.weight.data[...] = 0.1 * rng.standard_normal(block.fc2.weight.shape)
        return (Lambda(lambda a, b: _cat(localize(block, a, b)), block.parameters()),
                [rng.standard_normal((4, 4, 8)), rng.standard_normal((4, 4, 8))])

    def sampler(seed):
        rng = np.random.default_rng(seed)
        return Lambda(sample), [rng.standard_normal((2, 4, 5)), rng.uniform(-0.95, 0.95, (4, 5, 2))]

    def grid(seed):
        rng = np.random.default_rng(seed)
        M = np.eye(3) + 0.1 * rng.standard_normal((3, 3))
        M[2, 2] = 1.0
        return Lambda(lambda m: make_grid(_fix_corner(m), 3, 4)), [M]

    def aligner(seed):
        rng = np.random.default_rng(seed)
        block = Aligner("T", cfg, rng)
        block.localizer.fc2.weight.data[...] = 0.05 * rng.standard_normal(block.localizer.fc2.weight.shape)
        block.localizer.fc2.bias.data[...] = 0.05 * rng.standard_normal(block.localizer.fc2.bias.shape)
        return (Lambda(lambda a, b: _cat(block(a, b)), block.parameters()),
                [rng.standard_normal((4, 4, 8)), rng.standard_normal((4, 4, 8))])

    def latent_bits(seed):
        rng = np.random.default_rng(seed)
        return (Lambda(lambda y, m, s: entropy.latent_rate_bits(y, m, s, axis=-1)),
                [rng.normal(0, 2, (3, 4)), rng.normal(0, 1, (3, 4)), rng.uniform(0.3, 3.0, (3, 4))])

    def joint_prior(seed):
        rng = np.random.default_rng(seed)
        prior = entropy.JointHyperPrior(3, 2, rng)
        prior.logits.data[...] = rng.standard_normal(prior.logits.shape)
        prior.chol.data[..., 1] = 0.5 * rng.standard_normal((3, 2))
        z1, z2 = rng.integers(-2, 3, 3).astype(float), rng.integers(-2, 3, 3).astype(float)
        return (Lambda(lambda: entropy.joint_hyper_rate_bits(z1, z2, prior), prior.parameters()), [])

    def joint_density(seed):
        rng = np.random.default_rng(seed)
        prior = entropy.JointHyperPrior(3, 2, rng)
        prior.chol.data[..., 1] = 0.5 * rng.standard_normal((3, 2))
        return (Lambda(lambda a, b: entropy.gmm_density_all(a, b, prior), prior.parameters()),
                [rng.standard_normal(3), rng.standard_normal(3)])

    def marginal_prior(seed):
        rng = np.random.default_rng(seed)
        p1, p2 = entropy.MarginalHyperPrior(3, 2, rng), entropy.MarginalHyperPrior(3, 2, rng)
        z1, z2 = rng.integers(-2, 3, 3).astype(float), rng.integers(-2, 3, 3).astype(float)
        return (Lambda(lambda: entropy.independent_hyper_rate_bits(z1, z2, p1, p2),
                       p1.parameters() + p2.parameters()), [])

    def rect(seed):
        rng = np.random.default_rng(seed)
        lo1, lo2 = rng.normal(0, 1, 4), rng.normal(0, 1, 4)
        return (Lambda(lambda a, b, c, d, r: entropy.rect_prob(a, b, c, d, r)),
                [lo1, lo1 + rng.uniform(0.2, 1.5, 4), lo2, lo2 + rng.uniform(0.2, 1.5, 4),
                 rng.uniform(-0.9, 0.9, 4)])

    def encoder(seed):
        rng = np.random.default_rng(seed)
        enc, tok = JSCCEncoder(1, 4, rates, rng), RateTokens(rates, 4, rng)
        alloc = RateAllocation(np.array([1, 3, 2, 3]), np.array([2, 2, 1, 3]))
        return (Lambda(lambda y: jscc.power_normalize(enc(y, alloc, tok)), enc.parameters() + tok.parameters()),
                [rng.standard_normal((4, 4))])

    def decoder(seed):
        rng = np.random.default_rng(seed)
        dec, tok = JSCCDecoder(2, 4, rates, rng), RateTokens(rates, 4, rng)
        k_own, k_other = np.array([1, 3, 2, 3]), np.array([2, 2, 1, 3])
        return (Lambda(lambda s: dec(s, k_own, k_other, tok), dec.parameters() + tok.parameters()),
                [rng.standard_normal((9, 2))])

    def distortion_mse(seed):
        rng = np.random.default_rng(seed)
        return Lambda(mse), [rng.uniform(0, 1, (1, 6, 6)), rng.uniform(0, 1, (1, 6, 6))]

    def distortion_msssim(seed):
        rng = np.random.default_rng(seed)
        x = _smooth(rng, (1, 13, 14))
        return Lambda(lambda a, b: ms_ssim(a, b, 1)), [x, np.clip(x + 0.05 * rng.standard_normal(x.shape), 0, 1)]

    def loss(seed):
        rng = np.random.default_rng(seed)
        cfg_l = LossConfig(lam=0.03, eta=0.2)
        return (Lambda(lambda a, b, c, d, e: total_loss(a, b, c, d, e, cfg_l).total),
                [rng.uniform(0, 1), rng.uniform(0, 1), rng.uniform(0, 50), rng.uniform(0, 50), rng.uniform(0, 20)])

    return {
        "diffcore.attention": attention,
        "transforms.analyze": analysis,
        "transforms.hyper_analyze": hyper_analysis,
        "transforms.hyper_synthesize": hyper_synthesis,
        "transforms.joint_synthesize": joint_synthesis,
        "alignment.localize": localizer,
        "alignment.make_grid": grid,
        "alignment.sample": sampler,
        "alignment.aligner": aligner,
        "entropy.latent_rate_bits": latent_bits,
        "entropy.gmm_density": joint_density,
        "entropy.joint_hyper_rate_bits": joint_prior,
        "entropy.independent_hyper_rate_bits": marginal_prior,
        "entropy.rect_prob": rect,
        "jscc.encode": encoder,
        "jscc.decode": decoder,
        "objective.mse": distortion_mse,
        "objective.ms_ssim": distortion_msssim,
        "objective.total_loss": loss,
    }


def _cat(parts):
    from .diffcore import concat

    return concat([p.reshape(-1) for p in parts], axis=0)


def _fix_corner(m):
    # keep M[2][2] at exactly 1 while differentiating the other entries
    from .diffcore import concat

    flat = m.reshape(-1)
    return concat([flat[:8], Tensor(np.ones(1))], axis=0).reshape(3, 3)


def _smooth(rng, shape):
    from scipy.ndimage import uniform_filter

    x = uniform_filter(rng.standard_normal(shape), size=(1, 5, 5), mode="wrap")
    x = (x - x.min()) / (x.max() - x.min())
    return 0.1 + 0.8 * x


def gradient_suite(seeds=range(10), eps: float = 1e-5, max_entries: int = GRAD_ENTRIES) -> dict[str, list[float]]:
    errors: dict[str, list[float]] = {}
    for name, build in gradient_cases().items():
        errors[name] = []
        for seed in seeds:
            block, inputs = build(seed)
            errors[name].append(grad_check(block, inputs, eps=eps, seed=seed, max_entries=max_entries))
    return errors


# ---------------------------------------------------------------------------
# individual oracles
# ---------------------------------------------------------------------------

def check_attention_fd():
    rng = np.random.default_rng(0)
    err = grad_check(Attention("attn", 4, rng), [rng.standard_normal((3, 4))])
    return err, "< 1e-5", err < 1e-5


def check_composite_fd():
    rng = np.random.default_rng(7)
    lin = Linear("lin", 5, 3, rng)
    err = grad_check(Lambda(lambda x: nonlinearity(lin(x)), lin.parameters()), [rng.standard_normal((4, 5))], seed=7)
    return err, "< 1e-5", err < 1e-5


def check_source_uncorrelated():
    cfg = SourceConfig(shared_gain=0.0, detail_gain=1.0)
    x1, x2 = [], []
    for i in range(100):
        pair = gen_correlated_pair(cfg, i)
        x1.append(pair.x1.ravel())
        x2.append(pair.x2.ravel())
    r = float(np.corrcoef(np.concatenate(x1), np.concatenate(x2))[0, 1])
    return r, "in (-0.1, 0.1)", -0.1 < r < 0.1


def check_transform_grads():
    cases = gradient_cases()
    worst = max(grad_check(*cases[n](0), max_entries=GRAD_ENTRIES)
                for n in ("transforms.analyze", "transforms.hyper_analyze", "transforms.hyper_synthesize",
                          "transforms.joint_synthesize"))
    return worst, "< 1e-4", worst < 1e-4


def check_alignment_grads():
    cases = gradient_cases()
    worst = max(grad_check(*cases[n](0), max_entries=GRAD_ENTRIES)
                for n in ("alignment.localize", "alignment.sample", "alignment.make_grid"))
    return worst, "< 1e-4", worst < 1e-4


def check_grid_zoom():
    h, w = 4, 6
    got = make_grid(np.diag([0.5, 0.5, 1.0]), h, w).data
    base = make_grid(np.eye(3), h, w).data
    err = float(np.max(np.abs(got - 0.5 * base)))
    return err, "== 0", err == 0.0


def check_translation_shift():
    rng = np.random.default_rng(0)
    c, h, w = 3, 4, 6
    y = rng.standard_normal((c, h, w))
    M = np.eye(3)
    M[0, 2] = 2.0 / w  # source column = output column + 1
    out = sample(y, make_grid(M, h, w)).data
    expected = np.zeros_like(y)
    expected[:, :, :-1] = y[:, :, 1:]
    err = float(np.max(np.abs(out - expected)))
    return err, "< 1e-12", err < 1e-12


def check_uniform_moments():
    v = np.zeros(1_000_000)
    d = entropy.noisy_quantize(v, "train", np.random.default_rng(0)).data - v
    m, var = float(d.mean()), float(d.var())
    ok = abs(m) < 0.01 and abs(var - 1 / 12) < 0.005
    return var, "mean in (-0.01,0.01), var in 1/12 ± 0.005", ok, f"mean {m:.2e}"


def check_latent_bin_prob():
    got = float(entropy.latent_bin_prob(0.0, 0.0, 1.0).data)
    ref = quad_bin_prob(0.0, 0.0, 1.0)
    err = abs(got - ref)
    ok = err < 1e-12 and abs(ref - STD_BIN) < 5e-8
    return got, f"quadrature {ref:.10f} ± 1e-12", ok


def check_latent_rate():
    c = 16
    bits = float(entropy.latent_rate_bits(np.zeros(c), np.zeros(c), np.ones(c)).data)
    ref = -c * math.log2(quad_bin_prob(0.0, 0.0, 1.0))
    ok = abs(bits - ref) < 1e-9 and abs(bits / c - 1.384867) < 1e-6
    return bits / c, "1.384867 per element", ok


def check_gmm_density_integral():
    w, means, covs = random_mixture(np.random.default_rng(1), 3, mean_range=1.5, std_range=(0.4, 1.2))
    nodes, weights = np.polynomial.legendre.leggauss(48)
    panels = np.linspace(-8, 8, 17)
    xs, ws = [], []
    for a, b in zip(panels[:-1], panels[1:]):
        xs.append(0.5 * (b - a) * nodes + 0.5 * (a + b))
        ws.append(0.5 * (b - a) * weights)
    xs, ws = np.concatenate(xs), np.concatenate(ws)
    n = xs.size
    prior = entropy.JointHyperPrior.from_moments(np.repeat(w[None], n, 0), np.repeat(means[None], n, 0),
                                                 np.repeat(covs[None], n, 0))
    total = 0.0
    for x, wx in zip(xs, ws):
        total += wx * float(ws @ entropy.gmm_density_all(np.full(n, x), xs, prior).data)
    return total, "1 ± 1e-6", abs(total - 1.0) < 1e-6


def check_gmm_identity_bin():
    p = float(entropy.gmm_bin_prob(0, 0, _prior(np.ones(1), np.zeros((1, 2)), np.eye(2)[None])).data)
    ref = quad_bin_prob(0.0, 0.0, 1.0) ** 2
    return p, f"{ref:.10f} ± 1e-10", abs(p - ref) < 1e-10


def check_gmm_correlated_mc(n: int = 10_000_000):
    covs = np.array([[[1.0, 0.9], [0.9, 1.0]]])
    p = float(entropy.gmm_bin_prob(0, 0, _prior(np.ones(1), np.zeros((1, 2)), covs)).data)
    mc, se = mc_box_prob(np.ones(1), np.zeros((1, 2)), covs, 0.0, 0.0, n, np.random.default_rng(2024))
    z = abs(p - mc) / se
    return z, "< 3 standard errors", z < 3, f"quad {p:.6f} MC {mc:.6f}"


def check_joint_rate_identity():
    n_z = 64
    prior = entropy.JointHyperPrior.from_moments(np.ones((n_z, 1)), np.zeros((n_z, 1, 2)), np.tile(np.eye(2), (n_z, 1, 1, 1)))
    bits = float(entropy.joint_hyper_rate_bits(np.zeros(n_z), np.zeros(n_z), prior).data)
    ref = -n_z * math.log2(quad_bin_prob(0.0, 0.0, 1.0) ** 2)
    ok = abs(bits - ref) < 1e-7 and abs(bits / n_z - 2.7697) < 1e-4
    return bits / n_z, "2.7697 per index", ok


def check_subadditivity(n: int = 20000):
    covs = np.array([[[1.5, 0.9 * 1.5], [0.9 * 1.5, 1.5]]])
    w, means = np.ones(1), np.zeros((1, 2))
    draws = np.round(next(sample_mixture(w, means, covs, n, np.random.default_rng(5))))
    prior = entropy.JointHyperPrior.from_moments(np.ones((n, 1)), np.zeros((n, 1, 2)), np.repeat(covs[None], n, 0))
    joint = float(entropy.joint_hyper_rate_bits(draws[:, 0], draws[:, 1], prior).data) / n
    m1, m2 = prior.marginal(1), prior.marginal(2)
    indep = float(entropy.independent_hyper_rate_bits(draws[:, 0], draws[:, 1], m1, m2).data) / n
    return joint - indep, "joint − independent ≤ 0 bits", joint <= indep, f"joint {joint:.4f} vs {indep:.4f}"


def mmse_mc_case(w, means, covs, z1: float, n: int = 10_000_000, seed: int = 3):
    prior = _prior(w, means, covs)
    est = float(entropy.mmse_estimate(np.array([z1]), prior)[0])
    mc, se, count = mc_conditional_mean(w, means, covs, z1, n, np.random.default_rng(seed))
    return est, mc, se, count


def check_mmse_mc(n: int = 10_000_000):
    w = np.array([0.4, 0.6])
    means = np.array([[-1.0, 1.0], [1.0, -0.5]])
    covs = np.array([[[1.0, 0.7], [0.7, 1.5]], [[0.8, -0.4], [-0.4, 1.0]]])
    est, mc, se, count = mmse_mc_case(w, means, covs, 0.5, n)
    z = abs(est - mc) / se
    return z, "< 3 standard errors", z < 3, f"closed form {est:.5f} MC {mc:.5f} from {count} draws"


def check_mmse_optimality(n: int = 100_000):
    rho = 0.8
    covs = np.array([[[1.0, rho], [rho, 1.0]]])
    draws = next(sample_mixture(np.ones(1), np.zeros((1, 2)), covs, n, np.random.default_rng(9)))
    prior = _prior(np.ones(1), np.zeros((1, 2)), covs)
    est = np.array([entropy.mmse_estimate(draws[:, 0], prior)]).ravel()
    gap = float(np.mean(draws[:, 1] ** 2) - np.mean((draws[:, 1] - est) ** 2))
    rel = abs(gap - rho ** 2) / rho ** 2
    return gap, f"ρ²Σ₂₂ = {rho ** 2} within 5%", rel < 0.05


def check_marginal_bin():
    prior = entropy.MarginalHyperPrior.from_moments(np.ones((1, 1)), np.zeros((1, 1)), np.ones((1, 1)))
    p = float(entropy.marginal_bin_prob_all(np.zeros(1), prior).data[0])
    ref = quad_bin_prob(0.0, 0.0, 1.0)
    return p, f"{ref:.10f} ± 1e-12", abs(p - ref) < 1e-12


def check_jscc_grads():
    cases = gradient_cases()
    worst = max(grad_check(*cases[n](0), max_entries=GRAD_ENTRIES) for n in ("jscc.encode", "jscc.decode"))
    return worst, "< 1e-4", worst < 1e-4


def decode_smoke(steps: int = 200, seed: int = 0) -> tuple[float, float]:
    """Train encoder and decoder alone over a noiseless channel on one fixed batch."""
    from .training import Adam

    rng = np.random.default_rng(seed)
    rates = RateSet(V=(2, 4, 8), eta=0.2)
    enc, dec, tok = JSCCEncoder(1, 8, rates, rng), JSCCDecoder(1, 8, rates, rng), RateTokens(rates, 8, rng)
    y = rng.standard_normal((6, 8))
    alloc = RateAllocation(np.array([2, 4, 8, 2, 4, 8]), np.array([4, 4, 4, 4, 4, 4]))
    chan = channel_mod.ChannelConfig(snr_db=channel_mod.NOISELESS)
    opt = Adam(enc.parameters() + dec.parameters() + tok.parameters())
    errs = []
    for step in range(steps):
        s = channel_mod.transmit(jscc.power_normalize(enc(y, alloc, tok)), chan, counter=step)
        y_hat = dec(s, alloc.k, alloc.k_star, tok)
        loss = mse(y, y_hat)
        errs.append(float(np.linalg.norm(y_hat.data - y)))
        loss.backward()
        opt.step(1e-2)
    return errs[0], errs[-1]


def check_decode_smoke():
    first, last = decode_smoke()
    return last, f"< initial {first:.4f}", last < first


def check_noise_variance():
    var = channel_mod.noise_variance(channel_mod.ChannelConfig(snr_db=3.0103, P=2.0))
    return var, "1.0000 ± 1e-4", abs(var - 1.0) < 1e-4


def check_channel_mc(n: int = 1_000_000):
    s = np.zeros((n, 2))
    cfg = channel_mod.ChannelConfig(snr_db=5.0, P=1.0, seed=0)
    noise = channel_mod.transmit(s, cfg).data
    var = float(np.mean(np.sum(noise ** 2, axis=1)))
    ratio = float(np.var(noise[:, 0]) / np.var(noise[:, 1]))
    ok = abs(var / 0.31623 - 1) < 0.01 and abs(ratio - 1) < 0.02
    return var, "0.3162 within 1%, re:im ratio 1 within 2%", ok, f"ratio {ratio:.4f}"


def check_msssim_inverted():
    rng = np.random.default_rng(0)
    x = _smooth(rng, (1, 48, 48))
    x = np.where(x < 0.5, 0.5 * x, 0.5 + 0.5 * x)  # push intensities away from mid-gray
    val = float(ms_ssim(x, 1.0 - x, 3).data)
    return val, "< 0.5", val < 0.5


def check_kl_noise(n: int = 1_000_000):
    cfg = channel_mod.ChannelConfig(snr_db=5.0, P=1.0, seed=1)
    rng = np.random.default_rng(1)
    s = jscc.power_normalize(rng.standard_normal((n, 2))).data
    s_hat = channel_mod.transmit(s, cfg).data
    z = rng.normal(0.0, 3.0, n)
    z_tilde = entropy.noisy_quantize(z, "train", rng).data
    report = kl_terms(_SyntheticRecord([s_hat - s], channel_mod.noise_variance(cfg), [z_tilde - z]), 0.01, 0.2)
    rel = abs(report.noise_var / report.noise_var_expected - 1)
    ok = rel < 0.02 and report.ks_uniform < 0.005
    return rel, "noise variance within 2%, KS < 0.005", ok, f"KS {report.ks_uniform:.5f}"


@dataclass
class _SyntheticRecord:
    channel_noise: list
    noise_var: float
    hyper_offsets: list
    breakdowns: list = field(default_factory=lambda: [total_loss(0.0, 0.0, 0.0, 0.0, 0.0, LossConfig())])


def check_lr_midpoint():
    from .training import TrainConfig, lr_at

    lr = lr_at(100, TrainConfig())
    return lr, "5.05e-5 ± 1e-15", abs(lr - 5.05e-5) < 1e-15


def check_adam_hand():
    from .diffcore import Parameter
    from .training import Adam

    theta = Parameter("theta", np.array([1.0]))
    (theta * theta).sum().backward()
    Adam([theta]).step(0.1)
    ref = 1.0 - 0.1 * 2.0 / (2.0 + 1e-8)
    return float(theta.data[0]), f"{ref:.12f}", abs(theta.data[0] - ref) < 1e-15


def training_smoke(epochs: int = 100, seed: int = 0):
    from .training import TrainConfig, train

    cfg = TrainConfig(epochs=epochs, seed=seed, lam=0.01)
    return train(cfg, SourceConfig(), [0, 1, 2, 3])


def check_training_smoke():
    res = training_smoke()
    first, last = res.epoch_log[0]["total"], res.epoch_log[-1]["total"]
    return last, f"< first epoch {first:.4f}", last < first


def check_capacity():
    c = awgn_capacity(5.0)
    return c, "2.0574 ± 1e-4", abs(c - 2.0574) < 1e-4


def check_rate_example():
    r = rate_per_pixel(128, 64, awgn_capacity(5.0), 1, 16, 32)
    return r, "0.28038 ± 1e-5", abs(r - 0.28038) < 1e-5


def check_allocate_bruteforce(n: int = 10_000):
    bad, ties = 0, 0
    for rng_bits, eta, V in allocation_draws(n):
        got = int(jscc.allocate(np.array([rng_bits]), RateSet(V=V, eta=eta))[0])
        want = brute_force_allocate(rng_bits, eta, V)
        bad += got != want
    return float(bad), "0 disagreements", bad == 0


def allocation_draws(n: int, seed: int = 0):
    """Random (bits, η, V) triples; a third of them land exactly on midpoints."""
    rng = np.random.default_rng(seed)
    for i in range(n):
        q = int(rng.integers(2, 8))
        V = tuple(sorted(rng.choice(np.arange(1, 65), size=q, replace=False).tolist()))
        if i % 3 == 0:
            eta = float(2.0 ** -rng.integers(0, 4))
            a = int(rng.integers(0, q - 1))
            bits = (V[a] + V[a + 1]) / 2.0 / eta
        else:
            eta = float(rng.uniform(0.05, 1.0))
            bits = float(rng.uniform(0, 1.2 * V[-1] / eta))
        yield bits, eta, V


# ---------------------------------------------------------------------------
# driver
# ---------------------------------------------------------------------------

ORACLES: list[tuple[str, str, Callable, bool]] = [
    ("attention_fd", "diffcore.attention", check_attention_fd, False),
    ("composite_fd", "diffcore.grad_check", check_composite_fd, False),
    ("source_uncorrelated", "sources.gen_correlated_pair", check_source_uncorrelated, False),
    ("transform_grads", "transforms.*", check_transform_grads, False),
    ("alignment_grads", "alignment.localize/sample", check_alignment_grads, False),
    ("grid_zoom", "alignment.make_grid", check_grid_zoom, False),
    ("translation_shift", "alignment.sample", check_translation_shift, False),
    ("uniform_moments", "entropy.noisy_quantize", check_uniform_moments, False),
    ("latent_bin_prob", "entropy.latent_bin_prob", check_latent_bin_prob, False),
    ("latent_rate_bits", "entropy.latent_rate_bits", check_latent_rate, False),
    ("gmm_density_integral", "entropy.gmm_density", check_gmm_density_integral, False),
    ("gmm_identity_bin", "entropy.gmm_bin_prob", check_gmm_identity_bin, False),
    ("gmm_correlated_mc", "entropy.gmm_bin_prob", check_gmm_correlated_mc, True),
    ("joint_rate_identity", "entropy.joint_hyper_rate_bits", check_joint_rate_identity, False),
    ("subadditivity", "entropy.joint_hyper_rate_bits", check_subadditivity, False),
    ("mmse_mc", "entropy.mmse_estimate", check_mmse_mc, True),
    ("mmse_optimality", "entropy.mmse_estimate", check_mmse_optimality, False),
    ("marginal_bin", "entropy.independent_hyper_rate_bits", check_marginal_bin, False),
    ("jscc_grads", "jscc.encode/decode", check_jscc_grads, False),
    ("decode_smoke", "jscc.decode", check_decode_smoke, True),
    ("noise_variance", "channel.noise_variance", check_noise_variance, False),
    ("channel_mc", "channel.transmit", check_channel_mc, False),
    ("msssim_inverted", "objective.ms_ssim", check_msssim_inverted, False),
    ("kl_noise", "objective.kl_terms", check_kl_noise, False),
    ("lr_midpoint", "training.lr_at", check_lr_midpoint, False),
    ("adam_hand", "training.adam_step", check_adam_hand, False),
    ("training_smoke", "training.train", check_training_smoke, True),
    ("capacity", "harness.awgn_capacity", check_capacity, False),
    ("rate_example", "harness.rate_per_pixel", check_rate_example, False),
    ("allocate_bruteforce", "jscc.allocate", check_allocate_bruteforce, False),
]


def oracle_check(quick: bool = False, only: list[str] | None = None) -> OracleReport:
    """Run the oracle suite. ``quick`` skips the slow Monte Carlo and training oracles."""
    report = OracleReport()
    for name, op, fn, slow in ORACLES:
        if only is not None and name not in only:
            continue
        if quick and slow:
            continue
        try:
            report.results.append(_timed(name, op, fn))
        except Exception as exc:  # a crashing oracle is a failing oracle
            report.results.append(CheckResult(name, op, float("nan"), "no exception", False, 0.0, repr(exc)))
    return report
