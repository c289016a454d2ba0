"""Run configuration, rate accounting, evaluation and rate-distortion sweeps."""

from __future__ import annotations

import configparser
import csv
import dataclasses
import io
import math
import os
from dataclasses import dataclass, field

import numpy as np

from .channel import ChannelConfig, awgn_capacity
from .jscc import RateSet
from .model import MODES, DistributedCodec
from .objective import LossConfig, max_msssim_scales, ms_ssim, psnr
from .sources import SourceConfig, dataset, gen_correlated_pair
from .training import TrainConfig, build_model, load_checkpoint, train
from .transforms import ModelConfig

CSV_MODE_NAMES = {"joint": "joint-prior", "independent": "independent-prior",
                  "no_alignment": "no-alignment", "p2p": "point-to-point"}
CSV_HEADER = ("lambda", "mode", "seed", "r_user1", "r_user2", "psnr_1", "psnr_2", "msssim_1", "msssim_2")

# section -> key -> (type, default, help)
CONFIG_KEYS: dict[str, dict[str, tuple]] = {
    "source": {
        "C": (int, 1, "image channels"),
        "H": (int, 16, "image height"),
        "W": (int, 32, "image width"),
        "shared_gain": (float, 1.0, "weight of the field shared by both views"),
        "detail_gain": (float, 0.05, "weight of each view's private field"),
        "max_shift": (float, 1.0, "max translation per view, pixels"),
        "max_rotation": (float, 0.05, "max rotation per view, radians"),
        "smoothness": (int, 2, "box-filter radius of the random fields"),
        "seed": (int, 0, "source seed"),
        "n_train": (int, 8, "training pairs"),
        "n_test": (int, 8, "test pairs"),
    },
    "model": {
        "c_mid": (int, 16, "hidden width of the image transforms"),
        "c_lat": (int, 16, "latent channels (token width)"),
        "c_hyp": (int, 8, "hyper channels"),
        "c_hyp_mid": (int, 32, "hidden width of the hyper transforms"),
        "analysis_stages": (int, 2, "downsampling stages (factor 2 each)"),
        "K": (int, 3, "mixture components per hyper index"),
    },
    "rates": {
        "V": (lambda s: tuple(int(x) for x in s.split(",")), (2, 4, 8, 12, 16, 24, 32), "bandwidth set"),
        "eta": (float, 0.2, "channel uses per latent bit"),
    },
    "channel": {
        "snr_db": (float, 5.0, "SNR in dB (inf for noiseless)"),
        "P": (float, 1.0, "average power per complex symbol"),
    },
    "training": {
        "epochs": (int, 50, "epochs"),
        "batch_size": (int, 2, "pairs per step"),
        "lr_init": (float, 1e-4, "initial learning rate"),
        "lr_final": (float, 1e-6, "final learning rate"),
        "lam": (float, 0.01, "rate weight"),
        "seed": (int, 0, "model/noise seed"),
        "mode": (lambda s: mode_key(s), "joint", "joint-prior, independent-prior, no-alignment or point-to-point"),
        "distortion": (str, "mse", "mse or one_minus_msssim"),
    },
    "sweep": {
        "lambdas": (lambda s: tuple(float(x) for x in s.split(",")), (0.01,), "rate weights"),
        "seeds": (lambda s: tuple(int(x) for x in s.split(",")), (0, 1, 2), "seeds"),
        "modes": (lambda s: tuple(mode_key(x) for x in s.split(",")), MODES,
                  "modes: joint-prior, independent-prior, no-alignment, point-to-point"),
        "checkpoint_dir": (str, "checkpoints", "where sweep checkpoints live"),
        "train_inline": (lambda s: s.strip().lower() in ("1", "true", "yes"), True, "train missing points"),
    },
}


class ConfigError(ValueError):
    pass


def mode_key(name: str) -> str:
    """Internal mode key from either the internal or the CSV spelling."""
    name = name.strip()
    if name in CSV_MODE_NAMES:
        return name
    for key, label in CSV_MODE_NAMES.items():
        if name == label:
            return key
    raise ConfigError(f"unknown mode {name!r}")


@dataclass
class RunConfig:
    values: dict = field(default_factory=lambda: {s: {k: spec[1] for k, spec in keys.items()}
                                                  for s, keys in CONFIG_KEYS.items()})

    def __getitem__(self, section: str) -> dict:
        return self.values[section]

    def set(self, section: str, key: str, raw) -> None:
        if section not in CONFIG_KEYS:
            raise ConfigError(f"unknown section [{section}]")
        if key not in CONFIG_KEYS[section]:
            raise ConfigError(f"unknown key {key!r} in [{section}]")
        conv = CONFIG_KEYS[section][key][0]
        try:
            self.values[section][key] = conv(raw) if isinstance(raw, str) else raw
        except ValueError as exc:
            raise ConfigError(f"bad value for {section}.{key}: {raw!r}") from exc

    @classmethod
    def from_text(cls, text: str) -> "RunConfig":
        parser = configparser.ConfigParser(interpolation=None, delimiters=("=",))
        parser.optionxform = str
        parser.read_string(text)
        cfg = cls()
        for section in parser.sections():
            for key, raw in parser.items(section):
                cfg.set(section, key, raw)
        return cfg

    @classmethod
    def from_file(cls, path: str | os.PathLike) -> "RunConfig":
        with open(path, encoding="utf-8") as fh:
            return cls.from_text(fh.read())

    def override(self, dotted: str) -> None:
        """Apply ``section.key=value``."""
        if "=" not in dotted or "." not in dotted.split("=", 1)[0]:
            raise ConfigError(f"override must look like section.key=value, got {dotted!r}")
        lhs, value = dotted.split("=", 1)
        section, key = lhs.split(".", 1)
        self.set(section, key, value)

    def to_text(self) -> str:
        out = io.StringIO()
        for section, keys in self.values.items():
            out.write(f"[{section}]\n")
            for key, value in keys.items():
                if isinstance(value, tuple):
                    value = ",".join(str(v) for v in value)
                out.write(f"{key} = {value}\n")
            out.write("\n")
        return out.getvalue()

    # -- typed views -----------------------------------------------------
    def source(self) -> SourceConfig:
        s = self["source"]
        return SourceConfig(C=s["C"], H=s["H"], W=s["W"], shared_gain=s["shared_gain"],
                            detail_gain=s["detail_gain"], max_shift=s["max_shift"],
                            max_rotation=s["max_rotation"], smoothness=s["smoothness"], seed=s["seed"],
                            downsample=2 ** self["model"]["analysis_stages"])

    def model(self) -> ModelConfig:
        m = self["model"]
        return ModelConfig(C=self["source"]["C"], c_mid=m["c_mid"], c_lat=m["c_lat"], c_hyp=m["c_hyp"],
                           c_hyp_mid=m["c_hyp_mid"], analysis_stages=m["analysis_stages"])

    def rates(self) -> RateSet:
        return RateSet(V=self["rates"]["V"], eta=self["rates"]["eta"])

    def train_config(self, **changes) -> TrainConfig:
        t = self["training"]
        base = TrainConfig(epochs=t["epochs"], batch_size=t["batch_size"], lr_init=t["lr_init"],
                           lr_final=t["lr_final"], snr_db=self["channel"]["snr_db"], P=self["channel"]["P"],
                           lam=t["lam"], eta=self["rates"]["eta"], seed=t["seed"], mode=t["mode"],
                           distortion=t["distortion"], K=self["model"]["K"])
        return dataclasses.replace(base, **changes)

    def split(self) -> tuple[list[int], list[int]]:
        return dataset(self.source(), self["source"]["n_train"], self["source"]["n_test"])


def config_docs() -> str:
    lines = []
    for section, keys in CONFIG_KEYS.items():
        lines.append(f"[{section}]")
        for key, (_, default, doc) in keys.items():
            if isinstance(default, tuple):
                default = ",".join(str(v) for v in default)
            lines.append(f"  {key} = {default}    # {doc}")
    return "\n".join(lines)


# ---------------------------------------------------------------------------
# rate accounting
# ---------------------------------------------------------------------------

@dataclass
class RateReport:
    n: float
    hyper_bits: float
    capacity: float
    r: float
    note: str = "hyper_bits is the joint cost of both users and is counted in full for each user"


def rate_per_pixel(n: float, hyper_bits: float, capacity: float, C: int, H: int, W: int) -> float:
    """(n + hyper_bits / (2·capacity)) / (C·H·W) channel uses per pixel."""
    if capacity <= 0 or min(C, H, W) <= 0 or n < 0 or hyper_bits < 0:
        raise ValueError("rate_per_pixel needs positive capacity and extents")
    return (n + hyper_bits / (2.0 * capacity)) / (C * H * W)


def rate_report(n: float, hyper_bits: float, snr_db: float, shape: tuple[int, int, int]) -> RateReport:
    cap = awgn_capacity(snr_db)
    return RateReport(n, hyper_bits, cap, rate_per_pixel(n, hyper_bits, cap, *shape))


# ---------------------------------------------------------------------------
# evaluation
# ---------------------------------------------------------------------------

@dataclass
class EvalResult:
    mode: str
    r_user: tuple[float, float]
    psnr: tuple[float, float]
    msssim: tuple[float, float]
    n: tuple[float, float]
    hyper_bits: float
    per_pair: list[dict] = field(default_factory=list)

    @property
    def total_r(self) -> float:
        return self.r_user[0] + self.r_user[1]

    @property
    def mean_psnr(self) -> float:
        return 0.5 * (self.psnr[0] + self.psnr[1])


def evaluate(model: DistributedCodec, source: SourceConfig, test_ids: list[int], channel: ChannelConfig,
             lam: float = 0.01, eval_seed: int = 12345) -> EvalResult:
    """Rounded hyperpriors, fixed noise keyed by ``eval_seed``; metrics on clamped output."""
    shape = (source.C, source.H, source.W)
    cap = awgn_capacity(channel.snr_db) if math.isfinite(channel.snr_db) else math.inf
    channel = dataclasses.replace(channel, seed=eval_seed)
    loss_cfg = LossConfig(lam=lam, eta=model.rates.eta)
    scales = min(3, max_msssim_scales(source.H, source.W))
    rows = []
    for pid in test_ids:
        pair = gen_correlated_pair(source, pid)
        rec = model.forward_pair(pair.x1, pair.x2, train=False, channel=channel, loss_cfg=loss_cfg,
                                 pair_id=pid, seed=eval_seed)
        hyper_bits = float(rec.breakdown.r_z.data)
        row = {"pair": pid, "hyper_bits": hyper_bits}
        for i, (u, x) in enumerate(zip(rec.users, (pair.x1, pair.x2)), start=1):
            x_hat = np.clip(u.x_hat.data, 0.0, 1.0)
            row[f"n{i}"] = u.alloc.n
            # the full joint hyper cost is charged to each user
            row[f"r{i}"] = (rate_per_pixel(u.alloc.n, hyper_bits, cap, *shape) if math.isfinite(cap)
                            else u.alloc.n / float(np.prod(shape)))
            row[f"psnr{i}"] = psnr(x, x_hat)
            row[f"msssim{i}"] = float(ms_ssim(x, x_hat, scales).data) if scales else float("nan")
        rows.append(row)

    def avg(key):
        return float(np.mean([r[key] for r in rows]))

    return EvalResult(model.mode, (avg("r1"), avg("r2")), (avg("psnr1"), avg("psnr2")),
                      (avg("msssim1"), avg("msssim2")), (avg("n1"), avg("n2")), avg("hyper_bits"), rows)



# ---------------------------------------------------------------------------
# sweeps
# ---------------------------------------------------------------------------

@dataclass
class SweepPoint:
    lam: float
    mode: str
    seed: int
    result: EvalResult
    train_log: list[dict] = field(default_factory=list)

    def csv_row(self) -> dict:
        r = self.result
        return {"lambda": self.lam, "mode": CSV_MODE_NAMES[self.mode], "seed": self.seed,
                "r_user1": r.r_user[0], "r_user2": r.r_user[1], "psnr_1": r.psnr[0], "psnr_2": r.psnr[1],
                "msssim_1": r.msssim[0], "msssim_2": r.msssim[1]}


def checkpoint_path(directory: str, mode: str, lam: float, seed: int) -> str:
    return os.path.join(directory, f"{mode}_lam{lam:g}_seed{seed}.ckpt")


def run_point(cfg: RunConfig, lam: float, mode: str, seed: int) -> SweepPoint:
    source = cfg.source()
    train_ids, test_ids = cfg.split()
    tcfg = cfg.train_config(lam=lam, mode=mode, seed=seed)
    model = build_model(tcfg, source, cfg.model(), cfg.rates())
    ckpt_dir = cfg["sweep"]["checkpoint_dir"]
    path = checkpoint_path(ckpt_dir, mode, lam, seed)
    log = []
    if os.path.exists(path):
        load_checkpoint(path, model)
    elif cfg["sweep"]["train_inline"]:
        os.makedirs(ckpt_dir, exist_ok=True)
        log = train(tcfg, source, train_ids, model=model, checkpoint=path).epoch_log
    else:
        raise FileNotFoundError(f"missing checkpoint {path}")
    result = evaluate(model, source, test_ids, tcfg.channel_config(), lam=lam)
    return SweepPoint(lam, mode, seed, result, log)


def rd_sweep(cfg: RunConfig, out: str | os.PathLike | io.TextIOBase | None = None) -> list[SweepPoint]:
    """Evaluate every (λ, mode, seed) point in order; write the CSV if ``out`` is given."""
    points = []
    for lam in cfg["sweep"]["lambdas"]:
        for mode in cfg["sweep"]["modes"]:
            for seed in cfg["sweep"]["seeds"]:
                points.append(run_point(cfg, lam, mode, seed))
    if out is not None:
        write_csv(points, out)
    return points


def write_csv(points: list[SweepPoint], out) -> None:
    if isinstance(out, (str, os.PathLike)):
        with open(out, "w", newline="") as fh:
            write_csv(points, fh)
        return
    writer = csv.DictWriter(out, fieldnames=CSV_HEADER)
    writer.writeheader()
    for p in points:
        writer.writerow(p.csv_row())
