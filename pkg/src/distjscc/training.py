"""Adam, the cosine learning-rate schedule, checkpoints and the training loop."""

from __future__ import annotations

import csv
import dataclasses
import io
import json
import logging
import math
import os
import struct
from dataclasses import dataclass, field

import numpy as np

from .channel import ChannelConfig
from .diffcore import NonFiniteError, Parameter
from .jscc import RateSet
from .model import DistributedCodec
from .objective import LossConfig
from .sources import SourceConfig, gen_correlated_pair
from .transforms import ModelConfig

log = logging.getLogger(__name__)

CHECKPOINT_MAGIC = b"DJSCCKPT"
CHECKPOINT_VERSION = 1
LOG_FIELDS = ("epoch", "lr", "d1", "d2", "r_y1", "r_y2", "r_z", "total")


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 200
    batch_size: int = 2
    lr_init: float = 1e-4
    lr_final: float = 1e-6
    snr_db: float = 5.0
    P: float = 1.0
    lam: float = 0.01
    eta: float = 0.2
    seed: int = 0
    mode: str = "joint"
    distortion: str = "mse"
    K: int = 3

    def __post_init__(self):
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")

    def loss_config(self) -> LossConfig:
        return LossConfig(lam=self.lam, eta=self.eta, distortion_kind=self.distortion)

    def channel_config(self) -> ChannelConfig:
        return ChannelConfig(snr_db=self.snr_db, P=self.P, seed=self.seed)


def lr_at(t: float, cfg: TrainConfig) -> float:
    """lr_final + ½(lr_init − lr_final)(1 + cos(tπ/epochs))."""
    if not 0 <= t <= cfg.epochs:
        raise ValueError(f"epoch {t} outside [0, {cfg.epochs}]")
    return cfg.lr_final + 0.5 * (cfg.lr_init - cfg.lr_final) * (1.0 + math.cos(t * math.pi / cfg.epochs))


class Adam:
    def __init__(self, params: list[Parameter], beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.params = list(params)
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.t = 0
        self.m = {id(p): np.zeros_like(p.data) for p in self.params}
        self.v = {id(p): np.zeros_like(p.data) for p in self.params}

    def step(self, lr: float) -> None:
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        c1 = 1.0 - b1 ** self.t
        c2 = 1.0 - b2 ** self.t
        for p in self.params:
            g = p.grad
            m, v = self.m[id(p)], self.v[id(p)]
            m *= b1
            m += (1.0 - b1) * g
            v *= b2
            v += (1.0 - b2) * g * g
            p.data -= lr * (m / c1) / (np.sqrt(v / c2) + self.eps)
            p.grad[...] = 0.0


def adam_step(opt: Adam, lr: float) -> None:
    opt.step(lr)


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------

def _pack_array(buf: io.BytesIO, arr: np.ndarray) -> None:
    arr = np.ascontiguousarray(arr, dtype="<f8")
    buf.write(struct.pack("<B", arr.ndim))
    buf.write(struct.pack(f"<{arr.ndim}Q", *arr.shape))
    buf.write(arr.tobytes())


def _unpack_array(view: memoryview, pos: int) -> tuple[np.ndarray, int]:
    (ndim,) = struct.unpack_from("<B", view, pos)
    pos += 1
    shape = struct.unpack_from(f"<{ndim}Q", view, pos)
    pos += 8 * ndim
    count = int(np.prod(shape)) if ndim else 1
    arr = np.frombuffer(view, dtype="<f8", count=count, offset=pos).reshape(shape).astype(np.float64)
    return arr, pos + 8 * count


def save_checkpoint(path: str | os.PathLike, model: DistributedCodec, opt: Adam, epoch: int, config: dict) -> None:
    """Versioned little-endian layout; parameters sorted by name."""
    buf = io.BytesIO()
    buf.write(CHECKPOINT_MAGIC)
    buf.write(struct.pack("<I", CHECKPOINT_VERSION))
    echo = json.dumps(config, sort_keys=True).encode("utf-8")
    buf.write(struct.pack("<I", len(echo)))
    buf.write(echo)
    buf.write(struct.pack("<QQ", epoch, opt.t))
    params = model.named_parameters()
    buf.write(struct.pack("<I", len(params)))
    for name in sorted(params):
        p = params[name]
        raw = name.encode("utf-8")
        buf.write(struct.pack("<H", len(raw)))
        buf.write(raw)
        _pack_array(buf, p.data)
        _pack_array(buf, opt.m[id(p)])
        _pack_array(buf, opt.v[id(p)])
    with open(path, "wb") as fh:
        fh.write(buf.getvalue())


def load_checkpoint(path: str | os.PathLike, model: DistributedCodec, opt: Adam | None = None) -> tuple[int, dict]:
    """Restore parameters (and optimizer state); returns (epoch, config echo)."""
    with open(path, "rb") as fh:
        data = fh.read()
    view = memoryview(data)
    if data[:8] != CHECKPOINT_MAGIC:
        raise ValueError("not a checkpoint file")
    (version,) = struct.unpack_from("<I", view, 8)
    if version != CHECKPOINT_VERSION:
        raise ValueError(f"unsupported checkpoint version {version}")
    (n_echo,) = struct.unpack_from("<I", view, 12)
    pos = 16
    config = json.loads(bytes(view[pos:pos + n_echo]).decode("utf-8"))
    pos += n_echo
    epoch, step = struct.unpack_from("<QQ", view, pos)
    pos += 16
    (count,) = struct.unpack_from("<I", view, pos)
    pos += 4
    params = model.named_parameters()
    if count != len(params):
        raise ValueError(f"checkpoint has {count} parameters, model has {len(params)}")
    for _ in range(count):
        (n_name,) = struct.unpack_from("<H", view, pos)
        pos += 2
        name = bytes(view[pos:pos + n_name]).decode("utf-8")
        pos += n_name
        value, pos = _unpack_array(view, pos)
        m, pos = _unpack_array(view, pos)
        v, pos = _unpack_array(view, pos)
        if name not in params:
            raise ValueError(f"unknown parameter {name!r} in checkpoint")
        p = params[name]
        if value.shape != p.shape:
            raise ValueError(f"shape mismatch for {name}: {value.shape} vs {p.shape}")
        p.data[...] = value
        if opt is not None:
            opt.m[id(p)][...] = m
            opt.v[id(p)][...] = v
    if opt is not None:
        opt.t = step
    return epoch, config


# ---------------------------------------------------------------------------
# training loop
# ---------------------------------------------------------------------------

class TrainingDiverged(NonFiniteError):
    pass


@dataclass
class TrainResult:
    model: DistributedCodec
    optimizer: Adam
    epoch_log: list[dict] = field(default_factory=list)
    step_losses: list[float] = field(default_factory=list)

    def write_csv(self, path: str | os.PathLike) -> None:
        with open(path, "w", newline="") as fh:
            writer = csv.DictWriter(fh, fieldnames=LOG_FIELDS)
            writer.writeheader()
            for row in self.epoch_log:
                writer.writerow({k: row[k] for k in LOG_FIELDS})


def build_model(cfg: TrainConfig, source: SourceConfig, model_cfg: ModelConfig | None = None,
                rates: RateSet | None = None) -> DistributedCodec:
    model_cfg = model_cfg or ModelConfig(C=source.C)
    rates = rates or RateSet(eta=cfg.eta)
    return DistributedCodec(model_cfg, (source.C, source.H, source.W), rates, mode=cfg.mode, K=cfg.K, seed=cfg.seed)


def config_echo(cfg: TrainConfig, source: SourceConfig, model_cfg: ModelConfig, rates: RateSet) -> dict:
    return {"train": dataclasses.asdict(cfg), "source": dataclasses.asdict(source),
            "model": dataclasses.asdict(model_cfg), "rates": {"V": list(rates.V), "eta": rates.eta}}


def train(cfg: TrainConfig, source: SourceConfig, train_ids: list[int], *, model: DistributedCodec | None = None,
          resume: str | os.PathLike | None = None, stop_epoch: int | None = None,
          checkpoint: str | os.PathLike | None = None, dump_dir: str | os.PathLike | None = None) -> TrainResult:
    """Optimize the codec over ``train_ids`` for ``cfg.epochs`` epochs.

    The learning rate is constant within an epoch. Batch order and every
    noise draw are keyed by (seed, epoch, step), so a run resumed from a
    checkpoint continues exactly as the uninterrupted run would.
    """
    if not train_ids:
        raise ValueError("training set is empty")
    model = model or build_model(cfg, source)
    opt = Adam(model.parameters())
    start = 0
    if resume is not None:
        start, _ = load_checkpoint(resume, model, opt)
    end = cfg.epochs if stop_epoch is None else min(stop_epoch, cfg.epochs)
    pairs = {i: gen_correlated_pair(source, i) for i in train_ids}
    loss_cfg, channel = cfg.loss_config(), cfg.channel_config()
    steps_per_epoch = math.ceil(len(train_ids) / cfg.batch_size)
    result = TrainResult(model, opt)

    for epoch in range(start, end):
        lr = lr_at(epoch, cfg)
        order = np.random.default_rng([cfg.seed, epoch, 11]).permutation(len(train_ids))
        sums = dict.fromkeys(LOG_FIELDS[2:], 0.0)
        count = 0
        for step in range(steps_per_epoch):
            batch_ids = [train_ids[i] for i in order[step * cfg.batch_size:(step + 1) * cfg.batch_size]]
            counter = epoch * steps_per_epoch + step
            batch = model.forward_batch([pairs[i] for i in batch_ids], train=True, channel=channel,
                                        loss_cfg=loss_cfg, counter=counter, seed=cfg.seed)
            loss_value = float(batch.loss.data)
            if not math.isfinite(loss_value):
                _dump(dump_dir, epoch, step, batch)
                raise TrainingDiverged(f"non-finite loss at epoch {epoch} step {step}: "
                                       f"{[b.values() for b in batch.breakdowns]}")
            batch.loss.backward()
            opt.step(lr)
            result.step_losses.append(loss_value)
            for bd in batch.breakdowns:
                for k, v in bd.values().items():
                    sums[k] += v
                count += 1
        row = {"epoch": epoch + 1, "lr": lr, **{k: v / count for k, v in sums.items()}}
        result.epoch_log.append(row)
        log.info("epoch %d lr %.3g total %.5f", epoch + 1, lr, row["total"])
    if checkpoint is not None:
        save_checkpoint(checkpoint, model, opt, end, config_echo(cfg, source, model.cfg, model.rates))
    return result


def _dump(dump_dir, epoch: int, step: int, batch) -> None:
    if dump_dir is None:
        return
    path = os.path.join(dump_dir, f"diverged_e{epoch}_s{step}.json")
    with open(path, "w") as fh:
        json.dump({"epoch": epoch, "step": step,
                   "breakdowns": [{k: repr(v) for k, v in b.values().items()} for b in batch.breakdowns]}, fh)
