"""Correlated image-pair sources and PGM/PPM file I/O."""

from __future__ import annotations

import math
import os
from dataclasses import dataclass

import numpy as np
from scipy.ndimage import map_coordinates, uniform_filter


@dataclass(frozen=True)
class SourceConfig:
    C: int = 1
    H: int = 16
    W: int = 32
    shared_gain: float = 1.0
    detail_gain: float = 0.05
    max_shift: float = 1.0
    max_rotation: float = 0.05
    smoothness: int = 2
    seed: int = 0
    downsample: int = 4

    def __post_init__(self):
        if min(self.C, self.H, self.W) < 1:
            raise ValueError("image extents must be positive")
        if self.H % self.downsample or self.W % self.downsample:
            raise ValueError(f"H and W must be divisible by {self.downsample}")
        if self.shared_gain < 0 or self.detail_gain < 0:
            raise ValueError("gains must be non-negative")


@dataclass
class ImagePair:
    x1: np.ndarray
    x2: np.ndarray
    pair_id: int

    def __post_init__(self):
        if self.x1.shape != self.x2.shape:
            raise ValueError("both views must share C, H, W")


FIELD_STD = 0.2


def _lowpass_field(rng: np.random.Generator, shape: tuple, radius: int) -> np.ndarray:
    """White noise averaged by two box filters, rescaled to std ``FIELD_STD``."""
    noise = rng.standard_normal(shape)
    if radius > 0:
        size = 2 * radius + 1
        field = uniform_filter(noise, size=(1, size, size), mode="wrap")
        field = uniform_filter(field, size=(1, size, size), mode="wrap")
    else:
        field = noise
    std = field.std()
    return FIELD_STD * field / std if std > 0 else field


def _warp(field: np.ndarray, shift: tuple[float, float], angle: float) -> np.ndarray:
    """Rotate about the image center and translate each channel; wrap at borders."""
    if shift == (0.0, 0.0) and angle == 0.0:
        return field.copy()
    _, h, w = field.shape
    yy, xx = np.meshgrid(np.arange(h, dtype=float), np.arange(w, dtype=float), indexing="ij")
    cy, cx = (h - 1) / 2.0, (w - 1) / 2.0
    cos, sin = math.cos(angle), math.sin(angle)
    src_y = cos * (yy - cy) - sin * (xx - cx) + cy - shift[0]
    src_x = sin * (yy - cy) + cos * (xx - cx) + cx - shift[1]
    return np.stack([map_coordinates(ch, [src_y, src_x], order=1, mode="grid-wrap") for ch in field])


def gen_correlated_pair(cfg: SourceConfig, index: int) -> ImagePair:
    """Draw view pair ``index``; a pure function of ``(cfg, index)``.

    Both views share a low-pass field S, each view warps it by its own small
    rotation/translation and adds an independent low-pass detail field:
    ``x_i = clip(0.5 + a * W_i(S) + b * D_i, 0, 1)``.
    """
    rng = np.random.default_rng([cfg.seed, index])
    shape = (cfg.C, cfg.H, cfg.W)
    shared = _lowpass_field(rng, shape, cfg.smoothness)
    views = []
    for _ in range(2):
        shift = (float(rng.uniform(-cfg.max_shift, cfg.max_shift)),
                 float(rng.uniform(-cfg.max_shift, cfg.max_shift)))
        angle = float(rng.uniform(-cfg.max_rotation, cfg.max_rotation))
        detail = _lowpass_field(rng, shape, cfg.smoothness)
        x = 0.5 + cfg.shared_gain * _warp(shared, shift, angle) + cfg.detail_gain * detail
        views.append(np.clip(x, 0.0, 1.0))
    return ImagePair(views[0], views[1], index)


def dataset(cfg: SourceConfig, n_train: int, n_test: int) -> tuple[list[int], list[int]]:
    if n_train < 1 or n_test < 1:
        raise ValueError("n_train and n_test must be >= 1")
    return list(range(n_train)), list(range(n_train, n_train + n_test))


# ---------------------------------------------------------------------------
# PGM / PPM
# ---------------------------------------------------------------------------

class ImageFormatError(ValueError):
    pass


def _read_token(buf: bytes, pos: int) -> tuple[bytes, int]:
    n = len(buf)
    while pos < n:
        if buf[pos:pos + 1] == b"#":
            while pos < n and buf[pos:pos + 1] not in (b"\n", b"\r"):
                pos += 1
        elif buf[pos:pos + 1].isspace():
            pos += 1
        else:
            break
    start = pos
    while pos < n and not buf[pos:pos + 1].isspace() and buf[pos:pos + 1] != b"#":
        pos += 1
    if start == pos:
        raise ImageFormatError("truncated header")
    return buf[start:pos], pos


def decode_netpbm(buf: bytes) -> np.ndarray:
    magic, pos = _read_token(buf, 0)
    if magic not in (b"P5", b"P6"):
        raise ImageFormatError(f"unsupported magic {magic!r}")
    fields = []
    for _ in range(3):
        tok, pos = _read_token(buf, pos)
        if not tok.isdigit():
            raise ImageFormatError(f"malformed header field {tok!r}")
        fields.append(int(tok))
    w, h, maxval = fields
    if maxval != 255 or w < 1 or h < 1:
        raise ImageFormatError("only 8-bit images with positive extents are supported")
    if pos >= len(buf) or not buf[pos:pos + 1].isspace():
        raise ImageFormatError("missing header terminator")
    pos += 1
    c = 1 if magic == b"P5" else 3
    need = w * h * c
    payload = buf[pos:pos + need]
    if len(payload) != need:
        raise ImageFormatError(f"truncated payload: expected {need} bytes, got {len(payload)}")
    pixels = np.frombuffer(payload, dtype=np.uint8).reshape(h, w, c)
    return np.transpose(pixels, (2, 0, 1)).astype(np.float64) / 255.0


def encode_netpbm(image: np.ndarray) -> bytes:
    image = np.asarray(image, dtype=np.float64)
    if image.ndim != 3 or image.shape[0] not in (1, 3):
        raise ImageFormatError("expected a C×H×W tensor with C in {1, 3}")
    c, h, w = image.shape
    q = np.floor(np.clip(image, 0.0, 1.0) * 255.0 + 0.5).astype(np.uint8)
    magic = b"P5" if c == 1 else b"P6"
    header = magic + b"\n%d %d\n255\n" % (w, h)
    return header + np.transpose(q, (1, 2, 0)).tobytes()


def read_image(path: str | os.PathLike) -> np.ndarray:
    with open(path, "rb") as fh:
        return decode_netpbm(fh.read())


def write_image(tensor: np.ndarray, path: str | os.PathLike) -> None:
    data = encode_netpbm(tensor)
    with open(path, "wb") as fh:
        fh.write(data)


def write_pair(pair: ImagePair, directory: str | os.PathLike) -> tuple[str, str]:
    ext = "pgm" if pair.x1.shape[0] == 1 else "ppm"
    paths = tuple(os.path.join(directory, f"pair_{pair.pair_id}_{i}.{ext}") for i in (1, 2))
    write_image(pair.x1, paths[0])
    write_image(pair.x2, paths[1])
    return paths
