"""Variable-rate mapping of latent tokens to channel symbols and back.

Each token j gets a bandwidth kʲ from the rate set V (nearest element to
η·bits). The encoder adds the rate tokens of its own bandwidth and of the
estimated bandwidth of the other user, runs one attention pass and projects
token j with the matrix reserved for kʲ to kʲ complex symbols. Symbols are
stored as an n×2 array of (re, im) pairs, token-major.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field

import numpy as np

from .diffcore import (
    Attention,
    Block,
    Linear,
    Parameter,
    Tensor,
    as_tensor,
    concat,
    sqrt,
    tsum,
)

TIE_TOL = 1e-9


@dataclass(frozen=True)
class RateSet:
    V: tuple[int, ...] = (2, 4, 8, 12, 16, 24, 32)
    eta: float = 0.2

    def __post_init__(self):
        v = tuple(int(x) for x in self.V)
        if len(v) < 2:
            raise ValueError("rate set needs at least two elements")
        if any(x <= 0 for x in v) or any(b <= a for a, b in zip(v, v[1:])):
            raise ValueError("rate set must be strictly increasing positive integers")
        if self.eta <= 0:
            raise ValueError("eta must be positive")
        object.__setattr__(self, "V", v)

    def index(self, k) -> np.ndarray:
        k = np.asarray(k)
        lookup = {v: i for i, v in enumerate(self.V)}
        try:
            return np.array([lookup[int(x)] for x in k.ravel()], dtype=int).reshape(k.shape)
        except KeyError as exc:
            raise ValueError(f"bandwidth {exc.args[0]} is not in the rate set {self.V}") from None


@dataclass
class RateAllocation:
    k: np.ndarray
    k_star: np.ndarray | None = None

    @property
    def n(self) -> int:
        return int(np.sum(self.k))


def allocate(bits, rates: RateSet) -> np.ndarray:
    """Nearest element of V to η·bits per token; ties go to the smaller element."""
    bits = np.asarray(bits, dtype=np.float64)
    if np.any(bits < 0):
        raise ValueError("bits must be non-negative")
    target = rates.eta * bits
    v = np.asarray(rates.V, dtype=np.float64)
    dist = np.abs(target[..., None] - v)
    best = dist.min(axis=-1, keepdims=True)
    # first index within tolerance of the minimum == smallest tied element
    choice = np.argmax(dist <= best + TIE_TOL, axis=-1)
    return v[choice].astype(int)


class RateTokens(Block):
    """Learned rate embeddings, one table per user, indexed by position in V."""

    def __init__(self, rates: RateSet, c: int, rng: np.random.Generator, name: str = "rate_tokens"):
        super().__init__()
        self.rates = rates
        q = len(rates.V)
        self.tables = {1: Parameter(f"{name}.user1", 0.1 * rng.standard_normal((q, c))),
                       2: Parameter(f"{name}.user2", 0.1 * rng.standard_normal((q, c)))}
        self.cross_calls = 0

    def lookup(self, user: int, k) -> Tensor:
        return self.tables[user][self.rates.index(k)]

    def condition(self, x, own_user: int, k_own, k_other=None) -> Tensor:
        x = as_tensor(x) + self.lookup(own_user, k_own)
        if k_other is not None:
            self.cross_calls += 1
            x = x + self.lookup(3 - own_user, k_other)
        return x


def _token_layout(k: np.ndarray, V: tuple[int, ...]):
    """Group tokens by bandwidth; return per-v token positions and the
    permutation from grouped symbol order to token-major order."""
    k = np.asarray(k, dtype=int)
    starts = np.concatenate([[0], np.cumsum(k)[:-1]])
    groups = []
    grouped_positions = []
    for v in V:
        tok = np.flatnonzero(k == v)
        if tok.size == 0:
            continue
        groups.append((v, tok))
        # token-major symbol slots held by this group, in group order
        grouped_positions.append((starts[tok, None] + np.arange(v)[None, :]).ravel())
    order = np.concatenate(grouped_positions) if grouped_positions else np.zeros(0, dtype=int)
    inverse = np.empty_like(order)
    inverse[order] = np.arange(order.size)
    return groups, order, inverse


class JSCCEncoder(Block):
    def __init__(self, user: int, c: int, rates: RateSet, rng: np.random.Generator, name: str | None = None):
        super().__init__()
        name = name or f"f_e{user}"
        self.user, self.c, self.rates = user, c, rates
        self.attn = Attention(f"{name}.attn", c, rng)
        self.proj = {v: Linear(f"{name}.W{v}", c, 2 * v, rng) for v in rates.V}

    def forward(self, y_tokens, alloc: RateAllocation, tokens: RateTokens) -> Tensor:
        y = as_tensor(y_tokens)
        l, c = y.shape
        k = np.asarray(alloc.k, dtype=int)
        if k.shape != (l,) or (alloc.k_star is not None and np.shape(alloc.k_star) != (l,)):
            raise ValueError("allocation length must equal the token count")
        self.rates.index(k)
        h = self.attn(tokens.condition(y, self.user, k, alloc.k_star))
        groups, _, inverse = _token_layout(k, self.rates.V)
        parts = [self.proj[v](h[tok]).reshape(-1, 2) for v, tok in groups]
        grouped = concat(parts, axis=0)
        return grouped[inverse]


class JSCCDecoder(Block):
    def __init__(self, user: int, c: int, rates: RateSet, rng: np.random.Generator, name: str | None = None):
        super().__init__()
        name = name or f"f_d{user}"
        self.user, self.c, self.rates = user, c, rates
        self.proj = {v: Linear(f"{name}.W{v}", 2 * v, c, rng) for v in rates.V}
        self.attn = Attention(f"{name}.attn", c, rng)

    def forward(self, s_hat, k_own, k_other, tokens: RateTokens) -> Tensor:
        s_hat = as_tensor(s_hat)
        k_own = np.asarray(k_own, dtype=int)
        if s_hat.shape != (int(k_own.sum()), 2):
            raise ValueError(f"received {s_hat.shape[0]} symbols, allocation needs {int(k_own.sum())}")
        l = k_own.size
        groups, order, _ = _token_layout(k_own, self.rates.V)
        grouped = s_hat[order]
        outs, pos, token_order = [], 0, []
        for v, tok in groups:
            block = grouped[pos:pos + tok.size * v].reshape(tok.size, 2 * v)
            pos += tok.size * v
            outs.append(self.proj[v](block))
            token_order.append(tok)
        stacked = concat(outs, axis=0)
        perm = np.empty(l, dtype=int)
        perm[np.concatenate(token_order)] = np.arange(l)
        x = stacked[perm]
        return self.attn(tokens.condition(x, self.user, k_own, k_other))


def encode(encoder: JSCCEncoder, y_tokens, alloc: RateAllocation, tokens: RateTokens) -> Tensor:
    return encoder(y_tokens, alloc, tokens)


def decode(decoder: JSCCDecoder, s_hat, alloc_own: RateAllocation, alloc_other: RateAllocation | None,
           tokens: RateTokens) -> Tensor:
    k_other = None if alloc_other is None else alloc_other.k
    return decoder(s_hat, alloc_own.k, k_other, tokens)


def power_normalize(s, P: float = 1.0) -> Tensor:
    """Scale so the mean complex-symbol power is exactly P."""
    s = as_tensor(s)
    energy = float(np.sum(s.data ** 2))
    if energy <= 0.0:
        raise ValueError("cannot normalize an all-zero symbol vector")
    n = s.shape[0]
    return s * (sqrt(tsum(s * s)) ** -1.0 * np.sqrt(n * P))


def mean_power(s) -> float:
    s = np.asarray(as_tensor(s).data)
    return float(np.sum(s ** 2) / s.shape[0])


# ---------------------------------------------------------------------------
# wire format: uint64 little-endian n, then 2n float64 little-endian (re, im)
# ---------------------------------------------------------------------------

def symbols_to_bytes(s) -> bytes:
    s = np.asarray(as_tensor(s).data, dtype="<f8")
    if s.ndim != 2 or s.shape[1] != 2:
        raise ValueError("symbols must be an n×2 array of (re, im)")
    return struct.pack("<Q", s.shape[0]) + s.tobytes()


def symbols_from_bytes(buf: bytes) -> np.ndarray:
    if len(buf) < 8:
        raise ValueError("missing length prefix")
    (n,) = struct.unpack_from("<Q", buf, 0)
    need = 8 + 16 * n
    if len(buf) != need:
        raise ValueError(f"expected {need} bytes for {n} symbols, got {len(buf)}")
    return np.frombuffer(buf, dtype="<f8", offset=8).reshape(n, 2).astype(np.float64)
