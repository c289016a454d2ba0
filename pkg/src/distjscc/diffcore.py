"""Small reverse-mode autodiff over float64 numpy arrays.

Every operation records its parents and a backward closure on the output
``Tensor``. ``Tensor.backward`` walks the recorded graph in reverse
topological order; leaf tensors that require gradients (inputs marked for
checking, and every ``Parameter``) accumulate into ``.grad``.

Blocks wrap a forward computation and expose ``backward(grad_out)`` that
consumes the graph of their last forward exactly once.
"""

from __future__ import annotations

import math
from typing import Callable, Iterable, Sequence

import numpy as np
from scipy.special import ndtr

DTYPE = np.float64


class GraphError(RuntimeError):
    """Raised on misuse of the differentiation graph."""


class NonFiniteError(FloatingPointError):
    """Raised when a computation produced NaN or infinity where it must not."""


def _as_array(value) -> np.ndarray:
    return np.asarray(value, dtype=DTYPE)


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum ``grad`` down to ``shape`` after numpy broadcasting."""
    if grad.shape == shape:
        return grad
    ndim_extra = grad.ndim - len(shape)
    if ndim_extra > 0:
        grad = grad.sum(axis=tuple(range(ndim_extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


class Tensor:
    """A dense float64 array that can take part in differentiation."""

    __array_priority__ = 100

    def __init__(self, data, requires_grad: bool = False, _parents: tuple = (), _backward=None):
        self.data = _as_array(data)
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = np.zeros_like(self.data) if requires_grad and not _parents else None
        self._parents = _parents
        self._backward = _backward

    # -- basic properties ------------------------------------------------
    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def is_leaf(self) -> bool:
        return not self._parents

    def numpy(self) -> np.ndarray:
        return self.data

    def detach(self) -> "Tensor":
        return Tensor(self.data.copy())

    def item(self) -> float:
        return float(self.data)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    def zero_grad(self) -> None:
        if self.grad is not None:
            self.grad[...] = 0.0

    # -- graph traversal -------------------------------------------------
    def backward(self, grad=None) -> None:
        """Propagate ``grad`` (default ones) back to every leaf."""
        if grad is None:
            grad = np.ones_like(self.data)
        grad = _as_array(grad)
        if grad.shape != self.shape:
            raise ValueError(f"gradient shape {grad.shape} does not match {self.shape}")

        order: list[Tensor] = []
        seen: set[int] = set()
        stack = [(self, False)]
        while stack:
            node, done = stack.pop()
            if done:
                order.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if p.requires_grad and id(p) not in seen:
                    stack.append((p, False))

        grads: dict[int, np.ndarray] = {id(self): grad}
        for node in reversed(order):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node.is_leaf:
                if node.grad is None:
                    node.grad = np.zeros_like(node.data)
                node.grad += g
                continue
            parent_grads = node._backward(g)
            for p, pg in zip(node._parents, parent_grads):
                if pg is None or not p.requires_grad:
                    continue
                key = id(p)
                if key in grads:
                    grads[key] = grads[key] + pg
                else:
                    grads[key] = pg

    # -- operator sugar --------------------------------------------------
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __pow__(self, exponent: float):
        return power(self, exponent)

    def __getitem__(self, index):
        return getitem(self, index)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes or None)


class Parameter(Tensor):
    """A named trainable leaf tensor."""

    def __init__(self, name: str, data):
        super().__init__(data, requires_grad=True)
        self.name = name

    def __repr__(self) -> str:
        return f"Parameter({self.name!r}, shape={self.shape})"


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(data, parents: Sequence[Tensor], backward) -> Tensor:
    req = any(p.requires_grad for p in parents)
    return Tensor(data, requires_grad=req, _parents=tuple(parents) if req else (), _backward=backward if req else None)


# ---------------------------------------------------------------------------
# elementwise arithmetic
# ---------------------------------------------------------------------------

def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return _make(a.data + b.data, (a, b),
                 lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return _make(a.data - b.data, (a, b),
                 lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)))


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return _make(a.data * b.data, (a, b),
                 lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)))


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = a.data / b.data
    return _make(out, (a, b),
                 lambda g: (_unbroadcast(g / b.data, a.shape), _unbroadcast(-g * out / b.data, b.shape)))


def power(a, exponent: float) -> Tensor:
    a = as_tensor(a)
    out = a.data ** exponent
    return _make(out, (a,), lambda g: (g * exponent * a.data ** (exponent - 1),))


def exp(a) -> Tensor:
    a = as_tensor(a)
    out = np.exp(a.data)
    return _make(out, (a,), lambda g: (g * out,))


def log(a) -> Tensor:
    a = as_tensor(a)
    return _make(np.log(a.data), (a,), lambda g: (g / a.data,))


def log2(a) -> Tensor:
    a = as_tensor(a)
    return _make(np.log2(a.data), (a,), lambda g: (g / (a.data * math.log(2.0)),))


def sqrt(a) -> Tensor:
    a = as_tensor(a)
    out = np.sqrt(a.data)
    return _make(out, (a,), lambda g: (g * 0.5 / out,))


def softplus(a) -> Tensor:
    a = as_tensor(a)
    out = np.logaddexp(0.0, a.data)
    sig = 0.5 * (1.0 + np.tanh(0.5 * a.data))
    return _make(out, (a,), lambda g: (g * sig,))


def leaky_relu(a, slope: float = 0.01) -> Tensor:
    a = as_tensor(a)
    scale = np.where(a.data > 0, 1.0, slope)
    return _make(a.data * scale, (a,), lambda g: (g * scale,))


def relu(a) -> Tensor:
    return leaky_relu(a, 0.0)


def clamp_min(a, floor: float) -> Tensor:
    """max(a, floor); zero gradient where the floor is active."""
    a = as_tensor(a)
    mask = a.data > floor
    return _make(np.where(mask, a.data, floor), (a,), lambda g: (g * mask,))


def normal_cdf(a) -> Tensor:
    a = as_tensor(a)
    pdf = np.exp(-0.5 * a.data ** 2) / math.sqrt(2.0 * math.pi)
    return _make(ndtr(a.data), (a,), lambda g: (g * pdf,))


def abs_(a) -> Tensor:
    a = as_tensor(a)
    sign = np.sign(a.data)
    return _make(np.abs(a.data), (a,), lambda g: (g * sign,))


def identity_grad(a, value) -> Tensor:
    """Return ``value`` in the forward pass; pass gradients to ``a`` unchanged.

    This is the straight-through rule used for rounding.
    """
    a = as_tensor(a)
    return _make(_as_array(value), (a,), lambda g: (g,))


# ---------------------------------------------------------------------------
# reductions and shape ops
# ---------------------------------------------------------------------------

def tsum(a, axis=None, keepdims=False) -> Tensor:
    a = as_tensor(a)
    out = a.data.sum(axis=axis, keepdims=keepdims)

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape).copy(),)

    return _make(out, (a,), backward)


def mean(a, axis=None, keepdims=False) -> Tensor:
    a = as_tensor(a)
    count = a.data.size if axis is None else np.prod([a.shape[i] for i in np.atleast_1d(axis)])
    return tsum(a, axis, keepdims) * (1.0 / count)


def reshape(a, shape) -> Tensor:
    a = as_tensor(a)
    return _make(a.data.reshape(shape), (a,), lambda g: (g.reshape(a.shape),))


def transpose(a, axes=None) -> Tensor:
    a = as_tensor(a)
    inv = None if axes is None else np.argsort(axes)
    return _make(np.transpose(a.data, axes), (a,), lambda g: (np.transpose(g, inv),))


def moveaxis(a, src: int, dst: int) -> Tensor:
    a = as_tensor(a)
    return _make(np.moveaxis(a.data, src, dst), (a,), lambda g: (np.moveaxis(g, dst, src),))


def getitem(a, index) -> Tensor:
    a = as_tensor(a)

    def backward(g):
        out = np.zeros_like(a.data)
        np.add.at(out, index, g)
        return (out,)

    return _make(a.data[index], (a,), backward)


def concat(tensors: Sequence, axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    sizes = [t.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]
    return _make(np.concatenate([t.data for t in tensors], axis=axis), tensors,
                 lambda g: tuple(np.split(g, splits, axis=axis)))


def stack(tensors: Sequence, axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    n = len(tensors)
    return _make(np.stack([t.data for t in tensors], axis=axis), tensors,
                 lambda g: tuple(np.take(g, i, axis=axis) for i in range(n)))


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)

    def backward(g):
        ga = g @ np.swapaxes(b.data, -1, -2) if b.ndim > 1 else np.multiply.outer(g, b.data)
        gb = np.swapaxes(a.data, -1, -2) @ g if a.ndim > 1 else np.multiply.outer(a.data, g)
        return _unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)

    return _make(a.data @ b.data, (a, b), backward)


def softmax(a, axis: int = -1) -> Tensor:
    a = as_tensor(a)
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=axis, keepdims=True)

    def backward(g):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)

    return _make(out, (a,), backward)


def check_finite(t: Tensor, what: str = "tensor") -> Tensor:
    if not np.all(np.isfinite(t.data)):
        raise NonFiniteError(f"non-finite values in {what}")
    return t


# ---------------------------------------------------------------------------
# resampling
# ---------------------------------------------------------------------------

def resample(grid, factor: int, direction: str = "down") -> Tensor:
    """Lossless space-to-depth (``down``) or depth-to-space (``up``) on c×h×w.

    Leading batch axes are allowed.
    """
    grid = as_tensor(grid)
    f = int(factor)
    *lead, c, h, w = grid.shape
    nl = len(lead)
    if direction == "down":
        if h % f or w % f:
            raise ValueError(f"extents {h}x{w} not divisible by {f}")
        x = grid.reshape(*lead, c, h // f, f, w // f, f)
        # (c, h', fy, w', fx) -> (c, fy, fx, h', w')
        perm = tuple(range(nl)) + tuple(nl + i for i in (0, 2, 4, 1, 3))
        return x.transpose(perm).reshape(*lead, c * f * f, h // f, w // f)
    if direction == "up":
        if c % (f * f):
            raise ValueError(f"channel count {c} not divisible by {f * f}")
        co = c // (f * f)
        x = grid.reshape(*lead, co, f, f, h, w)
        perm = tuple(range(nl)) + tuple(nl + i for i in (0, 3, 1, 4, 2))
        return x.transpose(perm).reshape(*lead, co, h * f, w * f)
    raise ValueError(f"unknown direction {direction!r}")


# ---------------------------------------------------------------------------
# blocks
# ---------------------------------------------------------------------------

class Block:
    """A differentiable computation with named parameters.

    ``__call__`` runs :meth:`forward` and remembers the output so that
    :meth:`backward` can push an upstream gradient through it exactly once.
    """

    def __init__(self) -> None:
        self._last_output: Tensor | None = None

    def forward(self, *inputs):  # pragma: no cover - abstract
        raise NotImplementedError

    def __call__(self, *inputs, **kwargs):
        out = self.forward(*inputs, **kwargs)
        self._last_output = out
        return out

    def backward(self, grad_output=None) -> None:
        if self._last_output is None:
            raise GraphError(f"{type(self).__name__}.backward called without a preceding forward")
        out, self._last_output = self._last_output, None
        if not isinstance(out, Tensor):
            raise GraphError("backward needs a single tensor output")
        out.backward(grad_output)

    def children(self) -> Iterable["Block"]:
        for value in vars(self).values():
            if isinstance(value, Block):
                yield value
            elif isinstance(value, (list, tuple)):
                yield from (v for v in value if isinstance(v, Block))
            elif isinstance(value, dict):
                yield from (v for v in value.values() if isinstance(v, Block))

    def own_parameters(self) -> list[Parameter]:
        found = []
        for value in vars(self).values():
            if isinstance(value, Parameter):
                found.append(value)
            elif isinstance(value, dict):
                found.extend(v for v in value.values() if isinstance(v, Parameter))
        return found

    def parameters(self) -> list[Parameter]:
        params = list(self.own_parameters())
        for child in self.children():
            params.extend(child.parameters())
        unique, seen = [], set()
        for p in params:
            if id(p) not in seen:
                seen.add(id(p))
                unique.append(p)
        return unique

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.zero_grad()


def init_weight(rng: np.random.Generator, m: int, n: int) -> np.ndarray:
    bound = math.sqrt(6.0 / (m + n))
    return rng.uniform(-bound, bound, size=(m, n))


class Linear(Block):
    """Affine map along the trailing axis."""

    def __init__(self, name: str, m: int, n: int, rng: np.random.Generator, zero_init: bool = False):
        super().__init__()
        self.m, self.n = m, n
        self.weight = Parameter(f"{name}.weight", np.zeros((m, n)) if zero_init else init_weight(rng, m, n))
        self.bias = Parameter(f"{name}.bias", np.zeros(n))

    def forward(self, x):
        return linear(x, self.weight, self.bias)


def linear(x, weight, bias) -> Tensor:
    x = as_tensor(x)
    if x.shape[-1] != weight.shape[0]:
        raise ValueError(f"trailing extent {x.shape[-1]} != weight rows {weight.shape[0]}")
    return matmul(x, weight) + bias


class LeakyReLU(Block):
    def __init__(self, slope: float = 0.01):
        super().__init__()
        self.slope = slope

    def forward(self, x):
        return leaky_relu(x, self.slope)


def nonlinearity(x, slope: float = 0.01) -> Tensor:
    return leaky_relu(x, slope)


class ChannelLinear(Block):
    """Linear map over the channel axis of a c×h×w grid (a 1×1 convolution)."""

    def __init__(self, name: str, c_in: int, c_out: int, rng: np.random.Generator):
        super().__init__()
        self.lin = Linear(name, c_in, c_out, rng)

    def forward(self, x):
        x = as_tensor(x)
        return moveaxis(self.lin(moveaxis(x, -3, -1)), -1, -3)


class Attention(Block):
    """Single-head self-attention over l tokens followed by a two-layer pointwise map.

    Both sub-layers are residual.
    """

    def __init__(self, name: str, c: int, rng: np.random.Generator, hidden: int | None = None, slope: float = 0.01):
        super().__init__()
        hidden = hidden or 2 * c
        self.c = c
        self.slope = slope
        self.q = Linear(f"{name}.q", c, c, rng)
        self.k = Linear(f"{name}.k", c, c, rng)
        self.v = Linear(f"{name}.v", c, c, rng)
        self.o = Linear(f"{name}.o", c, c, rng)
        self.ff1 = Linear(f"{name}.ff1", c, hidden, rng)
        self.ff2 = Linear(f"{name}.ff2", hidden, c, rng)
        self.last_weights: np.ndarray | None = None

    def forward(self, tokens):
        x = as_tensor(tokens)
        scores = matmul(self.q(x), transpose(self.k(x))) * (1.0 / math.sqrt(self.c))
        weights = softmax(scores, axis=-1)
        self.last_weights = weights.data
        h = x + self.o(matmul(weights, self.v(x)))
        return h + self.ff2(leaky_relu(self.ff1(h), self.slope))


class Lambda(Block):
    """Wrap a plain function of tensors as a parameter-free block."""

    def __init__(self, fn: Callable, params: Sequence[Parameter] = ()):
        super().__init__()
        self.fn = fn
        self._params = list(params)

    def own_parameters(self):
        return list(self._params)

    def forward(self, *inputs):
        return self.fn(*inputs)


# ---------------------------------------------------------------------------
# gradient checking
# ---------------------------------------------------------------------------

ABS_FLOOR = 1e-6


def _rel_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    # tensors whose gradient is zero (e.g. biases under softmax shift
    # invariance) are compared in absolute terms: round-off in the central
    # difference is ~1e-11 and would otherwise divide by itself
    diff = np.max(np.abs(analytic - numeric)) if analytic.size else 0.0
    scale = max(np.max(np.abs(analytic), initial=0.0), np.max(np.abs(numeric), initial=0.0))
    if scale < ABS_FLOOR:
        return float(diff)
    return float(diff / scale)


def grad_check(block, inputs, eps: float = 1e-5, seed: int = 0, max_entries: int | None = None,
               weighting: str = "random") -> float:
    """Largest relative error between analytic and central-difference gradients.

    The block output is scalarized as ``sum(w * out)``; ``w`` is a fixed
    random weighting (``weighting="random"``) or all ones (``"ones"``).
    Gradients are checked for every input array and every parameter.
    ``max_entries`` caps the entries probed per tensor (a seeded subset).
    """
    if not 1e-7 <= eps <= 1e-3:
        raise ValueError("eps must lie in [1e-7, 1e-3]")
    if isinstance(inputs, (np.ndarray, Tensor, float, int)):
        inputs = [inputs]
    arrays = [np.array(as_tensor(x).data, dtype=DTYPE) for x in inputs]
    rng = np.random.default_rng(seed)

    def run(arrs, track: bool):
        ts = [Tensor(a.copy(), requires_grad=track) for a in arrs]
        out = as_tensor(block(*ts))
        return ts, out

    _, out0 = run(arrays, False)
    if not np.all(np.isfinite(out0.data)):
        raise NonFiniteError("block output is not finite")
    w = rng.standard_normal(out0.shape) if weighting == "random" else np.ones(out0.shape)

    def scalar(arrs) -> float:
        _, out = run(arrs, False)
        val = float(np.sum(w * out.data))
        if not math.isfinite(val):
            raise NonFiniteError("non-finite value during finite differencing")
        return val

    params = block.parameters() if hasattr(block, "parameters") else []
    for p in params:
        p.zero_grad()
    ts, out = run(arrays, True)
    out.backward(w)
    if hasattr(block, "_last_output"):
        block._last_output = None
    analytic_inputs = [t.grad.copy() for t in ts]
    analytic_params = [p.grad.copy() for p in params]
    for p in params:
        p.zero_grad()

    def probe(shape):
        flat = np.arange(int(np.prod(shape)))
        if max_entries is not None and flat.size > max_entries:
            flat = rng.choice(flat, size=max_entries, replace=False)
        return flat

    worst = 0.0
    for i, arr in enumerate(arrays):
        idx = probe(arr.shape)
        num = np.zeros(idx.size)
        for n, flat_i in enumerate(idx):
            pos = np.unravel_index(flat_i, arr.shape)
            orig = arr[pos]
            arr[pos] = orig + eps
            fp = scalar(arrays)
            arr[pos] = orig - eps
            fm = scalar(arrays)
            arr[pos] = orig
            num[n] = (fp - fm) / (2 * eps)
        worst = max(worst, _rel_error(analytic_inputs[i].reshape(-1)[idx], num))
    for p, ga in zip(params, analytic_params):
        idx = probe(p.shape)
        num = np.zeros(idx.size)
        flat_view = p.data.reshape(-1)
        for n, flat_i in enumerate(idx):
            orig = flat_view[flat_i]
            flat_view[flat_i] = orig + eps
            fp = scalar(arrays)
            flat_view[flat_i] = orig - eps
            fm = scalar(arrays)
            flat_view[flat_i] = orig
            num[n] = (fp - fm) / (2 * eps)
        worst = max(worst, _rel_error(ga.reshape(-1)[idx], num))
    return worst
