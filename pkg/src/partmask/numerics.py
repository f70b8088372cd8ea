"""Float64 tensors with reverse-mode gradient accumulation.

The op set is exactly what the models in this package need: dense matmul,
stable softmax, pointwise arithmetic and activations (with broadcasting of
per-channel vectors), same-padded 2-D convolution, box blur with replicate
padding, nearest-neighbour upsampling, row gather/scatter for token
selection, and reductions. A result tensor records its parents and a
pullback closure; `backward` walks the graph once in reverse topological
order and accumulates into `.grad`. Grads persist until reset, so repeated
backward calls accumulate.

Also home to `Rng`, the splittable counter-based generator that every
stochastic component draws from.
"""

from __future__ import annotations

import math

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from scipy import special

from .errors import ConfigError, ContractError, ShapeError

_grad_enabled = True


class no_grad:
    """Context manager that suppresses graph construction (evaluation mode)."""

    def __enter__(self):
        global _grad_enabled
        self._prev = _grad_enabled
        _grad_enabled = False
        return self

    def __exit__(self, *exc):
        global _grad_enabled
        _grad_enabled = self._prev
        return False


class Tensor:
    """A dense float64 array plus optional gradient bookkeeping."""

    __slots__ = ("data", "requires_grad", "grad", "_parents", "_pullback")

    def __init__(self, data, requires_grad=False):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self._parents = ()
        self._pullback = None

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    @property
    def T(self):
        return transpose(self)

    def item(self):
        if self.data.size != 1:
            raise ShapeError(f"item() needs a one-element tensor, got shape {self.shape}")
        return float(self.data.reshape(()))

    def sum(self, axis=None, keepdims=False):
        return _reduce(self, axis, keepdims, mean=False)

    def mean(self, axis=None, keepdims=False):
        return _reduce(self, axis, keepdims, mean=True)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self):
        return transpose(self)

    def backward(self):
        backward(self)

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"

    # Arithmetic operators lift plain numbers and ndarrays to constants.
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

    def __pow__(self, exponent):
        return power(self, exponent)

    def __neg__(self):
        return self * -1.0

    def __matmul__(self, other):
        return matmul(self, other)


def _lift(value) -> Tensor:
    if isinstance(value, Tensor):
        return value
    return Tensor(value)


def _from_op(data, parents, pullback):
    out = Tensor(data)
    if _grad_enabled and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._pullback = pullback
    return out


def _unbroadcast(grad, shape):
    """Sum `grad` down to `shape` (adjoint of numpy broadcasting)."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, (g, s) in enumerate(zip(grad.shape, shape)) if s == 1 and g != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


def _broadcast_check(a, b, name):
    try:
        np.broadcast_shapes(a.data.shape, b.data.shape)
    except ValueError:
        raise ShapeError(f"{name}: shapes {a.data.shape} and {b.data.shape} do not broadcast") from None


# ---------------------------------------------------------------------------
# pointwise arithmetic


def add(a, b):
    a, b = _lift(a), _lift(b)
    _broadcast_check(a, b, "add")

    def pullback(g):
        return ((a, _unbroadcast(g, a.data.shape)), (b, _unbroadcast(g, b.data.shape)))

    return _from_op(a.data + b.data, (a, b), pullback)


def sub(a, b):
    a, b = _lift(a), _lift(b)
    _broadcast_check(a, b, "sub")

    def pullback(g):
        return ((a, _unbroadcast(g, a.data.shape)), (b, _unbroadcast(-g, b.data.shape)))

    return _from_op(a.data - b.data, (a, b), pullback)


def mul(a, b):
    """Hadamard product (also covers scaling by a constant)."""
    a, b = _lift(a), _lift(b)
    _broadcast_check(a, b, "mul")

    def pullback(g):
        return ((a, _unbroadcast(g * b.data, a.data.shape)), (b, _unbroadcast(g * a.data, b.data.shape)))

    return _from_op(a.data * b.data, (a, b), pullback)


def div(a, b):
    a, b = _lift(a), _lift(b)
    _broadcast_check(a, b, "div")

    def pullback(g):
        da = _unbroadcast(g / b.data, a.data.shape)
        db = _unbroadcast(-g * a.data / (b.data * b.data), b.data.shape)
        return ((a, da), (b, db))

    return _from_op(a.data / b.data, (a, b), pullback)


def scale(x, factor):
    """Multiply by a python float; kept as a named op for contract clarity."""
    return mul(x, float(factor))


def power(x, exponent):
    x = _lift(x)
    p = float(exponent)

    def pullback(g):
        return ((x, g * p * np.power(x.data, p - 1.0)),)

    return _from_op(np.power(x.data, p), (x,), pullback)


def tanh(x):
    x = _lift(x)
    y = np.tanh(x.data)

    def pullback(g):
        return ((x, g * (1.0 - y * y)),)

    return _from_op(y, (x,), pullback)


def sigmoid(x):
    x = _lift(x)
    y = special.expit(x.data)

    def pullback(g):
        return ((x, g * y * (1.0 - y)),)

    return _from_op(y, (x,), pullback)


def gelu(x):
    """Exact erf-based GELU."""
    x = _lift(x)
    cdf = 0.5 * (1.0 + special.erf(x.data / math.sqrt(2.0)))

    def pullback(g):
        pdf = np.exp(-0.5 * x.data * x.data) / math.sqrt(2.0 * math.pi)
        return ((x, g * (cdf + x.data * pdf)),)

    return _from_op(x.data * cdf, (x,), pullback)


# ---------------------------------------------------------------------------
# linear algebra, shape ops, reductions


def matmul(a, b):
    a, b = _lift(a), _lift(b)
    if a.data.ndim != 2 or b.data.ndim != 2:
        raise ShapeError(f"matmul needs 2-D operands, got {a.data.shape} and {b.data.shape}")
    if a.data.shape[1] != b.data.shape[0]:
        raise ShapeError(f"matmul: inner dimensions disagree: {a.data.shape} vs {b.data.shape}")

    def pullback(g):
        return ((a, g @ b.data.T), (b, a.data.T @ g))

    return _from_op(a.data @ b.data, (a, b), pullback)


def transpose(x):
    x = _lift(x)
    if x.data.ndim != 2:
        raise ShapeError(f"transpose needs a 2-D tensor, got shape {x.data.shape}")

    def pullback(g):
        return ((x, g.T),)

    return _from_op(x.data.T.copy(), (x,), pullback)


def reshape(x, shape):
    x = _lift(x)
    shape = tuple(int(s) for s in shape)
    try:
        data = x.data.reshape(shape)
    except ValueError:
        raise ShapeError(f"cannot reshape {x.data.shape} to {shape}") from None

    def pullback(g):
        return ((x, g.reshape(x.data.shape)),)

    return _from_op(data, (x,), pullback)


def _normalize_axes(axis, ndim):
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    axes = []
    for a in axis:
        if not -ndim <= a < ndim:
            raise ShapeError(f"axis {a} invalid for {ndim}-D tensor")
        axes.append(a % ndim)
    return tuple(sorted(set(axes)))


def _reduce(x, axis, keepdims, mean):
    x = _lift(x)
    axes = _normalize_axes(axis, x.data.ndim)
    count = 1
    for a in axes:
        count *= x.data.shape[a]
    data = x.data.sum(axis=axes, keepdims=keepdims)
    if mean:
        data = data / count

    def pullback(g):
        if not keepdims:
            for a in axes:
                g = np.expand_dims(g, a)
        g = np.broadcast_to(g, x.data.shape)
        return ((x, g / count if mean else g),)

    return _from_op(data, (x,), pullback)


def softmax(x, axis):
    """Numerically stable softmax; each slice along `axis` sums to one."""
    x = _lift(x)
    (ax,) = _normalize_axes(axis, x.data.ndim)
    shifted = x.data - x.data.max(axis=ax, keepdims=True)
    e = np.exp(shifted)
    y = e / e.sum(axis=ax, keepdims=True)

    def pullback(g):
        dot = (g * y).sum(axis=ax, keepdims=True)
        return ((x, (g - dot) * y),)

    return _from_op(y, (x,), pullback)


def concat(tensors, axis=0):
    tensors = [_lift(t) for t in tensors]
    if not tensors:
        raise ShapeError("concat needs at least one tensor")
    data = np.concatenate([t.data for t in tensors], axis=axis)
    sizes = [t.data.shape[axis] for t in tensors]
    offsets = np.cumsum([0] + sizes)

    def pullback(g):
        pieces = []
        for t, lo, hi in zip(tensors, offsets[:-1], offsets[1:]):
            index = [slice(None)] * g.ndim
            index[axis] = slice(lo, hi)
            pieces.append((t, g[tuple(index)]))
        return tuple(pieces)

    return _from_op(data, tuple(tensors), pullback)


def take_rows(x, indices):
    x = _lift(x)
    idx = np.asarray(indices, dtype=np.int64).reshape(-1)
    if idx.size and (idx.min() < 0 or idx.max() >= x.data.shape[0]):
        raise ShapeError(f"row index out of range for {x.data.shape[0]} rows")

    def pullback(g):
        dx = np.zeros_like(x.data)
        np.add.at(dx, idx, g)
        return ((x, dx),)

    return _from_op(x.data[idx], (x,), pullback)


def put_rows(base, indices, rows):
    """Copy of `base` with `rows` written at the given distinct row indices."""
    base, rows = _lift(base), _lift(rows)
    idx = np.asarray(indices, dtype=np.int64).reshape(-1)
    if np.unique(idx).size != idx.size:
        raise ContractError("put_rows indices must be distinct")
    if idx.size != rows.data.shape[0]:
        raise ShapeError(f"{idx.size} indices vs {rows.data.shape[0]} rows")
    if idx.size and (idx.min() < 0 or idx.max() >= base.data.shape[0]):
        raise ShapeError(f"row index out of range for {base.data.shape[0]} rows")
    data = base.data.copy()
    data[idx] = rows.data

    def pullback(g):
        gb = g.copy()
        gb[idx] = 0.0
        return ((base, gb), (rows, g[idx]))

    return _from_op(data, (base, rows), pullback)


def slice_rows(x, start, stop):
    x = _lift(x)

    def pullback(g):
        dx = np.zeros_like(x.data)
        dx[start:stop] = g
        return ((x, dx),)

    return _from_op(x.data[start:stop].copy(), (x,), pullback)


def slice_cols(x, start, stop):
    x = _lift(x)
    if x.data.ndim != 2:
        raise ShapeError(f"slice_cols needs a 2-D tensor, got shape {x.data.shape}")

    def pullback(g):
        dx = np.zeros_like(x.data)
        dx[:, start:stop] = g
        return ((x, dx),)

    return _from_op(x.data[:, start:stop].copy(), (x,), pullback)


def broadcast_rows(x, count):
    """Tile a (1, D) tensor into (count, D); gradient sums back over rows."""
    x = _lift(x)
    if x.data.ndim != 2 or x.data.shape[0] != 1:
        raise ShapeError(f"broadcast_rows needs shape (1, D), got {x.data.shape}")

    def pullback(g):
        return ((x, g.sum(axis=0, keepdims=True)),)

    return _from_op(np.broadcast_to(x.data, (count, x.data.shape[1])).copy(), (x,), pullback)


# ---------------------------------------------------------------------------
# spatial ops


def conv2d(x, w):
    """Same-padded cross-correlation: (C_in,H,W) x (C_out,C_in,k,k) -> (C_out,H,W).

    Zero fill at the borders; kernels must be square with odd size.
    """
    x, w = _lift(x), _lift(w)
    if x.data.ndim != 3 or w.data.ndim != 4:
        raise ShapeError(f"conv2d needs (C,H,W) and (O,C,k,k), got {x.data.shape} and {w.data.shape}")
    c_out, c_in, kh, kw = w.data.shape
    if kh != kw:
        raise ConfigError(f"conv2d kernels must be square, got {kh}x{kw}")
    if kh % 2 == 0:
        raise ConfigError(f"conv2d kernel size must be odd, got {kh}")
    if x.data.shape[0] != c_in:
        raise ShapeError(f"conv2d: input has {x.data.shape[0]} channels, kernel expects {c_in}")
    k, p = kh, kh // 2
    _, h, wid = x.data.shape
    xp = np.pad(x.data, ((0, 0), (p, p), (p, p)))
    win = sliding_window_view(xp, (k, k), axis=(1, 2))  # (C_in, H, W, k, k)
    out = np.einsum("oikl,ihwkl->ohw", w.data, win, optimize=True)

    def pullback(g):
        dw = np.einsum("ohw,ihwkl->oikl", g, win, optimize=True)
        dwin = np.einsum("ohw,oikl->ihwkl", g, w.data, optimize=True)
        dxp = np.zeros_like(xp)
        for dk in range(k):
            for dl in range(k):
                dxp[:, dk:dk + h, dl:dl + wid] += dwin[:, :, :, dk, dl]
        return ((x, dxp[:, p:p + h, p:p + wid]), (w, dw))

    return _from_op(out, (x, w), pullback)


def _edge_pad_adjoint(gp, pad):
    # adjoint of np.pad(..., mode="edge") on the last two axes
    c, hp, wp = gp.shape
    h, w = hp - 2 * pad, wp - 2 * pad
    rows = np.empty((c, h, wp))
    if h == 1:
        rows[:, 0] = gp.sum(axis=1)
    else:
        rows[:, 0] = gp[:, : pad + 1].sum(axis=1)
        rows[:, 1:h - 1] = gp[:, pad + 1: pad + h - 1]
        rows[:, h - 1] = gp[:, pad + h - 1:].sum(axis=1)
    out = np.empty((c, h, w))
    if w == 1:
        out[:, :, 0] = rows.sum(axis=2)
    else:
        out[:, :, 0] = rows[:, :, : pad + 1].sum(axis=2)
        out[:, :, 1:w - 1] = rows[:, :, pad + 1: pad + w - 1]
        out[:, :, w - 1] = rows[:, :, pad + w - 1:].sum(axis=2)
    return out


def box_blur2d(x, kernel_size):
    """Per-channel k x k box average with replicate padding on (C,H,W)."""
    x = _lift(x)
    if x.data.ndim != 3:
        raise ShapeError(f"box_blur2d needs (C,H,W), got {x.data.shape}")
    k = int(kernel_size)
    if k < 1 or k % 2 == 0:
        raise ConfigError(f"box blur kernel must be odd and positive, got {k}")
    if k == 1:
        return x
    p = k // 2
    _, h, w = x.data.shape
    xp = np.pad(x.data, ((0, 0), (p, p), (p, p)), mode="edge")
    win = sliding_window_view(xp, (k, k), axis=(1, 2))
    out = win.mean(axis=(3, 4))
    inv = 1.0 / (k * k)

    def pullback(g):
        gp = np.zeros_like(xp)
        gk = g * inv
        for dk in range(k):
            for dl in range(k):
                gp[:, dk:dk + h, dl:dl + w] += gk
        return ((x, _edge_pad_adjoint(gp, p)),)

    return _from_op(out, (x,), pullback)


def upsample_nearest2d(x, factor):
    x = _lift(x)
    if x.data.ndim != 3:
        raise ShapeError(f"upsample_nearest2d needs (C,H,W), got {x.data.shape}")
    f = int(factor)
    if f < 1:
        raise ConfigError(f"upsample factor must be >= 1, got {factor}")
    c, h, w = x.data.shape
    out = x.data.repeat(f, axis=1).repeat(f, axis=2)

    def pullback(g):
        return ((x, g.reshape(c, h, f, w, f).sum(axis=(2, 4))),)

    return _from_op(out, (x,), pullback)


# ---------------------------------------------------------------------------
# reverse pass


def _topo_order(root):
    order, seen, stack = [], set(), [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for parent in node._parents:
            if id(parent) not in seen:
                stack.append((parent, False))
    return order


def backward(loss):
    """Populate `.grad` on every requires_grad tensor reachable from `loss`.

    Repeated calls without a reset accumulate into existing grads.
    """
    if not isinstance(loss, Tensor):
        raise ContractError("backward needs a Tensor")
    if loss.data.size != 1:
        raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
    order = _topo_order(loss)
    upstream = {id(loss): np.ones_like(loss.data)}
    for node in reversed(order):
        g = upstream.pop(id(node), None)
        if g is None:
            continue
        if node.requires_grad:
            node.grad = g.copy() if node.grad is None else node.grad + g
        if node._pullback is None:
            continue
        for parent, pg in node._pullback(g):
            if not parent.requires_grad:
                continue
            key = id(parent)
            if key in upstream:
                upstream[key] = upstream[key] + pg
            else:
                upstream[key] = pg


def reset_grads(tensors):
    for t in tensors:
        t.grad = None


# ---------------------------------------------------------------------------
# deterministic randomness


class Rng:
    """Splittable counter-based generator (Philox under the hood).

    The same seed and call sequence reproduces bit-identical draws on any
    platform. `split(stream_id)` derives an independent substream addressed
    by an integer, so per-item work gets a stable stream regardless of
    iteration order.
    """

    def __init__(self, seed, _key=()):
        self.seed = int(seed)
        self._key = tuple(int(k) for k in _key)
        ss = np.random.SeedSequence(self.seed, spawn_key=self._key)
        self._gen = np.random.Generator(np.random.Philox(ss))

    def split(self, stream_id) -> "Rng":
        return Rng(self.seed, self._key + (int(stream_id),))

    def uniform(self, low=0.0, high=1.0, size=None):
        return self._gen.uniform(low, high, size)

    def normal(self, loc=0.0, scale=1.0, size=None):
        return self._gen.normal(loc, scale, size)

    def integers(self, low, high=None, size=None):
        return self._gen.integers(low, high, size)

    def shuffle(self, arr):
        """In-place Fisher-Yates shuffle; returns the array."""
        n = len(arr)
        if n < 2:
            return arr
        draws = self._gen.integers(0, np.arange(n, 1, -1))
        for t in range(n - 1):
            i = n - 1 - t
            j = int(draws[t])
            arr[i], arr[j] = arr[j], arr[i]
        return arr

    def permutation(self, n):
        return self.shuffle(np.arange(n, dtype=np.int64))

    def sample(self, pool, k):
        """Draw k items from pool uniformly without replacement."""
        arr = np.array(pool)
        if k > arr.size:
            raise ContractError(f"cannot sample {k} items from a pool of {arr.size}")
        self.shuffle(arr)
        return arr[:k]
