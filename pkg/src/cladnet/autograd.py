"""Dense tensors with define-by-run reverse-mode differentiation.

Operations record themselves on the active :class:`GradTape` when at least one
input requires a gradient. Outside a tape every op is a plain numpy
computation, which is how evaluation and teacher forwards run.

    with GradTape() as tape:
        loss = (w * w).sum()
    grads = tape.backward(loss)
"""

from __future__ import annotations

import threading
from typing import Callable, Iterable, Sequence

import numpy as np

DEFAULT_DTYPE = np.float64

_state = threading.local()


class ShapeError(ValueError):
    """Raised when operand shapes are incompatible.

    ``dim`` names the offending dimension, ``expected``/``got`` carry sizes.
    """

    def __init__(self, op: str, dim: str, expected, got):
        self.op = op
        self.dim = dim
        self.expected = expected
        self.got = got
        super().__init__(f"{op}: dimension '{dim}' expected {expected}, got {got}")


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "name", "_from_tape", "__weakref__")
    # ndarray <op> Tensor must dispatch to Tensor's reflected operators
    __array_ufunc__ = None

    def __init__(self, data, requires_grad: bool = False, name: str | None = None, dtype=None):
        arr = np.asarray(data, dtype=dtype if dtype is not None else None)
        if not np.issubdtype(arr.dtype, np.floating):
            arr = arr.astype(DEFAULT_DTYPE)
        self.data = arr
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self.name = name
        self._from_tape = False

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def is_leaf(self) -> bool:
        return not self._from_tape

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(()))

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"

    # operator sugar
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return neg(self)

    def __pow__(self, exponent: float):
        return power(self, exponent)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return getitem(self, index)

    def sum(self, axis=None, keepdims: bool = False):
        return tsum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims: bool = False):
        return mean(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes or None)

    @property
    def T(self):
        return transpose(self, None)


class _Entry:
    __slots__ = ("out", "parents", "backward_fn")

    def __init__(self, out, parents, backward_fn):
        self.out = out
        self.parents = parents
        self.backward_fn = backward_fn


class GradTape:
    """Ordered record of differentiable operations.

    Entries are appended in creation order, so a reverse replay is a valid
    topological order. A tape can be replayed once.
    """

    def __init__(self):
        self.entries: list[_Entry] = []
        self.used = False
        self._prev = None

    def __enter__(self) -> "GradTape":
        self._prev = getattr(_state, "tape", None)
        _state.tape = self
        return self

    def __exit__(self, *exc) -> None:
        _state.tape = self._prev
        self._prev = None

    def __len__(self) -> int:
        return len(self.entries)

    def record(self, out: Tensor, parents: Sequence[Tensor], backward_fn: Callable) -> None:
        if self.used:
            raise RuntimeError("tape has already been replayed; run a new forward pass")
        out.requires_grad = True
        out._from_tape = True
        self.entries.append(_Entry(out, tuple(parents), backward_fn))

    def backward(self, loss: Tensor) -> dict[Tensor, np.ndarray]:
        """Replay the tape in reverse and return ``{leaf: gradient}``.

        Leaf tensors with ``requires_grad`` also get ``.grad`` set.
        """
        if self.used:
            raise RuntimeError("backward() already called on this tape")
        if loss.data.size != 1:
            raise ValueError(f"backward() needs a scalar loss, got shape {loss.shape}")
        self.used = True
        grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
        leaves: dict[int, Tensor] = {}
        for entry in reversed(self.entries):
            g = grads.pop(id(entry.out), None)
            if g is None:
                continue
            parent_grads = entry.backward_fn(g)
            for parent, pg in zip(entry.parents, parent_grads):
                if pg is None or not parent.requires_grad:
                    continue
                pg = _unbroadcast(pg, parent.shape)
                key = id(parent)
                if key in grads:
                    grads[key] = grads[key] + pg
                else:
                    grads[key] = pg
                if parent.is_leaf:
                    leaves[key] = parent
        result = {}
        for key, leaf in leaves.items():
            leaf.grad = grads[key]
            result[leaf] = grads[key]
        self.entries = []
        return result


def backward(tape: GradTape, loss: Tensor) -> dict[Tensor, np.ndarray]:
    return tape.backward(loss)


def current_tape() -> GradTape | None:
    return getattr(_state, "tape", None)


class no_grad:
    """Suspend recording inside an active tape."""

    def __enter__(self):
        self._prev = getattr(_state, "tape", None)
        _state.tape = None

    def __exit__(self, *exc):
        _state.tape = self._prev


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(np.asarray(x, dtype=DEFAULT_DTYPE))


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g.reshape(shape)


def _make(data: np.ndarray, parents: Iterable[Tensor], backward_fn: Callable) -> Tensor:
    out = Tensor(data)
    parents = tuple(parents)
    tape = current_tape()
    if tape is not None and any(p.requires_grad for p in parents):
        tape.record(out, parents, backward_fn)
    return out


# ---------------------------------------------------------------- elementwise


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return _make(a.data + b.data, (a, b), lambda g: (g, g))


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return _make(a.data - b.data, (a, b), lambda g: (g, -g))


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return _make(a.data * b.data, (a, b), lambda g: (g * b.data, g * a.data))


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = a.data / b.data
    return _make(out, (a, b), lambda g: (g / b.data, -g * out / b.data))


def neg(a) -> Tensor:
    a = as_tensor(a)
    return _make(-a.data, (a,), lambda g: (-g,))


def power(a, exponent: float) -> Tensor:
    a = as_tensor(a)
    return _make(a.data**exponent, (a,), lambda g: (g * exponent * a.data ** (exponent - 1),))


def exp(a) -> Tensor:
    a = as_tensor(a)
    out = np.exp(a.data)
    return _make(out, (a,), lambda g: (g * out,))


def log(a) -> Tensor:
    a = as_tensor(a)
    return _make(np.log(a.data), (a,), lambda g: (g / a.data,))


def sqrt(a) -> Tensor:
    a = as_tensor(a)
    out = np.sqrt(a.data)
    return _make(out, (a,), lambda g: (g * 0.5 / out,))


def relu(a) -> Tensor:
    a = as_tensor(a)
    mask = a.data > 0
    return _make(np.where(mask, a.data, 0.0), (a,), lambda g: (g * mask,))


def dropout(a, rate: float, rng: np.random.Generator | None, train: bool) -> Tensor:
    """Inverted dropout; identity when not training or ``rate == 0``."""
    a = as_tensor(a)
    if not train or rate <= 0.0:
        return a
    keep = (rng.random(a.shape) >= rate).astype(a.dtype) / (1.0 - rate)
    return mul(a, Tensor(keep))


# ----------------------------------------------------------------- reductions


def tsum(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    out = a.data.sum(axis=axis, keepdims=keepdims)

    def bw(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape).copy(),)

    return _make(np.asarray(out), (a,), bw)


def mean(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    count = a.data.size if axis is None else np.prod([a.shape[i] for i in np.atleast_1d(axis)])
    return tsum(a, axis=axis, keepdims=keepdims) * (1.0 / count)


# -------------------------------------------------------------------- shaping


def reshape(a, shape) -> Tensor:
    a = as_tensor(a)
    return _make(a.data.reshape(shape), (a,), lambda g: (g.reshape(a.shape),))


def transpose(a, axes=None) -> Tensor:
    a = as_tensor(a)
    if axes is None:
        axes = tuple(reversed(range(a.ndim)))
    inverse = tuple(np.argsort(axes))
    return _make(a.data.transpose(axes), (a,), lambda g: (g.transpose(inverse),))


def swapaxes(a, ax1: int, ax2: int) -> Tensor:
    a = as_tensor(a)
    axes = list(range(a.ndim))
    axes[ax1], axes[ax2] = axes[ax2], axes[ax1]
    return transpose(a, tuple(axes))


def getitem(a, index) -> Tensor:
    a = as_tensor(a)

    def bw(g):
        full = np.zeros_like(a.data)
        np.add.at(full, index, g)
        return (full,)

    return _make(a.data[index], (a,), bw)


def take(a, indices, axis: int) -> Tensor:
    a = as_tensor(a)
    indices = np.asarray(indices, dtype=np.intp)

    def bw(g):
        full = np.zeros_like(a.data)
        moved = np.moveaxis(full, axis, 0)
        np.add.at(moved, indices, np.moveaxis(g, axis, 0))
        return (full,)

    return _make(np.take(a.data, indices, axis=axis), (a,), bw)


def concat(tensors: Sequence, axis: int = -1) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    sizes = [t.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]

    def bw(g):
        return tuple(np.split(g, splits, axis=axis))

    return _make(np.concatenate([t.data for t in tensors], axis=axis), tensors, bw)


def stack(tensors: Sequence, axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]

    def bw(g):
        return tuple(np.moveaxis(g, axis, 0))

    return _make(np.stack([t.data for t in tensors], axis=axis), tensors, bw)


# --------------------------------------------------------------- linear algebra


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 1 or b.ndim < 1 or a.shape[-1] != b.shape[-2 if b.ndim > 1 else 0]:
        raise ShapeError("matmul", "inner", a.shape[-1], b.shape[-2 if b.ndim > 1 else 0])
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError("matmul", "ndim", ">=2", min(a.ndim, b.ndim))

    def bw(g):
        return (g @ np.swapaxes(b.data, -1, -2), np.swapaxes(a.data, -1, -2) @ g)

    return _make(a.data @ b.data, (a, b), bw)


# ------------------------------------------------------------------ neural ops


def softmax(a, axis: int = -1) -> Tensor:
    a = as_tensor(a)
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=axis, keepdims=True)

    def bw(g):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)

    return _make(out, (a,), bw)


def softmax_rows(m) -> Tensor:
    return softmax(m, axis=-1)


def log_softmax(a, axis: int = -1) -> Tensor:
    a = as_tensor(a)
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=axis, keepdims=True))
    out = shifted - lse
    probs = np.exp(out)

    def bw(g):
        return (g - probs * g.sum(axis=axis, keepdims=True),)

    return _make(out, (a,), bw)


def layer_norm(x, gain, bias, eps: float = 1e-5) -> Tensor:
    """Normalize over the last axis, then scale by ``gain`` and shift by ``bias``."""
    x, gain, bias = as_tensor(x), as_tensor(gain), as_tensor(bias)
    n = x.shape[-1]
    if gain.shape != (n,) or bias.shape != (n,):
        raise ShapeError("layer_norm", "features", n, (gain.shape, bias.shape))
    mu = x.data.mean(axis=-1, keepdims=True)
    centered = x.data - mu
    var = (centered**2).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = centered * inv
    out = xhat * gain.data + bias.data

    def bw(g):
        dxhat = g * gain.data
        dx = inv / n * (
            n * dxhat - dxhat.sum(axis=-1, keepdims=True) - xhat * (dxhat * xhat).sum(axis=-1, keepdims=True)
        )
        red = tuple(range(g.ndim - 1))
        return dx, (g * xhat).sum(axis=red), g.sum(axis=red)

    return _make(out, (x, gain, bias), bw)


def _conv_out_len(length: int, k: int, stride: int, padding: int) -> int:
    return (length + 2 * padding - k) // stride + 1


def conv1d(x, kernels, bias=None, stride: int = 1, padding: int = 0) -> Tensor:
    """1-D cross-correlation.

    ``x`` is ``[C_in, L]`` or ``[B, C_in, L]``; ``kernels`` is ``[C_out, C_in, k]``.
    """
    x, kernels = as_tensor(x), as_tensor(kernels)
    if kernels.ndim != 3:
        raise ShapeError("conv1d", "kernels.ndim", 3, kernels.ndim)
    unbatched = x.ndim == 2
    if x.ndim not in (2, 3):
        raise ShapeError("conv1d", "x.ndim", "2 or 3", x.ndim)
    c_out, c_in, k = kernels.shape
    if x.shape[-2] != c_in:
        raise ShapeError("conv1d", "channels_in", c_in, x.shape[-2])
    if stride < 1:
        raise ShapeError("conv1d", "stride", ">=1", stride)
    length = x.shape[-1]
    if k > length + 2 * padding:
        raise ShapeError("conv1d", "kernel_size", f"<= {length + 2 * padding}", k)
    if bias is not None:
        bias = as_tensor(bias)
        if bias.shape != (c_out,):
            raise ShapeError("conv1d", "bias", (c_out,), bias.shape)
    l_out = _conv_out_len(length, k, stride, padding)

    xd = x.data[None] if unbatched else x.data
    xp = np.pad(xd, ((0, 0), (0, 0), (padding, padding))) if padding else xd
    # cols: [B, L_out, C_in * k]
    win = np.lib.stride_tricks.sliding_window_view(xp, k, axis=-1)[:, :, ::stride, :]
    cols = win.transpose(0, 2, 1, 3).reshape(xd.shape[0], l_out, c_in * k)
    wmat = kernels.data.reshape(c_out, c_in * k)
    out = (cols @ wmat.T).transpose(0, 2, 1)
    if bias is not None:
        out = out + bias.data[None, :, None]
    if unbatched:
        out = out[0]

    def bw(g):
        gb = g[None] if unbatched else g
        gt = gb.transpose(0, 2, 1)  # [B, L_out, C_out]
        gw = np.einsum("blo,blc->oc", gt, cols).reshape(kernels.shape)
        gcols = (gt @ wmat).reshape(xd.shape[0], l_out, c_in, k)
        gxp = np.zeros_like(xp)
        span = stride * (l_out - 1) + 1
        for j in range(k):
            gxp[:, :, j : j + span : stride] += gcols[:, :, :, j].transpose(0, 2, 1)
        gx = gxp[:, :, padding : padding + length] if padding else gxp
        if unbatched:
            gx = gx[0]
        grads = [gx, gw]
        if bias is not None:
            grads.append(gb.sum(axis=(0, 2)))
        return tuple(grads)

    parents = (x, kernels) if bias is None else (x, kernels, bias)
    return _make(out, parents, bw)


def avg_pool1d(x, window: int, stride: int | None = None) -> Tensor:
    """Average pooling over the last axis."""
    x = as_tensor(x)
    stride = window if stride is None else stride
    length = x.shape[-1]
    if window < 1 or window > length:
        raise ShapeError("avg_pool1d", "window", f"1..{length}", window)
    l_out = (length - window) // stride + 1
    win = np.lib.stride_tricks.sliding_window_view(x.data, window, axis=-1)[..., ::stride, :]
    out = win.mean(axis=-1)

    def bw(g):
        gx = np.zeros_like(x.data)
        span = stride * (l_out - 1) + 1
        share = g / window
        for j in range(window):
            gx[..., j : j + span : stride] += share
        return (gx,)

    return _make(out, (x,), bw)
