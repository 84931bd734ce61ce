"""Minimal define-by-run reverse-mode autodiff over numpy arrays.

Operations record onto the innermost active :class:`Tape` whenever one of
their inputs requires a gradient. Outside a tape every op is a plain numpy
computation, which is what inference and benchmarks use.
"""

from __future__ import annotations

import zlib
from typing import Callable, Optional, Sequence

import numpy as np

DEFAULT_DTYPE = np.float64


class DimensionError(ValueError):
    """Operand shapes do not conform."""


class TapeError(RuntimeError):
    pass


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "_tape", "_op")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = np.asarray(data)
        if dtype is not None:
            arr = arr.astype(dtype, copy=False)
        elif arr.dtype.kind != "f":
            arr = arr.astype(DEFAULT_DTYPE)
        self.data = arr
        self.requires_grad = requires_grad
        self.grad: Optional[np.ndarray] = None
        self._tape: Optional[Tape] = None
        self._op: Optional[str] = None

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
    def dtype(self):
        return self.data.dtype

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float(self.data)

    def zero_grad(self) -> None:
        self.grad = None

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
        if isinstance(other, (int, float)):
            return scale(self, other)
        return mul(self, other)

    def __rmul__(self, other):
        return self.__mul__(other)

    def __neg__(self):
        return scale(self, -1.0)

    def __truediv__(self, other):
        if not isinstance(other, (int, float)):
            raise TypeError("only division by a python scalar is supported")
        return scale(self, 1.0 / other)

    def __matmul__(self, other):
        return matmul(self, other)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        return transpose(self, axes or None)

    def sum(self):
        return sum_all(self)

    def mean(self):
        return mean_all(self)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


class _Node:
    __slots__ = ("out", "inputs", "vjp", "name")

    def __init__(self, out, inputs, vjp, name):
        self.out = out
        self.inputs = inputs
        self.vjp = vjp
        self.name = name


class Tape:
    """Ordered record of differentiable operations.

    Use as a context manager; one tape per training step. ``backward`` may
    be called once per tape.
    """

    _stack: list = []

    def __init__(self):
        self.nodes: list[_Node] = []
        self.leaves: dict[int, Tensor] = {}
        self.consumed = False

    def __enter__(self) -> "Tape":
        Tape._stack.append(self)
        return self

    def __exit__(self, *exc) -> None:
        Tape._stack.pop()

    @classmethod
    def current(cls) -> Optional["Tape"]:
        return cls._stack[-1] if cls._stack else None

    def first_nonfinite(self) -> Optional[str]:
        """Name of the first recorded op whose output holds NaN/Inf.

        The name is suffixed with "(non-finite input)" when the op merely
        propagated a bad leaf value rather than creating it.
        """
        for node in self.nodes:
            if not np.all(np.isfinite(node.out.data)):
                if all(np.all(np.isfinite(t.data)) for t in node.inputs):
                    return node.name
                return f"{node.name} (non-finite input)"
        return None


def record(out_data: np.ndarray, inputs: Sequence[Tensor], vjp: Callable, name: str) -> Tensor:
    """Wrap ``out_data`` in a Tensor and put it on the active tape if needed.

    ``vjp(g)`` must return one gradient (or None) per input.
    """
    out = Tensor(out_data, dtype=out_data.dtype)
    tape = Tape.current()
    if tape is None or not any(t.requires_grad for t in inputs):
        return out
    out.requires_grad = True
    out._tape = tape
    out._op = name
    for t in inputs:
        if t.requires_grad and t._tape is not tape:
            tape.leaves[id(t)] = t
    tape.nodes.append(_Node(out, tuple(inputs), vjp, name))
    return out


def backward(loss: Tensor) -> None:
    """Populate ``.grad`` on every requires-grad leaf that fed ``loss``."""
    if loss.size != 1:
        raise ValueError(f"backward needs a scalar loss, got shape {loss.shape}")
    tape = loss._tape
    if tape is None:
        raise TapeError("loss was not produced on a tape")
    if tape.consumed:
        raise TapeError("backward already ran on this tape; start a new Tape")
    tape.consumed = True

    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for node in reversed(tape.nodes):
        g = grads.pop(id(node.out), None)
        if g is None:
            continue
        for inp, gi in zip(node.inputs, node.vjp(g)):
            if gi is None or not inp.requires_grad:
                continue
            key = id(inp)
            if key in grads:
                grads[key] = grads[key] + gi
            else:
                grads[key] = gi
    for key, leaf in tape.leaves.items():
        g = grads.get(key)
        leaf.grad = np.zeros_like(leaf.data) if g is None else np.asarray(g).reshape(leaf.shape)
    # nodes reference outputs that reference the tape; drop them now rather
    # than waiting for the cycle collector
    tape.nodes.clear()


# ---------------------------------------------------------------------------
# linear ops

def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


def _broadcast_shape(a: Tensor, b: Tensor, op: str) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise DimensionError(f"{op}: shapes {a.shape} and {b.shape} do not broadcast") from None


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a, b, "add")
    sa, sb = a.shape, b.shape
    return record(a.data + b.data, (a, b),
                  lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)), "add")


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a, b, "sub")
    sa, sb = a.shape, b.shape
    return record(a.data - b.data, (a, b),
                  lambda g: (_unbroadcast(g, sa), _unbroadcast(-g, sb)), "sub")


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a, b, "mul")
    ad, bd = a.data, b.data

    def vjp(g):
        return (_unbroadcast(g * bd, ad.shape) if a.requires_grad else None,
                _unbroadcast(g * ad, bd.shape) if b.requires_grad else None)

    return record(ad * bd, (a, b), vjp, "mul")


def scale(a: Tensor, c: float) -> Tensor:
    c = float(c)
    return record(a.data * c, (a,), lambda g: (g * c,), "scale")


def matmul(a, b) -> Tensor:
    """Matrix product over the last two axes, numpy-style batching."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul: shapes {a.shape} and {b.shape} are not aligned")
    ad, bd = a.data, b.data

    def vjp(g):
        ga = gb = None
        if a.requires_grad:
            ga = _unbroadcast(g @ np.swapaxes(bd, -1, -2), ad.shape)
        if b.requires_grad:
            if bd.ndim == 2:
                k = ad.shape[-1]
                gb = ad.reshape(-1, k).T @ g.reshape(-1, g.shape[-1])
            else:
                gb = _unbroadcast(np.swapaxes(ad, -1, -2) @ g, bd.shape)
        return ga, gb

    return record(ad @ bd, (a, b), vjp, "matmul")


def linear_ops(a, b, kind: str) -> Tensor:
    if kind == "matmul":
        return matmul(a, b)
    if kind == "add":
        return add(a, b)
    if kind == "sub":
        return sub(a, b)
    if kind == "mul_elementwise":
        return mul(a, b)
    if kind == "scale_by_scalar":
        return scale(as_tensor(a), float(b))
    raise ValueError(f"unknown linear op {kind!r}")


def sum_all(a: Tensor) -> Tensor:
    shape = a.shape
    return record(np.asarray(a.data.sum()), (a,), lambda g: (np.broadcast_to(g, shape),), "sum")


def mean_all(a: Tensor) -> Tensor:
    shape, n = a.shape, a.size
    return record(np.asarray(a.data.mean()), (a,),
                  lambda g: (np.broadcast_to(g / n, shape),), "mean")


def sum_lastdim(a: Tensor) -> Tensor:
    shape = a.shape
    return record(a.data.sum(axis=-1), (a,),
                  lambda g: (np.broadcast_to(g[..., None], shape),), "sum_lastdim")


def reshape(a: Tensor, shape: tuple) -> Tensor:
    old = a.shape
    return record(a.data.reshape(shape), (a,), lambda g: (g.reshape(old),), "reshape")


def transpose(a: Tensor, axes=None) -> Tensor:
    if axes is None:
        axes = tuple(reversed(range(a.ndim)))
    inv = tuple(np.argsort(axes))
    return record(np.ascontiguousarray(a.data.transpose(axes)), (a,),
                  lambda g: (np.ascontiguousarray(g.transpose(inv)),), "transpose")


# ---------------------------------------------------------------------------
# nonlinear ops

def sigmoid(x: Tensor) -> Tensor:
    # split by sign so exp never overflows
    d = x.data
    e = np.exp(-np.abs(d))
    y = np.where(d >= 0, 1.0 / (1.0 + e), e / (1.0 + e))
    # keep saturated values strictly inside (0, 1)
    fi = np.finfo(y.dtype)
    np.clip(y, fi.smallest_subnormal, 1.0 - fi.epsneg, out=y)
    return record(y, (x,), lambda g: (g * y * (1.0 - y),), "sigmoid")


_GELU_C = np.sqrt(2.0 / np.pi)


def gelu(x: Tensor) -> Tensor:
    """tanh-approximated GELU."""
    d = x.data
    d2 = d * d
    u = _GELU_C * d * (1.0 + 0.044715 * d2)
    th = np.tanh(u)
    y = 0.5 * d * (1.0 + th)

    def vjp(g):
        du = _GELU_C * (1.0 + 3 * 0.044715 * d2)
        return (g * (0.5 * (1.0 + th) + 0.5 * d * (1.0 - th ** 2) * du),)

    return record(y, (x,), vjp, "gelu")


def _check_lastdim(x: Tensor, op: str, minimum: int = 1) -> None:
    if x.ndim == 0 or x.shape[-1] < minimum:
        raise DimensionError(f"{op}: last dimension of {x.shape} must be >= {minimum}")


def softmax(x: Tensor) -> Tensor:
    _check_lastdim(x, "softmax")
    z = x.data - x.data.max(axis=-1, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=-1, keepdims=True)

    def vjp(g):
        return (y * (g - (g * y).sum(axis=-1, keepdims=True)),)

    return record(y, (x,), vjp, "softmax")


def layernorm(x: Tensor, eps: float = 1e-10) -> Tensor:
    """Normalize the last axis to zero mean, unit variance (no affine)."""
    _check_lastdim(x, "layernorm", 2)
    d = x.data
    mu = d.mean(axis=-1, keepdims=True)
    xc = d - mu
    inv = 1.0 / np.sqrt((xc * xc).mean(axis=-1, keepdims=True) + eps)
    xh = xc * inv

    def vjp(g):
        gm = g.mean(axis=-1, keepdims=True)
        gxm = (g * xh).mean(axis=-1, keepdims=True)
        return (inv * (g - gm - xh * gxm),)

    return record(xh, (x,), vjp, "layernorm")


def mse_mean(a: Tensor, b: Tensor) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.shape != b.shape:
        raise DimensionError(f"mse_mean: shapes {a.shape} and {b.shape} differ")
    diff = a.data - b.data
    n = diff.size

    def vjp(g):
        gd = (2.0 / n) * g * diff
        return gd, -gd

    return record(np.asarray((diff * diff).mean()), (a, b), vjp, "mse_mean")


def nonlinear_ops(x, kind: str, other=None) -> Tensor:
    table = {"sigmoid": sigmoid, "gelu": gelu, "softmax_lastdim": softmax,
             "layernorm_lastdim": layernorm}
    if kind == "mse_mean":
        return mse_mean(x, other)
    if kind not in table:
        raise ValueError(f"unknown nonlinear op {kind!r}")
    return table[kind](as_tensor(x))


# ---------------------------------------------------------------------------
# index ops

def _as_index(indices, n: int) -> np.ndarray:
    idx = np.asarray(indices, dtype=np.intp)
    if idx.size and (idx.min() < 0 or idx.max() >= n):
        bad = idx[(idx < 0) | (idx >= n)].reshape(-1)[0]
        raise IndexError(f"row index {int(bad)} out of range for {n} rows")
    return idx


def gather_rows(x: Tensor, indices) -> Tensor:
    """Rows of ``x`` (axis -2) in the given order.

    ``indices`` is either one index vector shared by all leading axes or an
    array shaped ``x.shape[:-2] + (k,)`` selecting per batch entry.
    """
    if x.ndim < 2:
        raise DimensionError(f"gather_rows needs >= 2 dims, got {x.shape}")
    n = x.shape[-2]
    idx = _as_index(indices, n)
    shape = x.shape
    if idx.ndim == 1:
        out = x.data[..., idx, :]
        unique = np.unique(idx).size == idx.size

        def vjp(g):
            gx = np.zeros(shape, dtype=g.dtype)
            if unique:
                gx[..., idx, :] = g
            else:
                np.add.at(gx, (Ellipsis, idx, slice(None)), g)
            return (gx,)
    else:
        if idx.shape[:-1] != shape[:-2]:
            raise DimensionError(f"gather_rows: index shape {idx.shape} vs tensor {shape}")
        take = idx[..., None]
        out = np.take_along_axis(x.data, take, axis=-2)

        def vjp(g):
            gx = np.zeros(shape, dtype=g.dtype)
            np.put_along_axis(gx, take, g, axis=-2)
            return (gx,)

    return record(out, (x,), vjp, "gather_rows")


def scatter_rows_into(base: Tensor, x: Tensor, indices) -> Tensor:
    """Copy of ``base`` with rows ``indices`` replaced by the rows of ``x``.

    Indices must be unique within each batch entry.
    """
    base, x = as_tensor(base), as_tensor(x)
    if base.shape[-1] != x.shape[-1] or base.shape[:-2] != x.shape[:-2]:
        raise DimensionError(f"scatter_rows_into: base {base.shape} vs rows {x.shape}")
    idx = _as_index(indices, base.shape[-2])
    out = base.data.copy()
    if idx.ndim == 1:
        if x.shape[-2] != idx.size:
            raise DimensionError(f"scatter_rows_into: {idx.size} indices for {x.shape[-2]} rows")
        out[..., idx, :] = x.data

        def vjp(g):
            gb = None
            if base.requires_grad:
                gb = g.copy()
                gb[..., idx, :] = 0.0
            return gb, g[..., idx, :]
    else:
        take = idx[..., None]
        np.put_along_axis(out, take, x.data, axis=-2)

        def vjp(g):
            gb = None
            if base.requires_grad:
                gb = g.copy()
                np.put_along_axis(gb, take, 0.0, axis=-2)
            return gb, np.take_along_axis(g, take, axis=-2)

    return record(out, (base, x), vjp, "scatter_rows_into")


def index_ops(x, indices, kind: str, base=None) -> Tensor:
    if kind == "gather_rows":
        return gather_rows(as_tensor(x), indices)
    if kind == "scatter_rows_into":
        return scatter_rows_into(base, x, indices)
    raise ValueError(f"unknown index op {kind!r}")


def take(x: Tensor, indices, axis: int = 0) -> Tensor:
    """``np.take`` with a 1-D index and a scatter-add gradient."""
    idx = _as_index(indices, x.shape[axis])
    if idx.ndim != 1:
        raise DimensionError(f"take expects a 1-D index, got shape {idx.shape}")
    shape = x.shape

    def vjp(g):
        gx = np.zeros(shape, dtype=g.dtype)
        np.add.at(np.moveaxis(gx, axis, 0), idx, np.moveaxis(g, axis, 0))
        return (gx,)

    return record(np.take(x.data, idx, axis=axis), (x,), vjp, "take")


def topk_indices(scores, k: int) -> np.ndarray:
    """Indices of the ``k`` largest scores along the last axis, ascending.

    Ties prefer the smaller index. Not differentiable. Accepts a 1-D score
    vector or a batch ``(..., N)``.
    """
    s = scores.data if isinstance(scores, Tensor) else np.asarray(scores)
    n = s.shape[-1]
    if not 0 <= k <= n:
        raise ValueError(f"k={k} outside [0, {n}]")
    if k == n:
        return np.broadcast_to(np.arange(n), s.shape).copy()
    # stable sort on -s keeps lower index first among equal scores
    order = np.argsort(-s, axis=-1, kind="stable")[..., :k]
    return np.sort(order, axis=-1)


# ---------------------------------------------------------------------------
# randomness

class Rng:
    """Counter-based (Philox) generator, splittable by stream name.

    ``Rng(seed).generator("noise", 12)`` always yields the same stream,
    independent of what other streams have drawn.
    """

    def __init__(self, seed: int):
        self.seed = int(seed) & 0xFFFFFFFFFFFFFFFF

    def generator(self, stream: str = "default", index: int = 0) -> np.random.Generator:
        key = np.array([self.seed, zlib.crc32(stream.encode())], dtype=np.uint64)
        counter = np.array([0, 0, 0, int(index)], dtype=np.uint64)
        return np.random.Generator(np.random.Philox(key=key, counter=counter))


# ---------------------------------------------------------------------------
# optimizer

def adamw_step(params: dict, grads: dict, state: dict, lr: float = 1e-3,
               weight_decay: float = 3e-2, betas=(0.9, 0.999), eps: float = 1e-8,
               decay_mask: Optional[dict] = None) -> None:
    """One decoupled-weight-decay Adam update, in place.

    ``params`` maps names to Tensors (or arrays), ``grads`` maps the same
    names to arrays. ``state`` holds ``step`` plus first/second moments and
    is created on the first call.
    """
    b1, b2 = betas
    if "m" not in state:
        state["step"] = 0
        state["m"] = {}
        state["v"] = {}
    state["step"] += 1
    step = state["step"]
    c1 = 1.0 - b1 ** step
    c2 = 1.0 - b2 ** step
    for name, p in params.items():
        arr = p.data if isinstance(p, Tensor) else p
        g = grads.get(name)
        if g is None:
            g = np.zeros_like(arr)
        if g.shape != arr.shape:
            raise DimensionError(f"adamw: param {name} {arr.shape} vs grad {g.shape}")
        m = state["m"].setdefault(name, np.zeros_like(arr))
        v = state["v"].setdefault(name, np.zeros_like(arr))
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * (g * g)
        wd = weight_decay if decay_mask is None or decay_mask.get(name, True) else 0.0
        if wd:
            arr *= 1.0 - lr * wd
        arr -= lr * (m / c1) / (np.sqrt(v / c2) + eps)
