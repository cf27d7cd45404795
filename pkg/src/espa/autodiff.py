"""A small tape-based reverse-mode engine over float64 numpy arrays.

Operations record themselves on the active :class:`Tape` when at least one
input requires a gradient.  Without an active tape they run as plain numpy,
which is what inference and finite-difference checks use.

The vector-Jacobian products live in the ``VJP`` registry keyed by primitive
name, so a test can swap one out and confirm :func:`grad_check` notices.
"""

from __future__ import annotations

import struct
from collections import OrderedDict
from pathlib import Path
from typing import Callable, Iterator, Sequence

import numpy as np
import scipy.sparse as sp
from scipy.special import expit

LOG_CLAMP = (1e-12, 1.0 - 1e-12)


class DimensionError(ValueError):
    pass


class TapeStateError(RuntimeError):
    pass


class Tensor:
    __slots__ = ("data", "requires_grad", "name")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None) -> None:
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = requires_grad
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float("nan")

    def numpy(self) -> np.ndarray:
        return self.data

    def __repr__(self) -> str:
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}{tag})"


def constant(data) -> Tensor:
    return Tensor(data)


class Node:
    __slots__ = ("op", "out", "inputs", "ctx")

    def __init__(self, op: str, out: Tensor, inputs: tuple, ctx) -> None:
        self.op = op
        self.out = out
        self.inputs = inputs
        self.ctx = ctx


class Tape:
    """Ordered record of primitive applications for one backward pass."""

    _stack: list["Tape"] = []

    def __init__(self) -> None:
        self.nodes: list[Node] = []
        self.consumed = False

    def __enter__(self) -> "Tape":
        Tape._stack.append(self)
        return self

    def __exit__(self, *exc) -> None:
        Tape._stack.pop()

    def __len__(self) -> int:
        return len(self.nodes)

    def reset(self) -> None:
        self.nodes.clear()
        self.consumed = False

    @classmethod
    def active(cls) -> "Tape | None":
        return cls._stack[-1] if cls._stack else None


def _emit(op: str, value: np.ndarray, inputs: tuple, ctx=None) -> Tensor:
    needs = any(isinstance(t, Tensor) and t.requires_grad for t in inputs)
    out = Tensor(value, requires_grad=needs)
    tape = Tape.active()
    if needs and tape is not None:
        tape.nodes.append(Node(op, out, inputs, ctx))
    return out


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


def _broadcast_shape(op: str, a: Tensor, b: Tensor) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise DimensionError(f"{op}: incompatible shapes {a.shape} and {b.shape}") from None


# -- primitives ----------------------------------------------------------------

def matmul(a: Tensor, b: Tensor, trans_b: bool = False) -> Tensor:
    """``a @ b`` (or ``a @ b.T``) with ``a`` of shape (..., n) and 2-D ``b``."""
    if b.data.ndim != 2 or a.data.ndim < 1:
        raise DimensionError(f"matmul: expected (..., n) x 2-D, got {a.shape} and {b.shape}")
    inner = b.shape[1] if trans_b else b.shape[0]
    if a.shape[-1] != inner:
        raise DimensionError(f"matmul: inner dimensions differ, {a.shape} and {b.shape} (trans_b={trans_b})")
    bm = b.data.T if trans_b else b.data
    return _emit("matmul", a.data @ bm, (a, b), trans_b)


def add(a: Tensor, b: Tensor) -> Tensor:
    _broadcast_shape("add", a, b)
    return _emit("add", a.data + b.data, (a, b))


def mul(a: Tensor, b: Tensor) -> Tensor:
    _broadcast_shape("mul", a, b)
    return _emit("mul", a.data * b.data, (a, b))


def scale(a: Tensor, c: float) -> Tensor:
    return _emit("scale", a.data * c, (a,), float(c))


def concat(tensors: Sequence[Tensor], axis: int = -1) -> Tensor:
    tensors = tuple(tensors)
    try:
        value = np.concatenate([t.data for t in tensors], axis=axis)
    except ValueError as exc:
        raise DimensionError(f"concat: {exc}") from None
    ax = axis % tensors[0].data.ndim
    sizes = [t.shape[ax] for t in tensors]
    return _emit("concat", value, tensors, (ax, sizes))


def sigmoid(a: Tensor) -> Tensor:
    return _emit("sigmoid", expit(a.data), (a,))


def tanh(a: Tensor) -> Tensor:
    return _emit("tanh", np.tanh(a.data), (a,))


def relu(a: Tensor) -> Tensor:
    return _emit("relu", np.maximum(a.data, 0.0), (a,))


def masked_softmax(a: Tensor, mask: np.ndarray, axis: int = -1) -> Tensor:
    """Softmax over ``axis`` restricted to ``mask``; masked and all-masked entries are 0."""
    mask = np.asarray(mask, dtype=bool)
    if mask.shape != a.shape:
        raise DimensionError(f"masked_softmax: mask shape {mask.shape} != input shape {a.shape}")
    x = np.where(mask, a.data, -np.inf)
    mx = np.max(x, axis=axis, keepdims=True)
    mx = np.where(np.isfinite(mx), mx, 0.0)
    e = np.where(mask, np.exp(x - mx), 0.0)
    den = np.sum(e, axis=axis, keepdims=True)
    y = e / np.where(den > 0, den, 1.0)
    return _emit("masked_softmax", y, (a,), axis)


def gather(table: Tensor, index) -> Tensor:
    """Row lookup: output shape is ``index.shape + table.shape[1:]``."""
    index = np.asarray(index, dtype=np.int64)
    n = table.shape[0]
    if index.size and (index.min() < 0 or index.max() >= n):
        raise DimensionError(f"gather: index out of range for table with {n} rows")
    return _emit("gather", table.data[index], (table,), index)


def _gate_vectors(dh: int) -> tuple[np.ndarray, np.ndarray]:
    # f, i, o use σ(x) = (1 + tanh(x/2)) / 2 and the candidate uses tanh(x)
    scale = np.concatenate([np.full(3 * dh, 0.5), np.ones(dh)])
    shift = np.concatenate([np.full(3 * dh, 0.5), np.zeros(dh)])
    return scale, shift


def _logistic_inplace(a: np.ndarray) -> np.ndarray:
    a *= 0.5
    np.tanh(a, out=a)
    a *= 0.5
    a += 0.5
    return a


def lstm_pointwise(pre: Tensor, c_prev: Tensor | None, cell_activation: str = "sigmoid") -> Tensor:
    """Fused LSTM gate arithmetic.

    ``pre`` holds the f, i, o, c pre-activations side by side, shape (n, 4·D_h).
    Returns ``[h, c]`` of shape (n, 2·D_h) with ``c = f⊙c_prev + i⊙tanh(pre_c)``
    and ``h = o⊙act(c)``, where ``act`` is the logistic function or tanh.
    A missing ``c_prev`` stands for zeros.
    """
    n, width = pre.shape
    if width % 4:
        raise DimensionError(f"lstm_pointwise: last axis {width} is not 4·D_h")
    dh = width // 4
    if c_prev is not None and c_prev.shape != (n, dh):
        raise DimensionError(f"lstm_pointwise: c_prev shape {c_prev.shape} != {(n, dh)}")
    scale, shift = _gate_vectors(dh)
    # whole-row passes are much cheaper than passes over column slices
    acts = pre.data * scale
    np.tanh(acts, out=acts)
    acts *= scale
    acts += shift
    f, i, o, cand = (acts[:, k * dh:(k + 1) * dh] for k in range(4))
    out = np.empty((n, 2 * dh))
    c = out[:, dh:]
    np.multiply(i, cand, out=c)
    if c_prev is not None:
        c += f * c_prev.data
    squash = np.array(c)
    if cell_activation == "sigmoid":
        _logistic_inplace(squash)
    else:
        np.tanh(squash, out=squash)
    np.multiply(o, squash, out=out[:, :dh])
    inputs = (pre,) if c_prev is None else (pre, c_prev)
    return _emit("lstm_pointwise", out, inputs, (acts, squash, cell_activation))


def narrow(a: Tensor, start: int, stop: int) -> Tensor:
    """Columns ``start:stop`` of the last axis."""
    n = a.shape[-1]
    if not 0 <= start < stop <= n:
        raise DimensionError(f"narrow: [{start}, {stop}) outside last axis of size {n}")
    return _emit("narrow", a.data[..., start:stop], (a,), (start, stop))


def sum_reduce(a: Tensor, axis: int | None = None) -> Tensor:
    return _emit("sum", np.sum(a.data, axis=axis), (a,), axis)


def reshape(a: Tensor, shape: tuple[int, ...]) -> Tensor:
    try:
        value = a.data.reshape(shape)
    except ValueError as exc:
        raise DimensionError(f"reshape: {exc}") from None
    return _emit("reshape", value, (a,))


def log(a: Tensor, clamp: tuple[float, float] = LOG_CLAMP) -> Tensor:
    """Natural log with the argument clamped to ``clamp``; no gradient outside it."""
    lo, hi = clamp
    return _emit("log", np.log(np.clip(a.data, lo, hi)), (a,), clamp)


# -- vector-Jacobian products -----------------------------------------------------

def _vjp_matmul(g, node):
    a, b = node.inputs
    trans_b = node.ctx
    bm = b.data.T if trans_b else b.data
    ga = g @ bm.T
    a2 = a.data.reshape(-1, a.shape[-1])
    g2 = g.reshape(-1, g.shape[-1])
    gb = a2.T @ g2
    return ga, (gb.T if trans_b else gb)


def _vjp_add(g, node):
    a, b = node.inputs
    return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)


def _vjp_mul(g, node):
    a, b = node.inputs
    return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)


def _vjp_concat(g, node):
    ax, sizes = node.ctx
    bounds = np.cumsum(sizes)[:-1]
    return tuple(np.split(g, bounds, axis=ax))


def _vjp_sigmoid(g, node):
    y = node.out.data
    return (g * y * (1.0 - y),)


def _vjp_tanh(g, node):
    y = node.out.data
    return (g * (1.0 - y * y),)


def _vjp_relu(g, node):
    return (g * (node.inputs[0].data > 0),)


def _vjp_softmax(g, node):
    y = node.out.data
    return (y * (g - np.sum(g * y, axis=node.ctx, keepdims=True)),)


def _vjp_gather(g, node):
    table = node.inputs[0]
    index = node.ctx
    n = table.shape[0]
    flat = index.reshape(-1)
    if table.data.ndim == 1:
        return (np.bincount(flat, weights=g.reshape(-1), minlength=n),)
    g2 = g.reshape(flat.size, -1)
    if flat.size and np.all(flat[1:] >= flat[:-1]):
        # sorted index: contiguous runs sum in order
        starts = np.flatnonzero(np.r_[True, flat[1:] != flat[:-1]])
        out = np.zeros((n, g2.shape[1]))
        out[flat[starts]] = np.add.reduceat(g2, starts, axis=0)
        return (out.reshape(table.shape),)
    # sparse one-hot product is a deterministic scatter-add
    onehot = sp.csr_matrix((np.ones(flat.size), (flat, np.arange(flat.size))), shape=(n, flat.size))
    return (np.asarray(onehot @ g2).reshape(table.shape),)


def _vjp_lstm_pointwise(g, node):
    acts, squash, act = node.ctx
    n, dh = squash.shape
    f, i, o, cand = (acts[:, k * dh:(k + 1) * dh] for k in range(4))
    g_h, g_c = g[:, :dh], g[:, dh:]
    # dc = g_c + g_h * o * act'(c)
    dc = (1.0 - squash) * squash if act == "sigmoid" else 1.0 - squash * squash
    dc *= g_h
    dc *= o
    dc += g_c
    # dpre = (d act / d pre) * (upstream per gate), built with whole-row passes
    dpre = acts * acts
    dpre[:, :3 * dh] -= acts[:, :3 * dh]
    dpre *= -1.0
    dpre[:, 3 * dh:] += 1.0
    c_prev = node.inputs[1].data if len(node.inputs) > 1 else None
    if c_prev is None:
        dpre[:, :dh] = 0.0
    else:
        dpre[:, :dh] *= dc * c_prev
    dpre[:, dh:2 * dh] *= dc * cand
    dpre[:, 2 * dh:3 * dh] *= g_h * squash
    dpre[:, 3 * dh:] *= dc * i
    if c_prev is None:
        return (dpre,)
    return dpre, dc * f


def _vjp_narrow(g, node):
    start, stop = node.ctx
    out = np.zeros(node.inputs[0].shape)
    out[..., start:stop] = g
    return (out,)


def _vjp_sum(g, node):
    a = node.inputs[0]
    if node.ctx is None:
        return (np.broadcast_to(g, a.shape).copy(),)
    return (np.broadcast_to(np.expand_dims(g, node.ctx), a.shape).copy(),)


def _vjp_reshape(g, node):
    return (g.reshape(node.inputs[0].shape),)


def _vjp_scale(g, node):
    return (g * node.ctx,)


def _vjp_log(g, node):
    x = node.inputs[0].data
    lo, hi = node.ctx
    inside = (x >= lo) & (x <= hi)
    return (np.where(inside, g / np.clip(x, lo, hi), 0.0),)


VJP: dict[str, Callable] = {
    "matmul": _vjp_matmul,
    "add": _vjp_add,
    "mul": _vjp_mul,
    "scale": _vjp_scale,
    "concat": _vjp_concat,
    "sigmoid": _vjp_sigmoid,
    "tanh": _vjp_tanh,
    "relu": _vjp_relu,
    "masked_softmax": _vjp_softmax,
    "gather": _vjp_gather,
    "narrow": _vjp_narrow,
    "lstm_pointwise": _vjp_lstm_pointwise,
    "sum": _vjp_sum,
    "reshape": _vjp_reshape,
    "log": _vjp_log,
}


# -- parameters -----------------------------------------------------------------

class ParamStore:
    """Named trainable tensors with matching gradient accumulators."""

    def __init__(self, tensors: dict[str, np.ndarray] | None = None) -> None:
        self._params: OrderedDict[str, Tensor] = OrderedDict()
        self.grads: dict[str, np.ndarray] = {}
        for name, value in (tensors or {}).items():
            self.add(name, value)

    def add(self, name: str, value) -> Tensor:
        if name in self._params:
            raise KeyError(f"duplicate parameter {name!r}")
        t = Tensor(np.array(value, dtype=np.float64), requires_grad=True, name=name)
        self._params[name] = t
        self.grads[name] = np.zeros_like(t.data)
        return t

    def __getitem__(self, name: str) -> Tensor:
        return self._params[name]

    def __contains__(self, name: str) -> bool:
        return name in self._params

    def __iter__(self) -> Iterator[str]:
        return iter(self._params)

    def __len__(self) -> int:
        return len(self._params)

    def items(self):
        return self._params.items()

    def names(self) -> list[str]:
        return list(self._params)

    def zero_grad(self) -> None:
        for name, t in self._params.items():
            self.grads[name] = np.zeros_like(t.data)

    def state(self) -> dict[str, np.ndarray]:
        return {k: t.data.copy() for k, t in self._params.items()}

    def load_state(self, state: dict[str, np.ndarray]) -> None:
        for k, v in state.items():
            if self._params[k].shape != v.shape:
                raise DimensionError(f"{k}: shape {v.shape} != {self._params[k].shape}")
            self._params[k].data = np.array(v, dtype=np.float64)

    def copy(self) -> "ParamStore":
        return ParamStore(self.state())

    def num_values(self) -> int:
        return sum(t.data.size for t in self._params.values())

    def equal(self, other: "ParamStore") -> bool:
        return self.names() == other.names() and all(
            np.array_equal(self[k].data, other[k].data) for k in self.names()
        )


def backward(loss: Tensor, tape: Tape, params: ParamStore | None = None) -> dict[int, np.ndarray]:
    """Propagate d(loss) back through ``tape``; accumulate into ``params.grads``."""
    if tape.consumed:
        raise TapeStateError("backward already ran on this tape; call tape.reset() and record again")
    if loss.data.size != 1:
        raise DimensionError(f"backward: loss must be scalar, got shape {loss.shape}")
    if not tape.nodes:
        raise TapeStateError("backward on an empty tape")
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for node in reversed(tape.nodes):
        g = grads.pop(id(node.out), None)
        if g is None:
            continue
        for inp, gi in zip(node.inputs, VJP[node.op](g, node)):
            if gi is None or not inp.requires_grad:
                continue
            key = id(inp)
            prev = grads.get(key)
            grads[key] = gi if prev is None else prev + gi
    tape.consumed = True
    if params is not None:
        for name, t in params.items():
            gi = grads.get(id(t))
            if gi is not None:
                params.grads[name] = params.grads[name] + gi
    return grads


def grad_check(
    f: Callable[[ParamStore], Tensor],
    params: ParamStore,
    eps: float = 1e-5,
    floor: float = 1e-8,
    names: Sequence[str] | None = None,
) -> tuple[float, str]:
    """Worst relative error between analytic and central-difference gradients.

    Relative error is ``|a - n| / max(|a|, |n|, floor)``; ``floor`` keeps
    entries whose true gradient is zero from dividing round-off by zero.
    """
    if not 1e-7 <= eps <= 1e-3:
        raise ValueError("eps must lie in [1e-7, 1e-3]")
    with Tape() as tape:
        loss = f(params)
    params.zero_grad()
    backward(loss, tape, params)
    analytic = {k: v.copy() for k, v in params.grads.items()}
    worst, worst_name = 0.0, ""
    for name in names or params.names():
        t = params[name]
        flat = t.data.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + eps
            fp = f(params).item()
            flat[i] = orig - eps
            fm = f(params).item()
            flat[i] = orig
            numeric = (fp - fm) / (2.0 * eps)
            a = analytic[name].reshape(-1)[i]
            err = abs(a - numeric) / max(abs(a), abs(numeric), floor)
            if err > worst:
                worst, worst_name = err, name
    return worst, worst_name


# -- container file -------------------------------------------------------------
# layout: magic, u32 metadata length, metadata utf-8, u32 count, then per tensor
# u16 name length, name, u8 ndim, u32 dims..., float64 little-endian values

_MAGIC = b"ESPT\x01"


def save_params(params: ParamStore | dict[str, np.ndarray], path: str | Path, metadata: str = "") -> None:
    state = params.state() if isinstance(params, ParamStore) else params
    meta = metadata.encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(_MAGIC)
        fh.write(struct.pack("<I", len(meta)))
        fh.write(meta)
        fh.write(struct.pack("<I", len(state)))
        for name, arr in state.items():
            raw = name.encode("utf-8")
            fh.write(struct.pack("<H", len(raw)))
            fh.write(raw)
            fh.write(struct.pack("<B", arr.ndim))
            fh.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
            fh.write(np.ascontiguousarray(arr, dtype="<f8").tobytes())


def load_params(path: str | Path) -> tuple[ParamStore, str]:
    with open(path, "rb") as fh:
        buf = fh.read()
    if not buf.startswith(_MAGIC):
        raise ValueError(f"{path}: not a parameter container")
    pos = len(_MAGIC)

    def take(fmt: str):
        nonlocal pos
        vals = struct.unpack_from(fmt, buf, pos)
        pos += struct.calcsize(fmt)
        return vals

    (mlen,) = take("<I")
    meta = buf[pos:pos + mlen].decode("utf-8")
    pos += mlen
    (count,) = take("<I")
    state = OrderedDict()
    for _ in range(count):
        (nlen,) = take("<H")
        name = buf[pos:pos + nlen].decode("utf-8")
        pos += nlen
        (ndim,) = take("<B")
        shape = take(f"<{ndim}I") if ndim else ()
        size = int(np.prod(shape)) if shape else 1
        arr = np.frombuffer(buf, dtype="<f8", count=size, offset=pos).reshape(shape).astype(np.float64)
        pos += 8 * size
        state[name] = arr
    return ParamStore(state), meta
