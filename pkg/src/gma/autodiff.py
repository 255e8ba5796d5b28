"""Dense float64 tensors with tape-based reverse-mode differentiation.

Operations are plain functions. When a :class:`Tape` is active (``with Tape()
as tape:``) and at least one input requires a gradient, the op appends an entry
holding its vector-Jacobian closure; :func:`backward` replays the entries in
reverse. Without an active tape ops are ordinary numpy evaluation, which is
what the batched saliency probes use.
"""

from __future__ import annotations

import hashlib
import itertools
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from gma.errors import ContractError, NumericError, ShapeError

_uid = itertools.count()
_ACTIVE: list["Tape"] = []

SIGNED_SQRT_EPS = 1e-8
L2_EPS = 1e-12


class Tensor:
    """Immutable row-major float64 array."""

    __slots__ = ("data", "requires_grad", "uid")

    def __init__(self, data, requires_grad: bool = False):
        arr = np.array(data, dtype=np.float64)
        arr.flags.writeable = False
        self.data = arr
        self.requires_grad = requires_grad
        self.uid = next(_uid)

    @classmethod
    def _wrap(cls, arr: np.ndarray) -> "Tensor":
        t = cls.__new__(cls)
        arr = np.asarray(arr, dtype=np.float64)
        if not arr.flags.c_contiguous:
            arr = arr.copy()
        arr.flags.writeable = False
        t.data = arr
        t.requires_grad = False
        t.uid = next(_uid)
        return t

    @property
    def dims(self) -> list[int]:
        return list(self.data.shape)

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() needs a single element, got dims {self.dims}")
        return float(self.data.reshape(-1)[0])

    def __repr__(self) -> str:
        return f"Tensor(dims={self.dims}, requires_grad={self.requires_grad})"

    def __add__(self, other):
        return add(self, _as_tensor(other))

    __radd__ = __add__

    def __sub__(self, other):
        return add(self, neg(_as_tensor(other)))

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, float(other))
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)


class Parameter(Tensor):
    """Named trainable tensor; ``grad`` always has the value's dims."""

    __slots__ = ("name", "grad")

    def __init__(self, name: str, data):
        super().__init__(data, requires_grad=True)
        self.name = name
        self.grad = np.zeros_like(self.data)

    @property
    def value(self) -> np.ndarray:
        return self.data

    def zero_grad(self) -> None:
        self.grad = np.zeros_like(self.data)

    def assign(self, new_data: np.ndarray) -> None:
        arr = np.array(new_data, dtype=np.float64)
        if arr.shape != self.data.shape:
            raise ShapeError(f"cannot assign dims {list(arr.shape)} to parameter {self.name} {self.dims}")
        arr.flags.writeable = False
        self.data = arr

    def __repr__(self) -> str:
        return f"Parameter({self.name!r}, dims={self.dims})"


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


@dataclass
class TapeEntry:
    op: str
    input_ids: tuple[int, ...]
    output_id: int
    inputs: tuple[Tensor, ...]
    vjp: Callable[[np.ndarray], Sequence[np.ndarray | None]]


@dataclass
class Tape:
    """Ordered record of differentiable operations."""

    entries: list[TapeEntry] = field(default_factory=list)

    def __enter__(self) -> "Tape":
        _ACTIVE.append(self)
        return self

    def __exit__(self, *exc) -> None:
        _ACTIVE.remove(self)

    def __len__(self) -> int:
        return len(self.entries)

    def parameters(self) -> list[Parameter]:
        seen: dict[int, Parameter] = {}
        for e in self.entries:
            for t in e.inputs:
                if isinstance(t, Parameter) and t.uid not in seen:
                    seen[t.uid] = t
        return list(seen.values())


def _emit(op: str, inputs: Sequence[Tensor], out: np.ndarray, vjp) -> Tensor:
    if not np.all(np.isfinite(out)):
        raise NumericError(f"{op} produced non-finite values")
    t = Tensor._wrap(out)
    if _ACTIVE and any(x.requires_grad for x in inputs):
        t.requires_grad = True
        _ACTIVE[-1].entries.append(
            TapeEntry(op, tuple(x.uid for x in inputs), t.uid, tuple(inputs), vjp)
        )
    return t


def backward(tape: Tape, loss: Tensor, accumulate: bool = True) -> dict[str, np.ndarray]:
    """Propagate d(loss) back through ``tape``.

    Returns a mapping from parameter name to gradient. With ``accumulate`` the
    gradients are also added into each ``Parameter.grad``.
    """
    if loss.data.size != 1 or loss.ndim != 0:
        raise ContractError(f"backward needs a scalar loss, got dims {loss.dims}")
    grads: dict[int, np.ndarray] = {loss.uid: np.ones((), dtype=np.float64)}
    params: dict[int, Parameter] = {}
    for entry in reversed(tape.entries):
        g = grads.pop(entry.output_id, None)
        if g is None:
            continue
        for x, gx in zip(entry.inputs, entry.vjp(g)):
            if gx is None or not x.requires_grad:
                continue
            if isinstance(x, Parameter):
                params[x.uid] = x
            prev = grads.get(x.uid)
            grads[x.uid] = gx if prev is None else prev + gx
    out: dict[str, np.ndarray] = {}
    for uid, p in params.items():
        g = grads[uid]
        out[p.name] = g
        if accumulate:
            p.grad = p.grad + g
    return out


# --------------------------------------------------------------------------
# broadcasting helpers
# --------------------------------------------------------------------------


def _check_trailing(a: np.ndarray, b: np.ndarray, op: str) -> None:
    if a.shape == b.shape:
        return
    small, big = (a, b) if a.ndim <= b.ndim else (b, a)
    if small.ndim == 0 or big.shape[big.ndim - small.ndim:] == small.shape:
        return
    raise ShapeError(f"{op}: dims {list(a.shape)} and {list(b.shape)} are not trailing-broadcastable")


def _reduce_to(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    lead = g.ndim - len(shape)
    if lead > 0:
        g = g.sum(axis=tuple(range(lead)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


# --------------------------------------------------------------------------
# core ops
# --------------------------------------------------------------------------


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product over the last two axes; leading axes broadcast numpy-style."""
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError(f"matmul needs rank >= 2 operands, got {a.dims} and {b.dims}")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul inner dims differ: {a.dims} x {b.dims}")
    A, B = a.data, b.data
    try:
        out = np.matmul(A, B)
    except ValueError as exc:
        raise ShapeError(f"matmul batch dims incompatible: {a.dims} x {b.dims}") from exc

    def vjp(g):
        ga = _reduce_to(np.matmul(g, np.swapaxes(B, -1, -2)), A.shape) if a.requires_grad else None
        gb = _reduce_to(np.matmul(np.swapaxes(A, -1, -2), g), B.shape) if b.requires_grad else None
        return ga, gb

    return _emit("matmul", (a, b), out, vjp)


def add(a: Tensor, b: Tensor) -> Tensor:
    _check_trailing(a.data, b.data, "add")
    sa, sb = a.shape, b.shape
    return _emit("add", (a, b), a.data + b.data, lambda g: (_reduce_to(g, sa), _reduce_to(g, sb)))


def mul(a: Tensor, b: Tensor) -> Tensor:
    _check_trailing(a.data, b.data, "mul")
    A, B = a.data, b.data
    return _emit("mul", (a, b), A * B, lambda g: (_reduce_to(g * B, A.shape), _reduce_to(g * A, B.shape)))


def scale(a: Tensor, c: float) -> Tensor:
    return _emit("scale", (a,), a.data * c, lambda g: (g * c,))


def neg(a: Tensor) -> Tensor:
    return scale(a, -1.0)


def tanh(a: Tensor) -> Tensor:
    y = np.tanh(a.data)
    return _emit("tanh", (a,), y, lambda g: (g * (1.0 - y * y),))


def sigmoid(a: Tensor) -> Tensor:
    x = a.data
    y = np.where(x >= 0, 1.0 / (1.0 + np.exp(-np.abs(x))), np.exp(-np.abs(x)) / (1.0 + np.exp(-np.abs(x))))
    return _emit("sigmoid", (a,), y, lambda g: (g * y * (1.0 - y),))


def elementwise(kind: str, a: Tensor, b: Tensor | None = None) -> Tensor:
    """Dispatch by name: ``add``, ``mul``, ``tanh`` or ``sigmoid``."""
    binary = {"add": add, "mul": mul}
    unary = {"tanh": tanh, "sigmoid": sigmoid}
    if kind in binary:
        if b is None:
            raise ContractError(f"{kind} needs two operands")
        return binary[kind](a, b)
    if kind in unary:
        return unary[kind](a)
    raise ContractError(f"unknown elementwise kind {kind!r}")


def _norm_axis(axis: int, ndim: int) -> int:
    if not -ndim <= axis < ndim:
        raise ShapeError(f"axis {axis} out of range for rank {ndim}")
    return axis % ndim


def softmax(z: Tensor, axis: int = -1) -> Tensor:
    ax = _norm_axis(axis, z.ndim)
    e = np.exp(z.data - z.data.max(axis=ax, keepdims=True))
    y = e / e.sum(axis=ax, keepdims=True)

    def vjp(g):
        return (y * (g - (g * y).sum(axis=ax, keepdims=True)),)

    return _emit("softmax", (z,), y, vjp)


def log_softmax(z: Tensor, axis: int = -1) -> Tensor:
    ax = _norm_axis(axis, z.ndim)
    shifted = z.data - z.data.max(axis=ax, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=ax, keepdims=True))
    y = shifted - lse
    p = np.exp(y)
    return _emit("log_softmax", (z,), y, lambda g: (g - p * g.sum(axis=ax, keepdims=True),))


def signed_sqrt(x: Tensor) -> Tensor:
    X = x.data
    y = np.sign(X) * np.sqrt(np.abs(X))
    return _emit("signed_sqrt", (x,), y, lambda g: (g / (2.0 * np.sqrt(np.abs(X) + SIGNED_SQRT_EPS)),))


def l2_normalize(x: Tensor, axis: int = -1) -> Tensor:
    """``x / (||x|| + 1e-12)`` along ``axis``."""
    ax = _norm_axis(axis, x.ndim)
    X = x.data
    n = np.sqrt((X * X).sum(axis=ax, keepdims=True))
    d = n + L2_EPS
    y = X / d

    def vjp(g):
        safe_n = np.where(n > 0, n, 1.0)
        proj = (g * X).sum(axis=ax, keepdims=True)
        return (g / d - X * proj / (d * d * safe_n),)

    return _emit("l2_normalize", (x,), y, vjp)


def sum(x: Tensor, axis: int | None = None, keepdims: bool = False) -> Tensor:  # noqa: A001
    shape = x.shape
    if axis is None:
        return _emit("sum", (x,), np.asarray(x.data.sum()), lambda g: (np.broadcast_to(g, shape).copy(),))
    ax = _norm_axis(axis, x.ndim)
    out = x.data.sum(axis=ax, keepdims=keepdims)

    def vjp(g):
        g = g if keepdims else np.expand_dims(g, ax)
        return (np.broadcast_to(g, shape).copy(),)

    return _emit("sum", (x,), out, vjp)


def mean(x: Tensor, axis: int | None = None, keepdims: bool = False) -> Tensor:
    n = x.data.size if axis is None else x.shape[_norm_axis(axis, x.ndim)]
    return scale(sum(x, axis, keepdims), 1.0 / n)


def reshape(x: Tensor, dims: Sequence[int]) -> Tensor:
    shape = x.shape
    try:
        out = x.data.reshape(tuple(dims))
    except ValueError as exc:
        raise ShapeError(f"cannot reshape {x.dims} to {list(dims)}") from exc
    return _emit("reshape", (x,), out, lambda g: (g.reshape(shape),))


def transpose(x: Tensor) -> Tensor:
    """Swap the last two axes."""
    if x.ndim < 2:
        raise ShapeError(f"transpose needs rank >= 2, got {x.dims}")
    return _emit("transpose", (x,), np.swapaxes(x.data, -1, -2), lambda g: (np.swapaxes(g, -1, -2),))


def concat(xs: Sequence[Tensor], axis: int = -1) -> Tensor:
    if not xs:
        raise ContractError("concat of nothing")
    ax = _norm_axis(axis, xs[0].ndim)
    try:
        out = np.concatenate([x.data for x in xs], axis=ax)
    except ValueError as exc:
        raise ShapeError(f"concat dims mismatch: {[x.dims for x in xs]}") from exc
    splits = np.cumsum([x.shape[ax] for x in xs])[:-1]
    return _emit("concat", tuple(xs), out, lambda g: tuple(np.split(g, splits, axis=ax)))


def stack(xs: Sequence[Tensor], axis: int = 0) -> Tensor:
    if not xs:
        raise ContractError("stack of nothing")
    try:
        out = np.stack([x.data for x in xs], axis=axis)
    except ValueError as exc:
        raise ShapeError(f"stack dims mismatch: {[x.dims for x in xs]}") from exc
    ax = _norm_axis(axis, out.ndim)
    n = len(xs)
    return _emit("stack", tuple(xs), out, lambda g: tuple(np.take(g, i, axis=ax) for i in range(n)))


def tile(x: Tensor, n: int, axis: int = -2) -> Tensor:
    """Insert a new axis at ``axis`` and repeat ``x`` ``n`` times along it."""
    ax = _norm_axis(axis, x.ndim + 1)
    out = np.repeat(np.expand_dims(x.data, ax), n, axis=ax)
    return _emit("tile", (x,), out, lambda g: (g.sum(axis=ax),))


def index(x: Tensor, i: int, axis: int = 0) -> Tensor:
    """Select position ``i`` along ``axis`` (the axis is dropped)."""
    ax = _norm_axis(axis, x.ndim)
    shape = x.shape
    out = np.take(x.data, i, axis=ax)

    def vjp(g):
        full = np.zeros(shape)
        sl = [slice(None)] * len(shape)
        sl[ax] = i
        full[tuple(sl)] = g
        return (full,)

    return _emit("index", (x,), out, vjp)


def gather_rows(x: Tensor, idx: np.ndarray) -> Tensor:
    """``out[..., k, :] = x[..., idx[..., k], :]`` for ``x`` of rank >= 2."""
    idx = np.asarray(idx, dtype=np.int64)
    if idx.shape[:-1] != x.shape[:-2]:
        raise ShapeError(f"gather_rows index dims {list(idx.shape)} do not match {x.dims}")
    if idx.size and (idx.min() < 0 or idx.max() >= x.shape[-2]):
        raise ShapeError("gather_rows index out of range")
    shape = x.shape
    out = np.take_along_axis(x.data, idx[..., None], axis=-2)

    def vjp(g):
        full = np.zeros(shape)
        lead = np.indices(idx.shape)[:-1]
        np.add.at(full, (*lead, idx), g)
        return (full,)

    return _emit("gather_rows", (x,), out, vjp)


def embed(table: Tensor, tokens: np.ndarray) -> Tensor:
    """Row lookup ``table[tokens]``."""
    tokens = np.asarray(tokens, dtype=np.int64)
    if tokens.size and (tokens.min() < 0 or tokens.max() >= table.shape[0]):
        raise ShapeError(f"token id out of range for table of {table.shape[0]} rows")
    shape = table.shape

    def vjp(g):
        full = np.zeros(shape)
        np.add.at(full, tokens, g)
        return (full,)

    return _emit("embed", (table,), table.data[tokens], vjp)


def cross_entropy(logits: Tensor, targets) -> Tensor:
    """Per-row ``-log softmax(logits)[target]`` over the last axis."""
    targets = np.asarray(targets, dtype=np.int64)
    if targets.shape != logits.shape[:-1]:
        raise ShapeError(f"targets dims {list(targets.shape)} do not match logits {logits.dims}")
    n = logits.shape[-1]
    if targets.size and (targets.min() < 0 or targets.max() >= n):
        raise ContractError(f"target index out of range [0, {n})")
    z = logits.data
    shifted = z - z.max(axis=-1, keepdims=True)
    logp = shifted - np.log(np.exp(shifted).sum(axis=-1, keepdims=True))
    out = -np.take_along_axis(logp, targets[..., None], axis=-1)[..., 0]
    probs = np.exp(logp)

    def vjp(g):
        onehot = np.zeros_like(probs)
        np.put_along_axis(onehot, targets[..., None], 1.0, axis=-1)
        return ((probs - onehot) * g[..., None],)

    return _emit("cross_entropy", (logits,), out, vjp)


# --------------------------------------------------------------------------
# recurrent encoder
# --------------------------------------------------------------------------


def recurrent_encode(tokens: Tensor, w_x: Tensor, w_h: Tensor, b: Tensor) -> tuple[Tensor, Tensor]:
    """Elman recurrence ``h_t = tanh(W_x x_t + W_h h_{t-1} + b)`` with ``h_0 = 0``.

    ``tokens`` is ``[..., T, d_in]``. Returns per-step states ``[..., T, d]`` and
    the final state ``[..., d]``.
    """
    if tokens.ndim < 2:
        raise ShapeError(f"recurrent_encode needs [..., T, d_in], got {tokens.dims}")
    T, d_in = tokens.shape[-2], tokens.shape[-1]
    if T == 0:
        raise ContractError("recurrent_encode on an empty sequence")
    lead = tokens.shape[:-2]
    d = w_h.shape[0]
    flat = reshape(tokens, (-1, T, d_in))
    xs = matmul(flat, w_x)
    h = tanh(add(index(xs, 0, axis=1), b))
    states = [h]
    for t in range(1, T):
        h = tanh(add(add(index(xs, t, axis=1), matmul(h, w_h)), b))
        states.append(h)
    per_step = reshape(stack(states, axis=1), (*lead, T, d))
    final = reshape(h, (*lead, d))
    return per_step, final


# --------------------------------------------------------------------------
# initialisation and checks
# --------------------------------------------------------------------------


def param_rng(seed: int, name: str) -> np.random.Generator:
    """Generator keyed by (seed, parameter name), independent of creation order."""
    digest = hashlib.sha256(f"{seed}:{name}".encode()).digest()
    return np.random.default_rng(int.from_bytes(digest[:8], "little"))


def xavier(name: str, dims: Sequence[int], seed: int) -> Parameter:
    fan_in, fan_out = (dims[0], dims[-1]) if len(dims) > 1 else (dims[0], dims[0])
    a = np.sqrt(6.0 / (fan_in + fan_out))
    return Parameter(name, param_rng(seed, name).uniform(-a, a, size=tuple(dims)))


def zeros(name: str, dims: Sequence[int]) -> Parameter:
    return Parameter(name, np.zeros(tuple(dims)))


def finite_difference(fn: Callable[[], float], p: Parameter, h: float = 1e-5) -> np.ndarray:
    """Central differences of scalar ``fn`` wrt every entry of ``p``."""
    base = p.data.copy()
    grad = np.zeros_like(base)
    flat = grad.reshape(-1)
    for i in range(base.size):
        bumped = base.copy().reshape(-1)
        bumped[i] += h
        p.assign(bumped.reshape(base.shape))
        up = fn()
        bumped[i] -= 2 * h
        p.assign(bumped.reshape(base.shape))
        down = fn()
        flat[i] = (up - down) / (2 * h)
    p.assign(base)
    return grad


def gradient_mismatch(analytic: np.ndarray, numeric: np.ndarray, rtol: float = 1e-4, atol: float = 1e-6) -> float:
    """Worst violation ratio; <= 1 means every entry passes.

    Entries whose magnitude is below 1e-2 are judged by ``atol``, the rest by
    relative error against ``rtol``.
    """
    a, n = np.asarray(analytic), np.asarray(numeric)
    mag = np.maximum(np.abs(a), np.abs(n))
    small = mag < 1e-2
    rel = np.abs(a - n) / np.where(small, 1.0, mag)
    ratio = np.where(small, np.abs(a - n) / atol, rel / rtol)
    return float(ratio.max()) if ratio.size else 0.0
