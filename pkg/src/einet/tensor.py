"""Dense tensors with tape-based reverse-mode differentiation.

A :class:`Tensor` wraps an immutable numpy array (float32 by default).
Operations executed while a :class:`GradTape` is active record a
vector-Jacobian closure whenever one of their inputs is tracked by that
tape; :meth:`GradTape.gradient` replays the records in reverse.

    >>> with GradTape() as tape:
    ...     p = tape.watch(np.full(3, 3.0), name="p")
    ...     loss = (p * p).sum()
    >>> tape.gradient(loss, [p])[0]
    array([6., 6., 6.], dtype=float32)

Broadcasting is deliberately narrow: both operands must have the same
rank and may differ only where one extent is 1.
"""

from __future__ import annotations

import contextlib
from typing import Callable, Iterable, Sequence

import numpy as np

from .errors import InvalidValueError, MissingGradientError, ShapeError

_dtype_stack: list[type] = [np.float32]
_tape_stack: list["GradTape"] = []


def default_dtype():
    return _dtype_stack[-1]


@contextlib.contextmanager
def float64_mode():
    """Create new tensors in float64; used by finite-difference oracles."""
    _dtype_stack.append(np.float64)
    try:
        yield
    finally:
        _dtype_stack.pop()


def _active_tape():
    return _tape_stack[-1] if _tape_stack else None


_selection_logs: list[list[bytes]] = []


@contextlib.contextmanager
def selection_trace():
    """Record every discrete choice (max index, active mask) made by piecewise ops.

    Two evaluations with equal traces lie on the same smooth piece, which is
    what a finite difference across them needs.
    """
    log: list[bytes] = []
    _selection_logs.append(log)
    try:
        yield log
    finally:
        _selection_logs.pop()


def note_selection(choice: np.ndarray) -> None:
    if _selection_logs:
        _selection_logs[-1].append(np.ascontiguousarray(choice).tobytes())


class Tensor:
    """Immutable dense array. ``shape``/``ndim``/``size`` mirror numpy."""

    __slots__ = ("data", "_tape", "name")
    __array_priority__ = 1000  # make ndarray <op> Tensor defer to Tensor

    def __init__(self, data, dtype=None, name: str | None = None):
        arr = np.asarray(data, dtype=dtype or default_dtype())
        if not np.isfinite(arr).all():
            raise InvalidValueError(f"non-finite value in tensor{' ' + name if name else ''}")
        arr = arr.view()
        arr.flags.writeable = False
        self.data = arr
        self._tape = None
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
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
        return np.array(self.data)

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float(self.data)

    def __repr__(self):
        return f"Tensor(shape={self.shape}, dtype={self.dtype})"

    def __len__(self):
        return self.shape[0]

    # arithmetic sugar
    def __add__(self, o):
        return add(self, o)

    def __radd__(self, o):
        return add(o, self)

    def __sub__(self, o):
        return sub(self, o)

    def __rsub__(self, o):
        return sub(o, self)

    def __mul__(self, o):
        return mul(self, o)

    def __rmul__(self, o):
        return mul(o, self)

    def __truediv__(self, o):
        return div(self, o)

    def __rtruediv__(self, o):
        return div(o, self)

    def __neg__(self):
        return neg(self)

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


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


class GradTape:
    """Records differentiable operations between ``__enter__`` and ``__exit__``.

    The tape is single-owner. Gradients can be requested any number of
    times after recording; the records themselves are never consumed.
    """

    def __init__(self):
        self._records: list[tuple[Tensor, tuple, Callable]] = []
        self._watched: dict[int, Tensor] = {}
        self._names: dict[str, Tensor] = {}

    def __enter__(self):
        _tape_stack.append(self)
        return self

    def __exit__(self, *exc):
        _tape_stack.remove(self)
        return False

    def watch(self, value, name: str | None = None) -> Tensor:
        """Register a parameter. Returns a tracked tensor."""
        t = Tensor(value.data if isinstance(value, Tensor) else value, name=name)
        t._tape = self
        self._watched[id(t)] = t
        if name is not None:
            self._names[name] = t
        return t

    def watch_all(self, arrays) -> dict[str, Tensor]:
        return {k: self.watch(v, name=k) for k, v in arrays.items()}

    @property
    def parameters(self) -> dict[str, Tensor]:
        return dict(self._names)

    def record(self, out: Tensor, inputs: tuple, vjp: Callable) -> None:
        out._tape = self
        self._records.append((out, inputs, vjp))

    def gradient(self, loss: Tensor, params: Sequence[Tensor] | None = None):
        """Gradients of scalar ``loss`` w.r.t. ``params``.

        Without ``params`` a name->gradient dict for every named watched
        tensor is returned. Parameters that do not influence the loss get
        zeros; tensors that were never watched raise MissingGradientError.
        """
        if loss.size != 1:
            raise ShapeError(f"loss must be scalar, got shape {loss.shape}")
        named = params is None
        targets = list(self._names.values()) if named else list(params)
        for p in targets:
            if id(p) not in self._watched or self._watched[id(p)] is not p:
                raise MissingGradientError(f"tensor {p.name or p!r} is not a watched parameter of this tape")
        grads: dict[int, np.ndarray] = {}
        if loss._tape is self:
            grads[id(loss)] = np.ones(loss.shape, dtype=loss.dtype)
            for out, inputs, vjp in reversed(self._records):
                g = grads.get(id(out))
                if g is None:
                    continue
                in_grads = vjp(g)
                for t, gi in zip(inputs, in_grads):
                    if gi is None or not isinstance(t, Tensor) or t._tape is not self:
                        continue
                    prev = grads.get(id(t))
                    grads[id(t)] = gi if prev is None else prev + gi
        result = [
            np.asarray(grads[id(p)], dtype=p.dtype).reshape(p.shape) if id(p) in grads
            else np.zeros(p.shape, dtype=p.dtype)
            for p in targets
        ]
        if named:
            return {p.name: g for p, g in zip(targets, result)}
        return result


def backward(tape: GradTape, loss: Tensor) -> dict[str, np.ndarray]:
    """Gradients of ``loss`` for every named parameter registered on ``tape``."""
    return tape.gradient(loss)


def _tracked(t) -> bool:
    return isinstance(t, Tensor) and t._tape is not None and t._tape is _active_tape()


def _result(data, inputs: tuple, vjp: Callable) -> Tensor:
    out = Tensor(data, dtype=getattr(data, "dtype", None))
    tape = _active_tape()
    if tape is not None and any(isinstance(t, Tensor) and t._tape is tape for t in inputs):
        tape.record(out, inputs, vjp)
    return out


def _raw(x):
    return x.data if isinstance(x, Tensor) else x


def _check_broadcast(a: np.ndarray, b: np.ndarray) -> tuple[int, ...]:
    if np.ndim(a) == 0 or np.ndim(b) == 0:
        return np.broadcast_shapes(np.shape(a), np.shape(b))
    if a.ndim != b.ndim:
        raise ShapeError(f"rank mismatch {a.shape} vs {b.shape}")
    out = []
    for x, y in zip(a.shape, b.shape):
        if x != y and x != 1 and y != 1:
            raise ShapeError(f"incompatible shapes {a.shape} vs {b.shape}")
        out.append(max(x, y))
    return tuple(out)


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    if len(shape) == 0:
        return g.sum()
    axes = tuple(i for i, (gs, s) in enumerate(zip(g.shape, shape)) if s == 1 and gs != 1)
    return g.sum(axis=axes, keepdims=True) if axes else g


def _const(x, like: np.ndarray):
    """Python scalars adopt the tensor operand's dtype."""
    if isinstance(x, Tensor):
        return x.data
    return np.asarray(x, dtype=like.dtype)


def _binary(a, b):
    if not isinstance(a, Tensor) and not isinstance(b, Tensor):
        raise TypeError("at least one operand must be a Tensor")
    like = a.data if isinstance(a, Tensor) else b.data
    ad, bd = _const(a, like), _const(b, like)
    _check_broadcast(ad, bd)
    return ad, bd


def add(a, b) -> Tensor:
    ad, bd = _binary(a, b)
    sa, sb = np.shape(ad), np.shape(bd)
    return _result(ad + bd, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))


def sub(a, b) -> Tensor:
    ad, bd = _binary(a, b)
    sa, sb = np.shape(ad), np.shape(bd)
    return _result(ad - bd, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(-g, sb)))


def mul(a, b) -> Tensor:
    ad, bd = _binary(a, b)
    ta, tb = _tracked(a), _tracked(b)

    def vjp(g):
        return (
            _unbroadcast(g * bd, np.shape(ad)) if ta else None,
            _unbroadcast(g * ad, np.shape(bd)) if tb else None,
        )

    return _result(ad * bd, (a, b), vjp)


def div(a, b) -> Tensor:
    ad, bd = _binary(a, b)
    out = ad / bd
    ta, tb = _tracked(a), _tracked(b)

    def vjp(g):
        return (
            _unbroadcast(g / bd, np.shape(ad)) if ta else None,
            _unbroadcast(-g * out / bd, np.shape(bd)) if tb else None,
        )

    return _result(out, (a, b), vjp)


def neg(x: Tensor) -> Tensor:
    return _result(-x.data, (x,), lambda g: (-g,))


def exp(x: Tensor) -> Tensor:
    with np.errstate(over="ignore"):  # overflow surfaces as InvalidValueError below
        out = np.exp(x.data)
    return _result(out, (x,), lambda g: (g * out,))


def log(x: Tensor) -> Tensor:
    d = x.data
    return _result(np.log(d), (x,), lambda g: (g / d,))


def _sigmoid_np(d: np.ndarray) -> np.ndarray:
    # split by sign so neither branch overflows
    out = np.empty_like(d)
    pos = d >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-d[pos]))
    e = np.exp(d[~pos])
    out[~pos] = e / (1.0 + e)
    return out


def sigmoid(x: Tensor) -> Tensor:
    s = _sigmoid_np(x.data)
    return _result(s, (x,), lambda g: (g * s * (1 - s),))


def silu(x: Tensor) -> Tensor:
    """x * sigmoid(x)."""
    d = x.data
    s = _sigmoid_np(d)
    return _result(d * s, (x,), lambda g: (g * s * (1 + d * (1 - s)),))


def neg_silu(x: Tensor) -> Tensor:
    """x * sigmoid(-x): keeps negative responses, suppresses positive ones."""
    d = x.data
    s = _sigmoid_np(-d)
    return _result(d * s, (x,), lambda g: (g * s * (1 - d * (1 - s)),))


def relu(x: Tensor) -> Tensor:
    d = x.data
    mask = d > 0
    note_selection(mask)
    return _result(np.where(mask, d, 0).astype(d.dtype), (x,), lambda g: (g * mask,))


def clip(x: Tensor, lo: float, hi: float) -> Tensor:
    d = x.data
    mask = (d >= lo) & (d <= hi)
    note_selection(mask)
    return _result(np.clip(d, lo, hi), (x,), lambda g: (g * mask,))


def maximum(a, b) -> Tensor:
    ad, bd = _binary(a, b)
    take_a = ad >= bd
    note_selection(take_a)
    sa, sb = np.shape(ad), np.shape(bd)
    return _result(
        np.maximum(ad, bd),
        (a, b),
        lambda g: (_unbroadcast(g * take_a, sa), _unbroadcast(g * ~take_a, sb)),
    )


def minimum(a, b) -> Tensor:
    ad, bd = _binary(a, b)
    take_a = ad <= bd
    note_selection(take_a)
    sa, sb = np.shape(ad), np.shape(bd)
    return _result(
        np.minimum(ad, bd),
        (a, b),
        lambda g: (_unbroadcast(g * take_a, sa), _unbroadcast(g * ~take_a, sb)),
    )


def bce_with_logits(logits: Tensor, targets) -> Tensor:
    """Elementwise binary cross-entropy on logits, overflow-safe."""
    z = logits.data
    t = np.asarray(_raw(targets), dtype=z.dtype)
    _check_broadcast(z, t)
    out = np.maximum(z, 0) - z * t + np.log1p(np.exp(-np.abs(z)))
    return _result(out, (logits,), lambda g: (g * (_sigmoid_np(z) - t),))


def _norm_axis(axis, ndim):
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(a % ndim for a in axis)


def tsum(x: Tensor, axis=None, keepdims=False) -> Tensor:
    shape = x.shape
    axes = _norm_axis(axis, x.ndim)
    out = x.data.sum(axis=axes, keepdims=keepdims)

    def vjp(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g, shape),)

    return _result(np.asarray(out), (x,), vjp)


def mean(x: Tensor, axis=None, keepdims=False) -> Tensor:
    axes = _norm_axis(axis, x.ndim)
    n = int(np.prod([x.shape[a] for a in axes])) if axes else 1
    return mul(tsum(x, axes, keepdims), 1.0 / n)


def reshape(x: Tensor, shape) -> Tensor:
    old = x.shape
    return _result(x.data.reshape(shape), (x,), lambda g: (g.reshape(old),))


def transpose(x: Tensor, axes) -> Tensor:
    inv = np.argsort(axes)
    return _result(np.ascontiguousarray(x.data.transpose(axes)), (x,), lambda g: (g.transpose(inv),))


def getitem(x: Tensor, index) -> Tensor:
    shape, dtype = x.shape, x.dtype

    def vjp(g):
        full = np.zeros(shape, dtype=dtype)
        np.add.at(full, index, g)
        return (full,)

    return _result(np.array(x.data[index]), (x,), vjp)


def concat(tensors: Iterable[Tensor], axis: int = -3) -> Tensor:
    """Concatenate along ``axis`` (default: the channel axis)."""
    tensors = list(tensors)
    if not tensors:
        raise ShapeError("concat of nothing")
    nd = tensors[0].ndim
    ax = axis % nd
    for t in tensors:
        if t.ndim != nd or any(s != r for i, (s, r) in enumerate(zip(t.shape, tensors[0].shape)) if i != ax):
            raise ShapeError(f"concat shape mismatch {[t.shape for t in tensors]}")
    bounds = np.cumsum([t.shape[ax] for t in tensors])[:-1]

    def vjp(g):
        return tuple(np.split(g, bounds, axis=ax))

    return _result(np.concatenate([t.data for t in tensors], axis=ax), tuple(tensors), vjp)


def stack(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    expanded = [reshape(t, t.shape[:axis] + (1,) + t.shape[axis:]) for t in tensors]
    return concat(expanded, axis=axis)
