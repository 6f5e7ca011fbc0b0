"""Dense float tensors with tape-based reverse-mode differentiation.

Values live in row-major numpy arrays (32-bit by default). Operations executed
while a :class:`GradTape` is active, and touching at least one tensor that
requires a gradient, are appended to the tape; :func:`backward` replays the
tape in reverse. Outside a tape nothing is recorded, which is the inference
path.
"""

from __future__ import annotations

import threading
from contextlib import contextmanager
from typing import Callable, Iterator, Optional, Sequence

import numpy as np

ACC = np.float64

_state = threading.local()


def storage_dtype() -> type:
    return getattr(_state, "dtype", np.float32)


@contextmanager
def precision(dtype) -> Iterator[None]:
    """Temporarily change the storage dtype of newly created tensors.

    Only meant for numerical debugging (finite-difference checks); training
    always runs at the 32-bit default.
    """
    prev = storage_dtype()
    _state.dtype = np.dtype(dtype).type
    try:
        yield
    finally:
        _state.dtype = prev


def _tape_stack() -> list:
    stack = getattr(_state, "tapes", None)
    if stack is None:
        stack = _state.tapes = []
    return stack


def active_tape() -> Optional["GradTape"]:
    stack = _tape_stack()
    return stack[-1] if stack else None


class Tensor:
    """An n-dimensional float array that may participate in differentiation."""

    __array_priority__ = 100  # make ndarray (op) Tensor defer to Tensor

    def __init__(self, data, requires_grad: bool = False, name: Optional[str] = None):
        arr = np.asarray(data)
        dtype = storage_dtype()
        if arr.dtype != dtype:
            arr = arr.astype(dtype)
        self.data: np.ndarray = np.ascontiguousarray(arr)
        self.requires_grad = bool(requires_grad)
        self.name = name
        self.grad: Optional[Tensor] = None
        self._tape: Optional[GradTape] = None

    # -- introspection -------------------------------------------------
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
        return self._tape is None

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        if self.data.size != 1:
            raise ValueError(f"expected a scalar tensor, got shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def __repr__(self) -> str:
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad}{tag})"

    def __len__(self) -> int:
        return self.shape[0]

    # -- operator sugar ------------------------------------------------
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

    def __pow__(self, p: float):
        return power(self, p)

    def reshape(self, *shape) -> "Tensor":
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes) -> "Tensor":
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes or None)

    @property
    def T(self) -> "Tensor":
        return transpose(self, None)

    def sum(self, axis=None, keepdims: bool = False) -> "Tensor":
        return tsum(self, axis, keepdims)

    def mean(self, axis=None, keepdims: bool = False) -> "Tensor":
        return mean(self, axis, keepdims)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


class GradTape:
    """Ordered record of differentiable operations for one backward pass.

    Use as a context manager. The tape is single-writer; concurrent threads
    each need their own tape (the active tape is thread-local).
    """

    def __init__(self) -> None:
        self.records: list[tuple[Tensor, tuple[Tensor, ...], Callable]] = []
        self.consumed = False

    def __enter__(self) -> "GradTape":
        _tape_stack().append(self)
        return self

    def __exit__(self, *exc) -> None:
        stack = _tape_stack()
        if stack and stack[-1] is self:
            stack.pop()
        else:  # pragma: no cover - misuse guard
            stack.remove(self)

    def __len__(self) -> int:
        return len(self.records)

    def record(self, out: Tensor, inputs: tuple[Tensor, ...], vjp: Callable) -> None:
        out._tape = self
        self.records.append((out, inputs, vjp))

    def gradient(self, loss: Tensor) -> dict[Tensor, Tensor]:
        if loss.data.size != 1:
            raise ValueError(f"backward needs a scalar loss, got shape {loss.shape}")
        if loss._tape is not self:
            raise ValueError("loss was not produced under this tape")
        grads: dict[int, np.ndarray] = {id(loss): np.ones(loss.shape, dtype=ACC)}
        leaves: dict[int, Tensor] = {}
        for out, inputs, vjp in reversed(self.records):
            g = grads.pop(id(out), None)
            if g is None:
                continue
            in_grads = vjp(g)
            for inp, ig in zip(inputs, in_grads):
                if ig is None or not inp.requires_grad:
                    continue
                key = id(inp)
                if key in grads:
                    grads[key] = grads[key] + ig
                else:
                    grads[key] = np.asarray(ig, dtype=ACC)
                if inp._tape is None:
                    leaves[key] = inp
        result = {}
        for key, leaf in leaves.items():
            gt = Tensor(grads[key].reshape(leaf.shape))
            leaf.grad = gt
            result[leaf] = gt
        self.consumed = True
        return result


def backward(loss: Tensor) -> dict[Tensor, Tensor]:
    """Gradients of a scalar ``loss`` for every reachable ``requires_grad`` leaf.

    Leaf ``.grad`` attributes are set as a side effect. Tensors used several
    times receive the sum of their per-use gradients.
    """
    if loss.data.size != 1:
        raise ValueError(f"backward needs a scalar loss, got shape {loss.shape}")
    if loss._tape is None:
        raise ValueError("loss has no recorded history; compute it under an active GradTape")
    return loss._tape.gradient(loss)


def _emit(data: np.ndarray, inputs: Sequence[Tensor], vjp: Callable) -> Tensor:
    tape = active_tape()
    needs = tape is not None and any(t.requires_grad for t in inputs)
    out = Tensor(data, requires_grad=needs)
    if needs:
        tape.record(out, tuple(inputs), vjp)
    return out


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


# ---------------------------------------------------------------------------
# elementwise


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    sa, sb = a.shape, b.shape
    return _emit(a.data + b.data, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    sa, sb = a.shape, b.shape
    return _emit(a.data - b.data, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(-g, sb)))


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    ad, bd = a.data, b.data

    def vjp(g):
        ga = _unbroadcast(g * bd, ad.shape) if a.requires_grad else None
        gb = _unbroadcast(g * ad, bd.shape) if b.requires_grad else None
        return ga, gb

    return _emit(ad * bd, (a, b), vjp)


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    ad, bd = a.data.astype(ACC), b.data.astype(ACC)

    def vjp(g):
        ga = _unbroadcast(g / bd, ad.shape) if a.requires_grad else None
        gb = _unbroadcast(-g * ad / (bd * bd), bd.shape) if b.requires_grad else None
        return ga, gb

    return _emit(ad / bd, (a, b), vjp)


def power(x: Tensor, p: float) -> Tensor:
    xd = x.data.astype(ACC)
    return _emit(xd**p, (x,), lambda g: (g * p * xd ** (p - 1),))


def exp(x: Tensor) -> Tensor:
    y = np.exp(x.data.astype(ACC))
    return _emit(y, (x,), lambda g: (g * y,))


def log(x: Tensor) -> Tensor:
    xd = x.data.astype(ACC)
    return _emit(np.log(xd), (x,), lambda g: (g / xd,))


def sigmoid(x: Tensor) -> Tensor:
    s = _sigmoid(x.data.astype(ACC))
    return _emit(s, (x,), lambda g: (g * s * (1.0 - s),))


def _sigmoid(z: np.ndarray) -> np.ndarray:
    return 0.5 * (1.0 + np.tanh(0.5 * z))


def silu(x: Tensor) -> Tensor:
    z = x.data.astype(ACC)
    s = _sigmoid(z)
    return _emit(z * s, (x,), lambda g: (g * (s * (1.0 + z * (1.0 - s))),))


def gelu(x: Tensor) -> Tensor:
    """Exact (erf-based) GELU."""
    from scipy.special import erf

    z = x.data.astype(ACC)
    cdf = 0.5 * (1.0 + erf(z / np.sqrt(2.0)))
    pdf = np.exp(-0.5 * z * z) / np.sqrt(2.0 * np.pi)
    return _emit(z * cdf, (x,), lambda g: (g * (cdf + z * pdf),))


# ---------------------------------------------------------------------------
# shape


def reshape(x: Tensor, shape) -> Tensor:
    src = x.shape
    return _emit(x.data.reshape(shape), (x,), lambda g: (g.reshape(src),))


def transpose(x: Tensor, axes=None) -> Tensor:
    if axes is None:
        axes = tuple(reversed(range(x.ndim)))
    inv = tuple(np.argsort(axes))
    return _emit(np.transpose(x.data, axes), (x,), lambda g: (np.transpose(g, inv),))


def gather_rows(x: Tensor, index) -> Tensor:
    """Rows of ``x`` (along axis 0) at integer positions ``index``."""
    idx = np.asarray(index, dtype=np.int64)
    src = x.shape

    def vjp(g):
        out = np.zeros(src, dtype=ACC)
        np.add.at(out, idx, g)
        return (out,)

    return _emit(x.data[idx], (x,), vjp)


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    sizes = [t.shape[axis] for t in tensors]
    cuts = np.cumsum(sizes)[:-1]
    return _emit(
        np.concatenate([t.data for t in tensors], axis=axis),
        tensors,
        lambda g: tuple(np.split(g, cuts, axis=axis)),
    )


# ---------------------------------------------------------------------------
# reductions and products


def tsum(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    src = x.shape
    out = x.data.astype(ACC).sum(axis=axis, keepdims=keepdims)

    def vjp(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, src),)

    return _emit(out, (x,), vjp)


def mean(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    n = x.data.size if axis is None else int(np.prod([x.shape[a] for a in np.atleast_1d(axis)]))
    return mul(tsum(x, axis, keepdims), 1.0 / n)


def matmul(a, b) -> Tensor:
    """Matrix product over the last two axes with 64-bit accumulation.

    ``b`` may be 2-D (a shared weight) or carry the same leading axes as ``a``.
    """
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ValueError(f"matmul dimension mismatch: {a.shape} x {b.shape}")
    if b.ndim > 2 and a.shape[:-2] != b.shape[:-2]:
        raise ValueError(f"matmul batch dimension mismatch: {a.shape} x {b.shape}")
    # the closure keeps the stored arrays and widens them only when replayed
    a_kept, b_kept = a.data, b.data

    def vjp(g):
        ga = g @ np.swapaxes(b_kept.astype(ACC), -1, -2) if a.requires_grad else None
        gb = None
        if b.requires_grad:
            ad = a_kept.astype(ACC)
            if b_kept.ndim == 2:
                gb = ad.reshape(-1, ad.shape[-1]).T @ g.reshape(-1, g.shape[-1])
            else:
                gb = np.swapaxes(ad, -1, -2) @ g
        return ga, gb

    return _emit(a_kept.astype(ACC) @ b_kept.astype(ACC), (a, b), vjp)


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    """Stable softmax; rows that are entirely ``-inf`` give all-zero output.

    The returned tensor carries ``masked_rows``, a boolean array flagging
    those fully masked rows.
    """
    z = x.data.astype(ACC)
    m = np.max(z, axis=axis, keepdims=True)
    dead = ~np.isfinite(m)
    m = np.where(dead, 0.0, m)
    e = np.exp(z - m)
    s = e.sum(axis=axis, keepdims=True)
    y = np.divide(e, s, out=np.zeros_like(e), where=s > 0)

    def vjp(g):
        p = out.data.astype(ACC)
        return (p * (g - (g * p).sum(axis=axis, keepdims=True)),)

    out = _emit(y, (x,), vjp)
    out.masked_rows = np.squeeze(dead, axis=axis)
    return out


def log_softmax(x: Tensor, axis: int = -1) -> Tensor:
    z = x.data.astype(ACC)
    m = z.max(axis=axis, keepdims=True)
    lse = m + np.log(np.exp(z - m).sum(axis=axis, keepdims=True))
    y = z - lse
    p = np.exp(y)
    return _emit(y, (x,), lambda g: (g - p * g.sum(axis=axis, keepdims=True),))


IGNORE_INDEX = -100


def cross_entropy(logits: Tensor, targets, ignore_index: int = IGNORE_INDEX) -> Tensor:
    """Mean negative log-likelihood over rows whose target is not ``ignore_index``."""
    if logits.ndim != 2:
        raise ValueError(f"cross_entropy expects [n, V] logits, got {logits.shape}")
    t = np.asarray(targets, dtype=np.int64).reshape(-1)
    n, vocab = logits.shape
    if t.shape[0] != n:
        raise ValueError(f"{n} logit rows but {t.shape[0]} targets")
    keep = t != ignore_index
    count = int(keep.sum())
    if count == 0:
        raise ValueError("empty loss: every target is ignore_index")
    rows = np.nonzero(keep)[0]
    tk = t[keep]
    if tk.min() < 0 or tk.max() >= vocab:
        raise ValueError(f"target out of range [0, {vocab})")
    z = logits.data[rows].astype(ACC)
    m = z.max(axis=1, keepdims=True)
    e = np.exp(z - m)
    se = e.sum(axis=1, keepdims=True)
    lse = m[:, 0] + np.log(se[:, 0])
    loss = np.sum(lse - z[np.arange(count), tk]) / count

    def vjp(g):
        p = e / se
        p[np.arange(count), tk] -= 1.0
        full = np.zeros((n, vocab), dtype=ACC)
        full[rows] = p * (g / count)
        return (full,)

    return _emit(np.asarray(loss), (logits,), vjp)
