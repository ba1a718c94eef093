"""Dense tensors with a reverse-mode differentiation tape.

A :class:`Tape` is opened as a context manager around one forward pass.
Every primitive whose inputs include a tracked tensor (a leaf with
``requires_grad=True`` or an output already recorded on the active tape)
records a node holding its vector-Jacobian product.  ``tape.backward(loss)``
walks the nodes in reverse recording order, which is a valid reverse
topological order because a node can only reference earlier nodes.

Outside a tape, primitives are plain numpy computations returning detached
tensors.
"""

from __future__ import annotations

import contextlib
import math
import threading
from typing import Callable, Sequence

import numpy as np

__all__ = [
    "Tensor",
    "Tape",
    "ShapeError",
    "TapeError",
    "tensor",
    "as_tensor",
    "add",
    "sub",
    "mul",
    "scale",
    "matmul",
    "transpose",
    "exp",
    "power",
    "square",
    "sqrt",
    "gelu",
    "concat",
    "softmax",
    "layer_norm",
    "mean",
    "sum",
    "reshape",
    "take",
    "grad_check",
    "set_default_dtype",
    "get_default_dtype",
    "set_strict",
    "MASK_VALUE",
]

# finite stand-in for -inf in additive attention masks
MASK_VALUE = -1e30

_config = {"dtype": np.float64, "strict": False}
_local = threading.local()


class ShapeError(ValueError):
    """Operand shapes are incompatible for the requested primitive."""


class TapeError(RuntimeError):
    """Misuse of the differentiation tape."""


def set_default_dtype(dtype) -> None:
    dtype = np.dtype(dtype)
    if dtype not in (np.dtype(np.float32), np.dtype(np.float64)):
        raise ValueError(f"unsupported dtype {dtype}; use float32 or float64")
    _config["dtype"] = dtype.type


def get_default_dtype():
    return _config["dtype"]


@contextlib.contextmanager
def default_dtype(dtype):
    """Temporarily switch the default precision."""
    old = _config["dtype"]
    set_default_dtype(dtype)
    try:
        yield
    finally:
        _config["dtype"] = old


def set_strict(flag: bool) -> None:
    """When on, every primitive rejects non-finite inputs."""
    _config["strict"] = bool(flag)


def _active_tape() -> Tape | None:
    stack = getattr(_local, "stack", None)
    return stack[-1] if stack else None


class Tensor:
    __slots__ = ("data", "requires_grad", "_tape", "_nid")
    __array_priority__ = 1000

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = np.asarray(data, dtype=dtype or _config["dtype"])
        if arr.ndim == 0:
            arr = arr.reshape(())
        self.data = arr
        self.requires_grad = requires_grad
        self._tape: Tape | None = None
        self._nid: int | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> Tensor:
        return Tensor(self.data)

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"

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

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return take(self, index)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        return transpose(self, axes or None)

    def sum(self, axis=None, keepdims=False):
        return sum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis=axis, keepdims=keepdims)


def tensor(data, requires_grad: bool = False) -> Tensor:
    return Tensor(data, requires_grad=requires_grad)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


class Tape:
    """Records primitives for one forward pass; consumed by ``backward``."""

    def __init__(self):
        self._parents: list[tuple[int | None, ...]] = []
        self._vjps: list[Callable] = []
        self._leaf_nid: dict[int, int] = {}
        self._leaves: list[Tensor] = []
        self._grads: dict[int, np.ndarray] | None = None
        self._consumed = False

    def __enter__(self) -> Tape:
        stack = getattr(_local, "stack", None)
        if stack is None:
            stack = _local.stack = []
        stack.append(self)
        return self

    def __exit__(self, *exc) -> None:
        _local.stack.pop()

    def __len__(self) -> int:
        return len(self._vjps)

    def _nid_of(self, t: Tensor) -> int | None:
        if t._tape is self:
            return t._nid
        if t.requires_grad:
            key = id(t)
            nid = self._leaf_nid.get(key)
            if nid is None:
                nid = len(self._vjps)
                self._parents.append(())
                self._vjps.append(None)
                self._leaf_nid[key] = nid
                self._leaves.append(t)
            return nid
        return None

    def _record(self, parent_ids, vjp) -> int:
        nid = len(self._vjps)
        self._parents.append(parent_ids)
        self._vjps.append(vjp)
        return nid

    def backward(self, loss: Tensor) -> dict[int, np.ndarray]:
        """Populate gradients of ``loss`` for every recorded ancestor."""
        if self._consumed:
            raise TapeError("backward already ran on this tape; record a new forward pass")
        if loss.size != 1:
            raise TapeError(f"loss must be a scalar, got shape {loss.shape}")
        if loss._tape is not self:
            raise TapeError("loss is not attached to this tape")
        grads: dict[int, np.ndarray] = {loss._nid: np.ones_like(loss.data)}
        for nid in range(loss._nid, -1, -1):
            g = grads.get(nid)
            vjp = self._vjps[nid]
            if g is None or vjp is None:
                continue
            parents = self._parents[nid]
            pgrads = vjp(g)
            for pid, pg in zip(parents, pgrads):
                if pid is None or pg is None:
                    continue
                prev = grads.get(pid)
                grads[pid] = pg if prev is None else prev + pg
            if nid != loss._nid:
                del grads[nid]
        # drop closures so intermediate buffers can be freed
        self._vjps = [None] * len(self._vjps)
        self._grads = grads
        self._consumed = True
        return grads

    def grad(self, t: Tensor) -> np.ndarray:
        """Gradient of a leaf tensor; zeros if it did not contribute to the loss."""
        if self._grads is None:
            raise TapeError("backward has not run")
        nid = t._nid if t._tape is self else self._leaf_nid.get(id(t))
        g = None if nid is None else self._grads.get(nid)
        return np.zeros_like(t.data) if g is None else g


def _check_finite(arrays) -> None:
    for a in arrays:
        if not np.all(np.isfinite(a)):
            raise FloatingPointError("non-finite input to primitive (strict mode)")


def _make(data: np.ndarray, parents: Sequence[Tensor], vjp) -> Tensor:
    out = Tensor.__new__(Tensor)
    out.data = data
    out.requires_grad = False
    out._tape = None
    out._nid = None
    tape = _active_tape()
    if tape is None or tape._consumed:
        return out
    pids = tuple(tape._nid_of(p) for p in parents)
    if all(p is None for p in pids):
        return out
    out._tape = tape
    out._nid = tape._record(pids, vjp)
    return out


def _prep(*xs) -> list[Tensor]:
    ts = [as_tensor(x) for x in xs]
    if _config["strict"]:
        _check_finite([t.data for t in ts])
    return ts


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


def _broadcast_shape(op: str, a, b) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError as exc:
        raise ShapeError(f"{op}: cannot broadcast {a.shape} with {b.shape}") from exc


# elementwise ----------------------------------------------------------------


def add(a, b) -> Tensor:
    a, b = _prep(a, b)
    _broadcast_shape("add", a, b)
    sa, sb = a.shape, b.shape
    return _make(a.data + b.data, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))


def sub(a, b) -> Tensor:
    a, b = _prep(a, b)
    _broadcast_shape("sub", a, b)
    sa, sb = a.shape, b.shape
    return _make(a.data - b.data, (a, b), lambda g: (_unbroadcast(g, sa), -_unbroadcast(g, sb)))


def mul(a, b) -> Tensor:
    a, b = _prep(a, b)
    _broadcast_shape("mul", a, b)
    ad, bd = a.data, b.data
    return _make(
        ad * bd,
        (a, b),
        lambda g: (_unbroadcast(g * bd, ad.shape), _unbroadcast(g * ad, bd.shape)),
    )


def scale(a, c: float) -> Tensor:
    (a,) = _prep(a)
    c = float(c)
    return _make(a.data * c, (a,), lambda g: (g * c,))


def exp(a) -> Tensor:
    (a,) = _prep(a)
    out = np.exp(a.data)
    return _make(out, (a,), lambda g: (g * out,))


def power(a, p: float) -> Tensor:
    (a,) = _prep(a)
    ad = a.data
    return _make(ad**p, (a,), lambda g: (g * p * ad ** (p - 1),))


def square(a) -> Tensor:
    (a,) = _prep(a)
    ad = a.data
    return _make(ad * ad, (a,), lambda g: (2.0 * g * ad,))


def sqrt(a) -> Tensor:
    (a,) = _prep(a)
    out = np.sqrt(a.data)
    return _make(out, (a,), lambda g: (g * 0.5 / out,))


_GELU_C = math.sqrt(2.0 / math.pi)


def gelu(a) -> Tensor:
    """GELU, tanh approximation."""
    (a,) = _prep(a)
    x = a.data
    inner = _GELU_C * (x + 0.044715 * x * x * x)
    th = np.tanh(inner)
    out = 0.5 * x * (1.0 + th)

    def vjp(g):
        dinner = _GELU_C * (1.0 + 3 * 0.044715 * x * x)
        return (g * (0.5 * (1.0 + th) + 0.5 * x * (1.0 - th * th) * dinner),)

    return _make(out, (a,), vjp)


# linear algebra and layout -------------------------------------------------


def matmul(a, b) -> Tensor:
    a, b = _prep(a, b)
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError(f"matmul needs operands of rank >= 2, got {a.shape} @ {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: inner dims differ, {a.shape} @ {b.shape}")
    try:
        out = np.matmul(a.data, b.data)
    except ValueError as exc:
        raise ShapeError(f"matmul: {exc}") from exc
    ad, bd = a.data, b.data

    def vjp(g):
        ga = np.matmul(g, np.swapaxes(bd, -1, -2))
        gb = np.matmul(np.swapaxes(ad, -1, -2), g)
        return _unbroadcast(ga, ad.shape), _unbroadcast(gb, bd.shape)

    return _make(out, (a, b), vjp)


def transpose(a, axes=None) -> Tensor:
    """Permute axes; by default swap the last two."""
    (a,) = _prep(a)
    if axes is None:
        if a.ndim < 2:
            raise ShapeError("transpose needs rank >= 2")
        axes = list(range(a.ndim))
        axes[-1], axes[-2] = axes[-2], axes[-1]
    axes = tuple(axes)
    if sorted(axes) != list(range(a.ndim)):
        raise ShapeError(f"transpose: axes {axes} invalid for rank {a.ndim}")
    inv = tuple(np.argsort(axes))
    return _make(np.transpose(a.data, axes), (a,), lambda g: (np.transpose(g, inv),))


def reshape(a, shape) -> Tensor:
    (a,) = _prep(a)
    src = a.shape
    try:
        out = a.data.reshape(shape)
    except ValueError as exc:
        raise ShapeError(f"reshape: {src} -> {shape}") from exc
    return _make(out, (a,), lambda g: (g.reshape(src),))


def take(a, index) -> Tensor:
    """Basic (slice/integer) indexing."""
    (a,) = _prep(a)
    src_shape, dtype = a.shape, a.data.dtype
    out = a.data[index]

    def vjp(g):
        full = np.zeros(src_shape, dtype=dtype)
        full[index] += g
        return (full,)

    return _make(np.ascontiguousarray(out), (a,), vjp)


def concat(tensors: Sequence, axis: int = 0) -> Tensor:
    ts = _prep(*tensors)
    if not ts:
        raise ShapeError("concat of an empty list")
    try:
        out = np.concatenate([t.data for t in ts], axis=axis)
    except ValueError as exc:
        raise ShapeError(f"concat: {exc}") from exc
    bounds = np.cumsum([t.shape[axis] for t in ts])[:-1]

    def vjp(g):
        return tuple(np.split(g, bounds, axis=axis))

    return _make(out, ts, vjp)


# reductions ------------------------------------------------------------------


def sum(a, axis=None, keepdims: bool = False) -> Tensor:  # noqa: A001
    (a,) = _prep(a)
    src = a.shape
    out = np.sum(a.data, axis=axis, keepdims=keepdims)

    def vjp(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, src).copy(),)

    return _make(np.asarray(out), (a,), vjp)


def mean(a, axis=None, keepdims: bool = False) -> Tensor:
    (a,) = _prep(a)
    src = a.shape
    if axis is None:
        count = a.size
    else:
        axes = (axis,) if isinstance(axis, int) else tuple(axis)
        count = int(np.prod([src[i] for i in axes]))
    out = np.mean(a.data, axis=axis, keepdims=keepdims)

    def vjp(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g / count, src).copy(),)

    return _make(np.asarray(out), (a,), vjp)


# normalisation ----------------------------------------------------------------


def softmax(a, mask=None, axis: int = -1) -> Tensor:
    """Softmax of ``a + mask`` along ``axis``; ``mask`` is an additive constant.

    Masked entries should carry ``MASK_VALUE``; they receive exactly zero weight.
    """
    (a,) = _prep(a)
    x = a.data
    if mask is not None:
        mask = np.asarray(mask, dtype=x.dtype)
        try:
            x = x + mask
        except ValueError as exc:
            raise ShapeError(f"softmax: mask {mask.shape} vs logits {a.shape}") from exc
        if x.shape != a.shape:
            raise ShapeError(f"softmax: mask {mask.shape} would broadcast logits {a.shape}")
    e = np.exp(x - x.max(axis=axis, keepdims=True))
    out = e / e.sum(axis=axis, keepdims=True)

    def vjp(g):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)

    return _make(out, (a,), vjp)


def layer_norm(a, gain=None, bias=None, eps: float = 1e-5) -> Tensor:
    """Normalise over the last axis, then apply optional elementwise gain and bias."""
    ins = [a] + [t for t in (gain, bias) if t is not None]
    ts = _prep(*ins)
    a = ts[0]
    g_t = ts[1] if gain is not None else None
    b_t = ts[-1] if bias is not None else None
    x = a.data
    mu = x.mean(axis=-1, keepdims=True)
    xc = x - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    out = xhat
    if g_t is not None:
        out = out * g_t.data
    if b_t is not None:
        out = out + b_t.data
    def vjp(g):
        grads = []
        gx = g * g_t.data if g_t is not None else g
        dx = inv * (gx - gx.mean(axis=-1, keepdims=True) - xhat * (gx * xhat).mean(axis=-1, keepdims=True))
        grads.append(dx)
        if g_t is not None:
            grads.append(_unbroadcast(g * xhat, g_t.shape))
        if b_t is not None:
            grads.append(_unbroadcast(g, b_t.shape))
        return tuple(grads)

    return _make(out, ts, vjp)


# finite-difference oracle ----------------------------------------------------


def grad_check(
    f: Callable[..., Tensor],
    inputs: Sequence,
    fd_step: float = 1e-6,
    max_entries: int | None = None,
    rng: np.random.Generator | None = None,
) -> float:
    """Max relative error between tape gradients and central differences.

    ``inputs`` may be arrays (wrapped as fresh leaves) or leaf tensors, whose
    ``data`` is perturbed temporarily and restored.  ``f(*inputs)`` must return
    a scalar tensor.  The error per entry is ``|analytic - fd| / max(1, |fd|)``.
    With ``max_entries`` set, at most that many entries per input are probed,
    chosen with ``rng``.  Non-finite differences yield ``inf``.
    """
    leaves = []
    for x in inputs:
        if isinstance(x, Tensor):
            x.requires_grad = True
            leaves.append(x)
        else:
            leaves.append(Tensor(np.array(x, dtype=_config["dtype"]), requires_grad=True))
    with Tape() as tape:
        out = f(*leaves)
    tape.backward(out)
    analytic = [tape.grad(t).copy() for t in leaves]

    def value() -> float:
        return float(f(*leaves).data)

    rng = rng or np.random.default_rng(0)
    worst = 0.0
    for t, ga in zip(leaves, analytic):
        flat_idx = np.arange(t.size)
        if max_entries is not None and t.size > max_entries:
            flat_idx = rng.choice(t.size, size=max_entries, replace=False)
        original = t.data
        work = original.copy()
        t.data = work
        flat = work.reshape(-1)
        try:
            for j in flat_idx:
                keep = flat[j]
                flat[j] = keep + fd_step
                fp = value()
                flat[j] = keep - fd_step
                fm = value()
                flat[j] = keep
                fd = (fp - fm) / (2 * fd_step)
                a = ga.reshape(-1)[j]
                if not (np.isfinite(fd) and np.isfinite(a)):
                    return math.inf
                worst = max(worst, abs(a - fd) / max(1.0, abs(fd)))
        finally:
            t.data = original
    return worst
