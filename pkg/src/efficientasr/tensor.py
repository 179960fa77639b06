"""Dense float tensors with reverse-mode autodiff, FLOP accounting, and
live-buffer tracking.

Conventions used throughout the package:

* Buffers are float64 by default; float32 is supported and is what the memory
  benchmark uses.
* The FLOP counter advances by 2*m*n*k per (m,k)x(k,n) matrix product executed
  in a forward op (times the broadcast batch size). Elementwise math, softmax,
  masking, bias adds and normalization count zero, and backward passes are
  never counted.
* Masked logits use the sentinel ``NEG_INF`` instead of a true -inf: it is
  negative enough that ``exp`` underflows to exactly 0.0, but stays absorbing
  under addition, so residual sums over masked score matrices never produce
  NaNs.
* The memory tracker records bytes of every live ``Tensor`` buffer and a high
  water mark. Buffers are freed when their tensor is garbage collected, which
  under CPython refcounting is deterministic for a fixed code path.
"""

from __future__ import annotations

import weakref
from contextlib import contextmanager
from dataclasses import dataclass

import numpy as np

from .errors import DegenerateRowError, ShapeError

NEG_INF = -1.0e30

_grad_enabled = True


def grad_enabled() -> bool:
    return _grad_enabled


@contextmanager
def no_grad():
    """Disable graph construction; forwards inside allocate no tape state."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


@dataclass
class FlopCounter:
    """Accumulates 2*m*n*k per matrix product; everything else is free."""

    matmul_flops: int = 0

    def add_matmul(self, m: int, n: int, k: int, batch: int = 1) -> None:
        self.matmul_flops += 2 * m * n * k * batch

    def reset(self) -> None:
        self.matmul_flops = 0


_counter = FlopCounter()


def flop_counter() -> FlopCounter:
    return _counter


def flop_count() -> int:
    return _counter.matmul_flops


def reset_flops() -> None:
    _counter.reset()


@contextmanager
def use_flop_counter(counter: FlopCounter):
    """Swap in an independent counter (one per concurrent graph)."""
    global _counter
    prev = _counter
    _counter = counter
    try:
        yield counter
    finally:
        _counter = prev


class MemoryTracker:
    """Live tensor-buffer bytes plus a resettable peak."""

    def __init__(self) -> None:
        self.live_bytes = 0
        self.peak_bytes = 0

    def _alloc(self, nbytes: int) -> None:
        self.live_bytes += nbytes
        if self.live_bytes > self.peak_bytes:
            self.peak_bytes = self.live_bytes

    def _free(self, nbytes: int) -> None:
        self.live_bytes -= nbytes

    def reset_peak(self) -> None:
        self.peak_bytes = self.live_bytes


memory = MemoryTracker()

_FLOAT_DTYPES = (np.float32, np.float64)


class Tensor:
    """A dense n-d array that participates in reverse-mode autodiff.

    Non-leaf tensors remember their parents and a gradient closure; calling
    :func:`backward` on a scalar loss accumulates gradients into every
    reachable leaf that has ``requires_grad`` set. Data buffers are always
    owned (never views), so the memory tracker counts each buffer once.
    """

    __slots__ = ("data", "requires_grad", "_grad", "_parents", "_grad_fn", "__weakref__")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = np.array(data, dtype=dtype)
        if arr.dtype not in _FLOAT_DTYPES:
            arr = arr.astype(np.float64)
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self._grad = None
        self._parents = ()
        self._grad_fn = None
        memory._alloc(arr.nbytes)
        weakref.finalize(self, memory._free, arr.nbytes)

    @classmethod
    def _wrap(cls, arr: np.ndarray, parents=(), grad_fn=None) -> "Tensor":
        # internal: adopt a freshly computed array; copy if it is a view
        if arr.base is not None or not arr.flags.owndata:
            arr = arr.copy()
        t = cls.__new__(cls)
        t.data = arr
        if _grad_enabled and grad_fn is not None and any(p.requires_grad for p in parents):
            t.requires_grad = True
            t._parents = tuple(parents)
            t._grad_fn = grad_fn
        else:
            t.requires_grad = False
            t._parents = ()
            t._grad_fn = None
        t._grad = None
        memory._alloc(arr.nbytes)
        weakref.finalize(t, memory._free, arr.nbytes)
        return t

    # ---- metadata ----------------------------------------------------------

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def grad(self) -> np.ndarray:
        """Accumulated gradient; all-zeros for leaves backward never reached."""
        if self._grad is None:
            return np.zeros_like(self.data)
        return self._grad

    def zero_grad(self) -> None:
        self._grad = None

    def is_leaf(self) -> bool:
        return self._grad_fn is None

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() needs a single-element tensor, got shape {self.shape}")
        return float(self.data.reshape(()))

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def astype(self, dtype) -> "Tensor":
        return Tensor(self.data.astype(dtype))

    def backward(self) -> None:
        backward(self)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, dtype={self.data.dtype}, requires_grad={self.requires_grad})"

    # ---- operator sugar ----------------------------------------------------

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return add(neg(self), other)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(self, other)

    def __truediv__(self, other):
        return div(self, other)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __pow__(self, p):
        return pow_scalar(self, p)

    def reshape(self, shape) -> "Tensor":
        return reshape(self, shape)

    def sum(self, axis=None, keepdims=False) -> "Tensor":
        return tsum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False) -> "Tensor":
        return tmean(self, axis=axis, keepdims=keepdims)


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum a broadcast gradient back down to ``shape``."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


def _const_data(x):
    """Accept plain numbers and numpy arrays as non-differentiable operands."""
    if isinstance(x, Tensor):
        return x.data
    return x


# ---- elementwise ops -------------------------------------------------------


def add(a: Tensor, b) -> Tensor:
    if isinstance(b, Tensor):
        out = a.data + b.data
        return Tensor._wrap(
            out, (a, b),
            lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)),
        )
    bd = _const_data(b)
    return Tensor._wrap(a.data + bd, (a,), lambda g: (_unbroadcast(g, a.shape),))


def sub(a: Tensor, b) -> Tensor:
    if isinstance(b, Tensor):
        out = a.data - b.data
        return Tensor._wrap(
            out, (a, b),
            lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)),
        )
    return Tensor._wrap(a.data - _const_data(b), (a,), lambda g: (_unbroadcast(g, a.shape),))


def mul(a: Tensor, b) -> Tensor:
    if isinstance(b, Tensor):
        out = a.data * b.data
        ad, bd = a.data, b.data
        return Tensor._wrap(
            out, (a, b),
            lambda g: (_unbroadcast(g * bd, a.shape), _unbroadcast(g * ad, b.shape)),
        )
    bd = _const_data(b)
    return Tensor._wrap(a.data * bd, (a,), lambda g: (_unbroadcast(g * bd, a.shape),))


def div(a: Tensor, b) -> Tensor:
    if isinstance(b, Tensor):
        out = a.data / b.data
        ad, bd = a.data, b.data
        return Tensor._wrap(
            out, (a, b),
            lambda g: (
                _unbroadcast(g / bd, a.shape),
                _unbroadcast(-g * ad / (bd * bd), b.shape),
            ),
        )
    return mul(a, 1.0 / b)


def neg(a: Tensor) -> Tensor:
    return Tensor._wrap(-a.data, (a,), lambda g: (-g,))


def pow_scalar(a: Tensor, p: float) -> Tensor:
    out = a.data ** p
    ad = a.data
    return Tensor._wrap(out, (a,), lambda g: (g * p * ad ** (p - 1),))


def texp(a: Tensor) -> Tensor:
    out = np.exp(a.data)
    return Tensor._wrap(out, (a,), lambda g: (g * out,))


def tlog(a: Tensor) -> Tensor:
    ad = a.data
    return Tensor._wrap(np.log(ad), (a,), lambda g: (g / ad,))


def relu(a: Tensor) -> Tensor:
    # subgradient at 0 is 0
    mask = a.data > 0
    return Tensor._wrap(np.where(mask, a.data, 0.0), (a,), lambda g: (g * mask,))


def logaddexp(a: Tensor, b: Tensor) -> Tensor:
    out = np.logaddexp(a.data, b.data)
    ad, bd = a.data, b.data
    return Tensor._wrap(
        out, (a, b),
        lambda g: (
            _unbroadcast(g * np.exp(ad - out), a.shape),
            _unbroadcast(g * np.exp(bd - out), b.shape),
        ),
    )


def where(cond: np.ndarray, a, b) -> Tensor:
    """Select ``a`` where ``cond`` else ``b``; ``cond`` is a plain bool array."""
    cond = np.asarray(cond, dtype=bool)
    ad, bd = _const_data(a), _const_data(b)
    out = np.where(cond, ad, bd)
    if isinstance(a, Tensor) and isinstance(b, Tensor):
        return Tensor._wrap(
            out, (a, b),
            lambda g: (
                _unbroadcast(np.where(cond, g, 0.0), a.shape),
                _unbroadcast(np.where(cond, 0.0, g), b.shape),
            ),
        )
    if isinstance(a, Tensor):
        return Tensor._wrap(out, (a,), lambda g: (_unbroadcast(np.where(cond, g, 0.0), a.shape),))
    if isinstance(b, Tensor):
        return Tensor._wrap(out, (b,), lambda g: (_unbroadcast(np.where(cond, 0.0, g), b.shape),))
    return Tensor(out)


# ---- matmul ----------------------------------------------------------------


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Batched matrix product; counts 2*m*n*k FLOPs per matrix pair."""
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError(f"matmul needs matrices, got shapes {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul inner dimensions disagree: {a.shape} vs {b.shape}")
    try:
        batch_shape = np.broadcast_shapes(a.shape[:-2], b.shape[:-2])
    except ValueError as exc:
        raise ShapeError(f"matmul batch prefixes do not broadcast: {a.shape} vs {b.shape}") from exc
    m, k = a.shape[-2], a.shape[-1]
    n = b.shape[-1]
    _counter.add_matmul(m, n, k, batch=int(np.prod(batch_shape, dtype=np.int64)) if batch_shape else 1)
    out = np.matmul(a.data, b.data)
    ad, bd = a.data, b.data

    def grad_fn(g):
        ga = _unbroadcast(np.matmul(g, np.swapaxes(bd, -1, -2)), a.shape)
        gb = _unbroadcast(np.matmul(np.swapaxes(ad, -1, -2), g), b.shape)
        return ga, gb

    return Tensor._wrap(out, (a, b), grad_fn)


# ---- reductions ------------------------------------------------------------


def _norm_axes(axis, ndim):
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(a % ndim for a in axis)


def tsum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    axes = _norm_axes(axis, a.ndim)
    out = a.data.sum(axis=axes, keepdims=keepdims)
    shape = a.shape

    def grad_fn(g):
        if not keepdims:
            expanded = list(g.shape)
            for ax in sorted(axes):
                expanded.insert(ax, 1)
            g = g.reshape(expanded)
        return (np.broadcast_to(g, shape).copy(),)

    return Tensor._wrap(np.asarray(out), (a,), grad_fn)


def tmean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    axes = _norm_axes(axis, a.ndim)
    count = int(np.prod([a.shape[ax] for ax in axes], dtype=np.int64))
    return mul(tsum(a, axis=axis, keepdims=keepdims), 1.0 / count)


# ---- shape ops -------------------------------------------------------------


def reshape(a: Tensor, shape) -> Tensor:
    out = a.data.reshape(shape).copy()
    orig = a.shape
    return Tensor._wrap(out, (a,), lambda g: (g.reshape(orig),))


def transpose(a: Tensor, axes) -> Tensor:
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    out = np.ascontiguousarray(np.transpose(a.data, axes))
    return Tensor._wrap(out, (a,), lambda g: (np.transpose(g, inv),))


def swap_last2(a: Tensor) -> Tensor:
    axes = tuple(range(a.ndim - 2)) + (a.ndim - 1, a.ndim - 2)
    return transpose(a, axes)


def concat(parts, axis: int) -> Tensor:
    parts = list(parts)
    axis = axis % parts[0].ndim
    out = np.concatenate([p.data for p in parts], axis=axis)
    sizes = [p.shape[axis] for p in parts]

    def grad_fn(g):
        grads = []
        start = 0
        for s in sizes:
            idx = [slice(None)] * g.ndim
            idx[axis] = slice(start, start + s)
            grads.append(g[tuple(idx)])
            start += s
        return tuple(grads)

    return Tensor._wrap(out, tuple(parts), grad_fn)


def slice_axis(a: Tensor, axis: int, start: int, stop: int) -> Tensor:
    axis = axis % a.ndim
    idx = [slice(None)] * a.ndim
    idx[axis] = slice(start, stop)
    idx = tuple(idx)
    out = a.data[idx].copy()
    shape = a.shape

    def grad_fn(g):
        full = np.zeros(shape, dtype=g.dtype)
        full[idx] = g
        return (full,)

    return Tensor._wrap(out, (a,), grad_fn)


def split(a: Tensor, n: int, axis: int):
    """Split into n equal contiguous slices along ``axis``."""
    axis = axis % a.ndim
    extent = a.shape[axis]
    if extent % n != 0:
        raise ShapeError(f"cannot split extent {extent} into {n} equal parts")
    step = extent // n
    return [slice_axis(a, axis, i * step, (i + 1) * step) for i in range(n)]


# ---- indexing --------------------------------------------------------------


def embedding(weight: Tensor, ids: np.ndarray) -> Tensor:
    """Row lookup ``weight[ids]`` with scatter-add backward."""
    ids = np.asarray(ids)
    out = weight.data[ids]
    w_shape = weight.shape

    def grad_fn(g):
        gw = np.zeros(w_shape, dtype=g.dtype)
        np.add.at(gw, ids.reshape(-1), g.reshape(-1, w_shape[-1]))
        return (gw,)

    return Tensor._wrap(out, (weight,), grad_fn)


def gather_last(a: Tensor, idx: np.ndarray) -> Tensor:
    """Pick entries along the last axis: out[..., j] = a[..., idx[..., j]]."""
    idx = np.asarray(idx)
    out = np.take_along_axis(a.data, idx, axis=-1)
    shape = a.shape

    def grad_fn(g):
        full = np.zeros(shape, dtype=g.dtype)
        flat = full.reshape(-1, shape[-1])
        idx2 = idx.reshape(-1, idx.shape[-1])
        rows = np.arange(flat.shape[0])[:, None]
        np.add.at(flat, (rows, idx2), g.reshape(-1, idx.shape[-1]))
        return (full,)

    return Tensor._wrap(out, (a,), grad_fn)


# ---- softmax family --------------------------------------------------------


def _check_rows(mx: np.ndarray) -> None:
    bad = ~(mx > NEG_INF / 2)
    if bad.any():
        raise DegenerateRowError("softmax over fully masked row(s)")


def softmax_rows(a: Tensor) -> Tensor:
    """Numerically stable softmax over the last axis.

    Entries at or below the masking sentinel come out as exactly 0.0; a row
    with every entry masked raises :class:`DegenerateRowError`.
    """
    if a.shape[-1] < 1:
        raise ShapeError("softmax over empty last axis")
    mx = a.data.max(axis=-1, keepdims=True)
    _check_rows(mx)
    e = np.exp(a.data - mx)
    out = e / e.sum(axis=-1, keepdims=True)

    def grad_fn(g):
        dot = (g * out).sum(axis=-1, keepdims=True)
        return (out * (g - dot),)

    return Tensor._wrap(out, (a,), grad_fn)


def log_softmax(a: Tensor) -> Tensor:
    mx = a.data.max(axis=-1, keepdims=True)
    _check_rows(mx)
    shifted = a.data - mx
    lse = np.log(np.exp(shifted).sum(axis=-1, keepdims=True))
    out = shifted - lse
    sm = np.exp(out)

    def grad_fn(g):
        return (g - sm * g.sum(axis=-1, keepdims=True),)

    return Tensor._wrap(out, (a,), grad_fn)


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float) -> Tensor:
    """Normalize the last axis to zero mean / unit variance, then affine."""
    if eps <= 0:
        raise ShapeError("layer_norm eps must be positive")
    mu = tmean(x, axis=-1, keepdims=True)
    centered = sub(x, mu)
    var = tmean(mul(centered, centered), axis=-1, keepdims=True)
    inv = pow_scalar(add(var, eps), -0.5)
    return add(mul(mul(centered, inv), gamma), beta)


def dropout(x: Tensor, p: float, rng: np.random.Generator, train: bool) -> Tensor:
    if not train or p <= 0.0:
        return x
    keep = (rng.random(x.shape) >= p).astype(x.dtype) / (1.0 - p)
    return mul(x, keep)


# ---- backward --------------------------------------------------------------


def backward(loss: Tensor) -> None:
    """Reverse-mode sweep from a scalar loss.

    Gradients accumulate into ``_grad`` of every reachable leaf with
    ``requires_grad``; repeated calls without ``zero_grad`` keep accumulating.
    """
    if loss.data.size != 1:
        raise ShapeError(f"backward requires a scalar loss, got shape {loss.shape}")

    topo: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(loss, False)]
    while stack:
        node, processed = stack.pop()
        if processed:
            topo.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if id(p) not in seen:
                stack.append((p, False))

    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for node in reversed(topo):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node._grad_fn is None:
            if node.requires_grad:
                node._grad = g.copy() if node._grad is None else node._grad + g
            continue
        for parent, pg in zip(node._parents, node._grad_fn(g)):
            if pg is None or not parent.requires_grad:
                continue
            key = id(parent)
            if key in grads:
                grads[key] = grads[key] + pg
            else:
                grads[key] = pg


# ---- constructors & init ---------------------------------------------------


def zeros(shape, dtype=np.float64) -> Tensor:
    return Tensor(np.zeros(shape, dtype=dtype))


def full(shape, value: float, dtype=np.float64) -> Tensor:
    return Tensor(np.full(shape, value, dtype=dtype))


def spawn_rngs(seed: int, n: int) -> list[np.random.Generator]:
    """n independent generators split off one 64-bit seed."""
    return [np.random.Generator(np.random.PCG64(s)) for s in np.random.SeedSequence(seed).spawn(n)]


def xavier_uniform(rng: np.random.Generator, fan_in: int, fan_out: int, shape=None, dtype=np.float64) -> np.ndarray:
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    if shape is None:
        shape = (fan_in, fan_out)
    return rng.uniform(-limit, limit, size=shape).astype(dtype)
