"""Dense tensors with reverse-mode automatic differentiation.

A Tensor wraps a row-major numpy buffer (f32 or f64). Differentiable ops
record themselves on the innermost active Tape; running backward() over a
tape in reverse execution order populates .grad on every tensor that
requires gradients and is reachable from the loss. Without an active tape
ops run forward-only, which is what inference uses.
"""

from __future__ import annotations

import numpy as np

DTYPES = {"f32": np.float32, "f64": np.float64}
_NP_TO_NAME = {np.dtype(np.float32): "f32", np.dtype(np.float64): "f64"}


def _as_dtype(dtype):
    if isinstance(dtype, str):
        if dtype not in DTYPES:
            raise ValueError(f"unsupported dtype {dtype!r}, expected one of {sorted(DTYPES)}")
        return np.dtype(DTYPES[dtype])
    d = np.dtype(dtype)
    if d not in _NP_TO_NAME:
        raise ValueError(f"unsupported dtype {d}, expected f32 or f64")
    return d


class Tensor:
    """n-dimensional array with an optional gradient slot."""

    __slots__ = ("data", "requires_grad", "grad")

    def __init__(self, data, dtype=None, requires_grad: bool = False):
        if isinstance(data, Tensor):
            data = data.data
        arr = np.asarray(data)
        if dtype is None:
            dtype = arr.dtype if arr.dtype in _NP_TO_NAME else np.float32
        self.data = np.ascontiguousarray(arr, dtype=_as_dtype(dtype))
        self.requires_grad = bool(requires_grad)
        self.grad = None

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
    def dtype(self) -> str:
        return _NP_TO_NAME[self.data.dtype]

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0])

    def detach(self) -> "Tensor":
        return Tensor(self.data.copy(), dtype=self.data.dtype)

    def astype(self, dtype) -> "Tensor":
        return Tensor(self.data.astype(_as_dtype(dtype)), requires_grad=self.requires_grad)

    def zero_grad(self):
        self.grad = None

    def __repr__(self):
        return f"Tensor(shape={self.shape}, dtype={self.dtype}, requires_grad={self.requires_grad})"

    # arithmetic sugar; the real work lives in the module-level ops
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        if isinstance(other, Tensor):
            return hadamard(self, other)
        return scale(self, other)

    def __rmul__(self, other):
        return scale(self, other)

    def __neg__(self):
        return scale(self, -1.0)


class Parameter(Tensor):
    """A trainable leaf tensor."""

    def __init__(self, data, dtype=None):
        super().__init__(data, dtype=dtype, requires_grad=True)


class _Node:
    __slots__ = ("out", "inputs", "backward_fn")

    def __init__(self, out, inputs, backward_fn):
        self.out = out
        self.inputs = inputs
        self.backward_fn = backward_fn


_TAPE_STACK: list["Tape"] = []


class Tape:
    """Ordered record of executed ops; execution order is topological order."""

    def __init__(self):
        self.nodes: list[_Node] = []
        self._outputs: set[int] = set()

    def __enter__(self):
        _TAPE_STACK.append(self)
        return self

    def __exit__(self, *exc):
        assert _TAPE_STACK and _TAPE_STACK[-1] is self
        _TAPE_STACK.pop()
        return False

    def owns(self, t: Tensor) -> bool:
        return id(t) in self._outputs

    def backward(self, loss: Tensor):
        backward(loss, self)


def active_tape():
    return _TAPE_STACK[-1] if _TAPE_STACK else None


def record(out: Tensor, inputs, backward_fn):
    """Attach a backward rule to out if a tape is active and gradients flow."""
    tape = active_tape()
    if tape is None:
        return out
    ins = [i for i in inputs if isinstance(i, Tensor)]
    if not any(i.requires_grad for i in ins):
        return out
    out.requires_grad = True
    tape.nodes.append(_Node(out, ins, backward_fn))
    tape._outputs.add(id(out))
    return out


def backward(loss: Tensor, tape: Tape):
    """Populate .grad for every requires_grad tensor reachable from loss."""
    if loss.size != 1:
        raise ValueError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not tape.owns(loss):
        raise ValueError("loss was not produced on this tape")
    loss.grad = np.ones_like(loss.data)
    for node in reversed(tape.nodes):
        g = node.out.grad
        if g is None:
            continue
        grads = node.backward_fn(g)
        for inp, gi in zip(node.inputs, grads):
            if gi is None or not inp.requires_grad:
                continue
            # accumulation never mutates in place, so aliasing upstream grads is fine
            inp.grad = gi if inp.grad is None else inp.grad + gi


# ---------------------------------------------------------------------------
# construction helpers

def zeros(shape, dtype="f32", requires_grad=False):
    return Tensor(np.zeros(shape, dtype=_as_dtype(dtype)), requires_grad=requires_grad)


def ones(shape, dtype="f32", requires_grad=False):
    return Tensor(np.ones(shape, dtype=_as_dtype(dtype)), requires_grad=requires_grad)


def xavier_init(fan_in: int, fan_out: int, shape, seed: int, dtype="f32") -> Tensor:
    """Uniform Xavier/Glorot init on [-a, a], a = sqrt(6/(fan_in+fan_out))."""
    if fan_in < 1 or fan_out < 1:
        raise ValueError(f"fan_in and fan_out must be >= 1, got {fan_in}, {fan_out}")
    rng = np.random.default_rng(seed)
    return xavier_from_rng(fan_in, fan_out, shape, rng, dtype=dtype)


def xavier_from_rng(fan_in: int, fan_out: int, shape, rng: np.random.Generator, dtype="f32") -> Tensor:
    if fan_in < 1 or fan_out < 1:
        raise ValueError(f"fan_in and fan_out must be >= 1, got {fan_in}, {fan_out}")
    a = float(np.sqrt(6.0 / (fan_in + fan_out)))
    data = rng.uniform(-a, a, size=tuple(shape))
    return Tensor(data.astype(_as_dtype(dtype)))


# ---------------------------------------------------------------------------
# elementwise / shape ops

def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum grad down to shape (inverse of numpy broadcasting)."""
    if grad.shape == shape:
        return grad
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    axes = tuple(i for i, (g, s) in enumerate(zip(grad.shape, shape)) if s == 1 and g != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


def add(a: Tensor, b) -> Tensor:
    """Broadcasting add; b may be a Tensor or a python scalar."""
    if not isinstance(b, Tensor):
        out = Tensor(a.data + b)
        return record(out, (a,), lambda g: (g,))
    out = Tensor(a.data + b.data)
    sa, sb = a.shape, b.shape

    def bwd(g):
        return _unbroadcast(g, sa), _unbroadcast(g, sb)

    return record(out, (a, b), bwd)


def sub(a: Tensor, b) -> Tensor:
    if not isinstance(b, Tensor):
        out = Tensor(a.data - b)
        return record(out, (a,), lambda g: (g,))
    out = Tensor(a.data - b.data)
    sa, sb = a.shape, b.shape

    def bwd(g):
        return _unbroadcast(g, sa), _unbroadcast(-g, sb)

    return record(out, (a, b), bwd)


def scale(a: Tensor, c) -> Tensor:
    c = float(c)
    out = Tensor(a.data * c)
    return record(out, (a,), lambda g: (g * c,))


def hadamard(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise product; shapes must match exactly."""
    if a.shape != b.shape:
        raise ValueError(f"hadamard shape mismatch: {a.shape} vs {b.shape}")
    out = Tensor(a.data * b.data)
    ad, bd = a.data, b.data

    def bwd(g):
        return g * bd, g * ad

    return record(out, (a, b), bwd)


def reshape(a: Tensor, shape) -> Tensor:
    shape = tuple(shape)
    old = a.shape
    out = Tensor(a.data.reshape(shape))
    return record(out, (a,), lambda g: (g.reshape(old),))


def transpose(a: Tensor, axes) -> Tensor:
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    out = Tensor(np.ascontiguousarray(a.data.transpose(axes)))
    return record(out, (a,), lambda g: (np.ascontiguousarray(g.transpose(inv)),))


def concat(tensors, axis: int) -> Tensor:
    datas = [t.data for t in tensors]
    out = Tensor(np.concatenate(datas, axis=axis))
    sizes = [d.shape[axis] for d in datas]
    offsets = np.cumsum([0] + sizes)

    def bwd(g):
        pieces = []
        for i in range(len(sizes)):
            sl = [slice(None)] * g.ndim
            sl[axis] = slice(int(offsets[i]), int(offsets[i + 1]))
            pieces.append(np.ascontiguousarray(g[tuple(sl)]))
        return tuple(pieces)

    return record(out, tuple(tensors), bwd)


def take_slice(a: Tensor, axis: int, start: int, stop: int) -> Tensor:
    sl = [slice(None)] * a.ndim
    sl[axis] = slice(start, stop)
    sl = tuple(sl)
    out = Tensor(np.ascontiguousarray(a.data[sl]))
    shape = a.shape

    def bwd(g):
        full = np.zeros(shape, dtype=g.dtype)
        full[sl] = g
        return (full,)

    return record(out, (a,), bwd)


def reduce_sum(a: Tensor, axis: int, keepdims: bool = True) -> Tensor:
    out = Tensor(a.data.sum(axis=axis, keepdims=keepdims))
    shape = a.shape

    def bwd(g):
        if not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape).copy(),)

    return record(out, (a,), bwd)


def tsum(a: Tensor) -> Tensor:
    out = Tensor(np.array(a.data.sum(), dtype=a.data.dtype))
    shape, dt = a.shape, a.data.dtype
    return record(out, (a,), lambda g: (np.full(shape, g, dtype=dt),))


def tmean(a: Tensor) -> Tensor:
    n = a.size
    out = Tensor(np.array(a.data.mean(), dtype=a.data.dtype))
    shape, dt = a.shape, a.data.dtype
    return record(out, (a,), lambda g: (np.full(shape, g / n, dtype=dt),))


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """2D matrix product (N,i) @ (i,o)."""
    if a.ndim != 2 or b.ndim != 2:
        raise ValueError("matmul expects 2D operands")
    out = Tensor(a.data @ b.data)
    ad, bd = a.data, b.data

    def bwd(g):
        return g @ bd.T, ad.T @ g

    return record(out, (a, b), bwd)


def linear(x: Tensor, w: Tensor, b: Tensor | None = None) -> Tensor:
    """x (N,i) @ w (i,o) + b."""
    y = x.data @ w.data
    if b is not None:
        y = y + b.data
    out = Tensor(y)
    xd, wd = x.data, w.data

    def bwd(g):
        grads = [g @ wd.T, xd.T @ g]
        if b is not None:
            grads.append(g.sum(axis=0))
        return tuple(grads)

    inputs = (x, w) if b is None else (x, w, b)
    return record(out, inputs, bwd)


def expand_spatial(x: Tensor, h: int, w: int) -> Tensor:
    """Broadcast (B,C) over an h-by-w grid to (B,C,h,w)."""
    out = Tensor(np.broadcast_to(x.data[:, :, None, None], x.shape + (h, w)).copy())
    return record(out, (x,), lambda g: (g.sum(axis=(2, 3)),))


def masked_mse(pred: Tensor, target, mask) -> Tensor:
    """Mean squared error over mask==1 pixels; masked-out pixels get zero gradient."""
    t = target.data if isinstance(target, Tensor) else np.asarray(target)
    m = mask.data if isinstance(mask, Tensor) else np.asarray(mask)
    if pred.shape != t.shape:
        raise ValueError(f"pred/target shape mismatch: {pred.shape} vs {t.shape}")
    mb = np.broadcast_to(m.astype(pred.data.dtype), pred.shape)
    denom = float(mb.sum())
    if denom == 0.0:
        raise ValueError("masked_mse needs at least one valid pixel")
    diff = pred.data - t
    out = Tensor(np.array((mb * diff * diff).sum() / denom, dtype=pred.data.dtype))

    def bwd(g):
        return (g * 2.0 * mb * diff / denom,)

    return record(out, (pred,), bwd)
