"""Minimal dense-array kernel with reverse-mode differentiation.

Everything upstream (attention blocks, bridges, losses) is composed from the
op set in this file.  Arrays are float64 numpy buffers; the graph is implicit
(each result tensor keeps its parents and a closure producing the parent
gradients).  ``backward`` walks the graph once in reverse topological order,
so a value computed from k paths receives the sum of the k contributions.

Hard selections (gather indices, argmax ties) are treated as constants of the
graph: gradients flow through gathered values only.
"""

from __future__ import annotations

import struct
from typing import Callable, Iterable, Sequence

import numpy as np


class NumericsError(ValueError):
    """Raised for contract violations inside the array kernel."""


_GRAD_ENABLED = True


class no_grad:
    """Context manager that disables graph construction (inference mode)."""

    def __enter__(self):
        global _GRAD_ENABLED
        self._prev = _GRAD_ENABLED
        _GRAD_ENABLED = False
        return self

    def __exit__(self, *exc):
        global _GRAD_ENABLED
        _GRAD_ENABLED = self._prev
        return False


def grad_enabled() -> bool:
    return _GRAD_ENABLED


class Tensor:
    """A float64 array plus the bookkeeping needed for reverse mode."""

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False):
        if type(data) is np.ndarray and data.dtype == np.float64:
            self.data = data
        else:
            self.data = np.asarray(data, dtype=np.float64)
        self.grad: np.ndarray | None = None
        self.requires_grad = bool(requires_grad)
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], tuple] | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    # Operator sugar.  Scalars and ndarrays are coerced to constant tensors.
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
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _result(data: np.ndarray, parents: Sequence[Tensor], backward) -> Tensor:
    out = Tensor(data)
    if _GRAD_ENABLED and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward
    return out


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum a broadcast gradient back down to ``shape``."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, (g, s) in enumerate(zip(grad.shape, shape)) if s == 1 and g != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


# ---------------------------------------------------------------------------
# elementwise arithmetic


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = a.data + b.data

    def bwd(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _result(out, (a, b), bwd)


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = a.data - b.data

    def bwd(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return _result(out, (a, b), bwd)


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = a.data * b.data

    def bwd(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return _result(out, (a, b), bwd)


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = a.data / b.data

    def bwd(g):
        ga = g / b.data
        gb = -g * a.data / (b.data * b.data)
        return _unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)

    return _result(out, (a, b), bwd)


def neg(a) -> Tensor:
    a = as_tensor(a)

    def bwd(g):
        return (-g,)

    return _result(-a.data, (a,), bwd)


def exp(a) -> Tensor:
    a = as_tensor(a)
    out = np.exp(a.data)

    def bwd(g):
        return (g * out,)

    return _result(out, (a,), bwd)


def log(a) -> Tensor:
    a = as_tensor(a)
    out = np.log(a.data)

    def bwd(g):
        return (g / a.data,)

    return _result(out, (a,), bwd)


def sqrt(a) -> Tensor:
    a = as_tensor(a)
    out = np.sqrt(a.data)

    def bwd(g):
        return (g * 0.5 / out,)

    return _result(out, (a,), bwd)


def tanh(a) -> Tensor:
    a = as_tensor(a)
    out = np.tanh(a.data)

    def bwd(g):
        return (g * (1.0 - out * out),)

    return _result(out, (a,), bwd)


def silu(a) -> Tensor:
    """x * sigmoid(x)."""
    a = as_tensor(a)
    s = 1.0 / (1.0 + np.exp(-a.data))
    out = a.data * s

    def bwd(g):
        return (g * s * (1.0 + a.data * (1.0 - s)),)

    return _result(out, (a,), bwd)


def softplus(a) -> Tensor:
    a = as_tensor(a)
    out = np.logaddexp(0.0, a.data)

    def bwd(g):
        return (g / (1.0 + np.exp(-a.data)),)

    return _result(out, (a,), bwd)


def absolute(a) -> Tensor:
    a = as_tensor(a)

    def bwd(g):
        return (g * np.sign(a.data),)

    return _result(np.abs(a.data), (a,), bwd)


def huber(a, delta: float) -> Tensor:
    """Quadratic inside |x| <= delta, linear outside."""
    a = as_tensor(a)
    ad = a.data
    small = np.abs(ad) <= delta
    out = np.where(small, 0.5 * ad * ad, delta * (np.abs(ad) - 0.5 * delta))

    def bwd(g):
        return (g * np.clip(ad, -delta, delta),)

    return _result(out, (a,), bwd)


def clamp(a, lo: float, hi: float) -> Tensor:
    """Clip values; gradient is passed through strictly inside (lo, hi)."""
    a = as_tensor(a)
    out = np.clip(a.data, lo, hi)

    def bwd(g):
        return (g * ((a.data > lo) & (a.data < hi)),)

    return _result(out, (a,), bwd)


def maximum(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = np.maximum(a.data, b.data)

    def bwd(g):
        ga = g * (a.data > b.data) + 0.5 * g * (a.data == b.data)
        gb = g * (b.data > a.data) + 0.5 * g * (a.data == b.data)
        return _unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)

    return _result(out, (a, b), bwd)


def minimum(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = np.minimum(a.data, b.data)

    def bwd(g):
        ga = g * (a.data < b.data) + 0.5 * g * (a.data == b.data)
        gb = g * (b.data < a.data) + 0.5 * g * (a.data == b.data)
        return _unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)

    return _result(out, (a, b), bwd)


def relu(a) -> Tensor:
    a = as_tensor(a)

    def bwd(g):
        return (g * (a.data > 0),)

    return _result(np.maximum(a.data, 0.0), (a,), bwd)


# ---------------------------------------------------------------------------
# linear algebra


def matmul(a, b) -> Tensor:
    """2-D @ 2-D, batched 3-D @ 3-D, or 3-D @ 2-D (shared right factor)."""
    a, b = as_tensor(a), as_tensor(b)
    out = a.data @ b.data

    if a.ndim == 2 and b.ndim == 2:

        def bwd(g):
            return g @ b.data.T, a.data.T @ g

    elif a.ndim == 3 and b.ndim == 3:

        def bwd(g):
            return g @ np.swapaxes(b.data, -1, -2), np.swapaxes(a.data, -1, -2) @ g

    elif a.ndim == 3 and b.ndim == 2:

        def bwd(g):
            ga = g @ b.data.T
            gb = np.tensordot(a.data, g, axes=([0, 1], [0, 1]))
            return ga, gb

    else:
        raise NumericsError(f"matmul-shape: unsupported ndims {a.ndim} @ {b.ndim}")
    return _result(out, (a, b), bwd)


def matmul_vec(a, v) -> Tensor:
    """Matrix (n, m) times vector (m,) -> vector (n,)."""
    a, v = as_tensor(a), as_tensor(v)
    if a.ndim != 2 or v.ndim != 1:
        raise NumericsError("matmul-shape: matmul_vec expects (n, m) @ (m,)")
    out = a.data @ v.data

    def bwd(g):
        return np.outer(g, v.data), a.data.T @ g

    return _result(out, (a, v), bwd)


# ---------------------------------------------------------------------------
# reductions


def tsum(a, axis: int | None = None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    out = a.data.sum(axis=axis, keepdims=keepdims)

    def bwd(g):
        if axis is None:
            return (np.broadcast_to(g, a.shape).copy(),)
        ge = g if keepdims else np.expand_dims(g, axis)
        return (np.broadcast_to(ge, a.shape).copy(),)

    return _result(out, (a,), bwd)


def tmean(a, axis: int | None = None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    if a.size == 0 or (axis is not None and a.shape[axis] == 0):
        raise NumericsError("empty-reduction: mean over an empty axis")
    n = a.size if axis is None else a.shape[axis]
    return tsum(a, axis=axis, keepdims=keepdims) * (1.0 / n)


def amax(a, axis: int | None = None) -> Tensor:
    """Max reduction; gradient is split evenly over argmax ties."""
    a = as_tensor(a)
    if a.size == 0 or (axis is not None and a.shape[axis] == 0):
        raise NumericsError("empty-reduction: max over an empty axis")
    out = a.data.max(axis=axis)

    def bwd(g):
        if axis is None:
            mask = (a.data == out).astype(np.float64)
            return (mask * (g / mask.sum()),)
        oe = np.expand_dims(out, axis)
        mask = (a.data == oe).astype(np.float64)
        mask /= mask.sum(axis=axis, keepdims=True)
        return (mask * np.expand_dims(g, axis),)

    return _result(out, (a,), bwd)


def square_norm(a) -> Tensor:
    """Sum of squared entries."""
    return tsum(mul(a, a))


# ---------------------------------------------------------------------------
# normalizations


def softmax(a, axis: int = -1) -> Tensor:
    a = as_tensor(a)
    if a.ndim == 0 or a.shape[axis] == 0:
        raise NumericsError("empty-reduction: softmax over an empty axis")
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=axis, keepdims=True)

    def bwd(g):
        dot = (g * out).sum(axis=axis, keepdims=True)
        return (out * (g - dot),)

    return _result(out, (a,), bwd)


def layer_norm(x, gain, bias, eps: float = 1e-8) -> Tensor:
    """Normalize the last axis to zero mean / unit variance, then affine."""
    if eps <= 0:
        raise NumericsError("layer-norm-eps: eps must be positive")
    x, gain, bias = as_tensor(x), as_tensor(gain), as_tensor(bias)
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    out = xhat * gain.data + bias.data

    def bwd(g):
        ggain = _unbroadcast(g * xhat, gain.shape)
        gbias = _unbroadcast(g, bias.shape)
        dxhat = g * gain.data
        m1 = dxhat.mean(axis=-1, keepdims=True)
        m2 = (dxhat * xhat).mean(axis=-1, keepdims=True)
        gx = inv * (dxhat - m1 - xhat * m2)
        return gx, ggain, gbias

    return _result(out, (x, gain, bias), bwd)


# ---------------------------------------------------------------------------
# shape and indexing


def reshape(a, shape: tuple[int, ...]) -> Tensor:
    a = as_tensor(a)

    def bwd(g):
        return (g.reshape(a.shape),)

    return _result(a.data.reshape(shape), (a,), bwd)


def moveaxis(a, src: int, dst: int) -> Tensor:
    a = as_tensor(a)
    perm = list(range(a.ndim))
    perm.insert(dst, perm.pop(src))
    perm = tuple(perm)
    inverse = tuple(int(i) for i in np.argsort(perm))

    def bwd(g):
        return (g.transpose(inverse),)

    return _result(a.data.transpose(perm), (a,), bwd)


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    ts = [as_tensor(t) for t in tensors]
    out = np.concatenate([t.data for t in ts], axis=axis)
    sizes = [t.shape[axis] for t in ts]
    offsets = np.cumsum([0] + sizes)

    def bwd(g):
        slicer = [slice(None)] * g.ndim
        grads = []
        for i in range(len(ts)):
            slicer[axis] = slice(offsets[i], offsets[i + 1])
            grads.append(g[tuple(slicer)])
        return tuple(grads)

    return _result(out, ts, bwd)


def gather(a, index) -> Tensor:
    """Fancy indexing along the first axis; gradients scatter-add back.

    ``index`` may have any shape; the output shape is index.shape + a.shape[1:].
    The index itself is a constant of the graph.
    """
    a = as_tensor(a)
    idx = np.asarray(index, dtype=np.intp)
    out = a.data[idx]

    def bwd(g):
        ga = np.zeros_like(a.data)
        np.add.at(ga, idx, g)
        return (ga,)

    return _result(out, (a,), bwd)


def pick(a, index: int) -> Tensor:
    """Scalar entry of a 1-D tensor."""
    return gather(a, np.intp(index))


def stop_grad(a) -> Tensor:
    return as_tensor(a).detach()


# ---------------------------------------------------------------------------
# backward pass


def _topo_order(root: Tensor) -> list[Tensor]:
    order: list[Tensor] = []
    visited: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in visited:
            continue
        visited.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if p.requires_grad and id(p) not in visited:
                stack.append((p, False))
    return order


def backward(loss: Tensor) -> None:
    """Populate ``.grad`` on every tensor reachable from ``loss``."""
    if loss.size != 1:
        raise NumericsError("backward-on-nonscalar: loss must be a scalar")
    if not loss.requires_grad:
        return
    order = _topo_order(loss)
    loss.grad = np.ones_like(loss.data)
    for node in reversed(order):
        if node.grad is None or node._backward is None:
            continue
        grads = node._backward(node.grad)
        for parent, g in zip(node._parents, grads):
            if g is None or not parent.requires_grad:
                continue
            # Accumulation is out of place, so adopting `g` (possibly a view
            # of an already-final gradient buffer) without copying is safe.
            parent.grad = g if parent.grad is None else parent.grad + g


# ---------------------------------------------------------------------------
# parameter registry


class ParamStore:
    """Named registry of trainable tensors; the unit of checkpointing.

    ``gradients(loss)`` fulfils the differentiation contract: every
    registered parameter gets a gradient array, with exact zeros for
    parameters the loss does not reach.
    """

    def __init__(self, seed: int = 0):
        self.rng = np.random.default_rng(seed)
        self._store: dict[str, Tensor] = {}

    def param(self, name: str, shape: tuple[int, ...], *, scale: float | None = None,
              init: str = "normal", value: np.ndarray | None = None) -> Tensor:
        if name in self._store:
            raise NumericsError(f"duplicate-param: {name}")
        if value is not None:
            data = np.asarray(value, dtype=np.float64).reshape(shape)
        elif init == "zeros":
            data = np.zeros(shape)
        elif init == "ones":
            data = np.ones(shape)
        else:
            if scale is None:
                fan = shape[0] if shape else 1
                scale = 1.0 / np.sqrt(max(1, fan))
            data = self.rng.normal(0.0, 1.0, size=shape) * scale
        t = Tensor(data, requires_grad=True)
        self._store[name] = t
        return t

    def __contains__(self, name: str) -> bool:
        return name in self._store

    def __getitem__(self, name: str) -> Tensor:
        return self._store[name]

    def names(self) -> list[str]:
        return list(self._store)

    def items(self):
        return self._store.items()

    def zero_grads(self) -> None:
        for t in self._store.values():
            t.grad = None

    def gradients(self, loss: Tensor) -> dict[str, np.ndarray]:
        self.zero_grads()
        backward(loss)
        return {name: (t.grad.copy() if t.grad is not None else np.zeros_like(t.data))
                for name, t in self._store.items()}

    def state_dict(self) -> dict[str, np.ndarray]:
        return {name: t.data.copy() for name, t in self._store.items()}

    def load_state(self, state: dict[str, np.ndarray]) -> None:
        for name, t in self._store.items():
            if name not in state:
                raise NumericsError(f"ckpt-shape: missing parameter {name}")
            arr = np.asarray(state[name], dtype=np.float64)
            if arr.shape != t.data.shape:
                raise NumericsError(
                    f"ckpt-shape: {name} expects {t.data.shape}, file has {arr.shape}")
            t.data = arr.copy()


# ---------------------------------------------------------------------------
# finite-difference oracle


def finite_diff_grad(f: Callable[[], float], params: Iterable[tuple[str, Tensor]],
                     h: float = 1e-5) -> dict[str, np.ndarray]:
    """Central-difference gradient of ``f`` w.r.t. each named tensor.

    ``f`` must be a deterministic closure over the same tensors; their data
    buffers are perturbed in place and restored.
    """
    if h <= 0:
        raise NumericsError("finite-diff-step: h must be positive")
    grads: dict[str, np.ndarray] = {}
    for name, t in params:
        g = np.zeros_like(t.data)
        flat = t.data.reshape(-1)
        gflat = g.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            fp = f()
            flat[i] = orig - h
            fm = f()
            flat[i] = orig
            gflat[i] = (fp - fm) / (2.0 * h)
        grads[name] = g
    return grads


def max_relative_error(a: dict[str, np.ndarray], b: dict[str, np.ndarray],
                       floor: float = 1e-6) -> float:
    """max over coordinates of |a-b| / max(|a|, |b|, floor)."""
    worst = 0.0
    for name in a:
        diff = np.abs(a[name] - b[name])
        denom = np.maximum(np.maximum(np.abs(a[name]), np.abs(b[name])), floor)
        err = (diff / denom).max() if diff.size else 0.0
        worst = max(worst, float(err))
    return worst


# ---------------------------------------------------------------------------
# checkpoint container: magic "IAMC", version 1, repeated named records


_CKPT_MAGIC = b"IAMC"
_CKPT_VERSION = 1


def save_checkpoint(state: dict[str, np.ndarray], path: str) -> None:
    with open(path, "wb") as fh:
        fh.write(_CKPT_MAGIC)
        fh.write(struct.pack("<I", _CKPT_VERSION))
        for name, arr in state.items():
            arr = np.asarray(arr, dtype=np.float64)
            encoded = name.encode("utf-8")
            fh.write(struct.pack("<H", len(encoded)))
            fh.write(encoded)
            fh.write(struct.pack("<B", arr.ndim))
            for dim in arr.shape:
                fh.write(struct.pack("<I", dim))
            fh.write(arr.astype("<f8").tobytes(order="C"))


def load_checkpoint(path: str) -> dict[str, np.ndarray]:
    with open(path, "rb") as fh:
        blob = fh.read()
    if blob[:4] != _CKPT_MAGIC:
        raise NumericsError("checkpoint-format: bad magic")
    (version,) = struct.unpack_from("<I", blob, 4)
    if version != _CKPT_VERSION:
        raise NumericsError(f"checkpoint-format: unsupported version {version}")
    state: dict[str, np.ndarray] = {}
    off = 8
    try:
        while off < len(blob):
            (nlen,) = struct.unpack_from("<H", blob, off)
            off += 2
            name = blob[off:off + nlen].decode("utf-8")
            off += nlen
            (rank,) = struct.unpack_from("<B", blob, off)
            off += 1
            dims = struct.unpack_from(f"<{rank}I", blob, off) if rank else ()
            off += 4 * rank
            count = int(np.prod(dims)) if rank else 1
            arr = np.frombuffer(blob, dtype="<f8", count=count, offset=off).copy()
            off += 8 * count
            state[name] = arr.reshape(dims)
    except (struct.error, ValueError) as e:
        raise NumericsError("checkpoint-truncated: unexpected end of file") from e
    if off != len(blob):
        raise NumericsError("checkpoint-truncated: trailing bytes")
    return state
