"""Minimal dense tensor engine with reverse-mode autodiff and AdamW.

Storage is float32; reductions accumulate in float64 with a fixed serial
order so identical inputs give bitwise-identical results. Each forward pass
builds an implicit graph through parent links; backward() walks it once in
reverse topological order and then marks it stale.
"""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np


class GradError(RuntimeError):
    pass


_GRAD_ENABLED = True


class no_grad:
    """Context manager disabling graph construction (inference paths)."""

    def __enter__(self):
        global _GRAD_ENABLED
        self._prev = _GRAD_ENABLED
        _GRAD_ENABLED = False

    def __exit__(self, *exc):
        global _GRAD_ENABLED
        _GRAD_ENABLED = self._prev
        return False


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward", "_stale")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.ascontiguousarray(data, dtype=np.float32)
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self._parents: tuple = ()
        self._backward = None
        self._stale = False

    @property
    def shape(self):
        return self.data.shape

    @property
    def size(self):
        return self.data.size

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad})"

    def item(self) -> float:
        return float(self.data.reshape(()))

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    # operator sugar
    def __add__(self, other):
        return add(self, _lift(other))

    def __sub__(self, other):
        return sub(self, _lift(other))

    def __mul__(self, other):
        return mul(self, _lift(other))

    def __rmul__(self, other):
        return mul(_lift(other), self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, key):
        return slice_(self, key)

    def reshape(self, *shape):
        return reshape(self, shape if len(shape) > 1 else shape[0])

    def backward(self):
        backward(self)


def _lift(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(np.asarray(x, dtype=np.float32))


def _track(out: Tensor, parents, backward_fn):
    if _GRAD_ENABLED and any(p.requires_grad or p._parents for p in parents):
        out._parents = tuple(parents)
        out._backward = backward_fn
        out.requires_grad = True
    return out


def _accum(t: Tensor, g: np.ndarray):
    if t.grad is None:
        t.grad = np.zeros_like(t.data)
    t.grad += g.astype(np.float32)


def _unbroadcast(g: np.ndarray, shape) -> np.ndarray:
    """Sum gradient over axes that were broadcast in the forward pass."""
    if g.shape == tuple(shape):
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)), dtype=np.float64)
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True, dtype=np.float64)
    return g.reshape(shape)


def _check_same_shape(a: Tensor, b: Tensor, op: str):
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise GradError(f"{op}: incompatible shapes {a.shape} and {b.shape}")


# --------------------------------------------------------------------------
# ops


def add(a: Tensor, b: Tensor) -> Tensor:
    a, b = _lift(a), _lift(b)
    _check_same_shape(a, b, "add")
    out = Tensor(a.data + b.data)

    def backward_fn(g):
        _accum(a, _unbroadcast(g, a.shape))
        _accum(b, _unbroadcast(g, b.shape))

    return _track(out, (a, b), backward_fn)


def sub(a: Tensor, b: Tensor) -> Tensor:
    a, b = _lift(a), _lift(b)
    _check_same_shape(a, b, "sub")
    out = Tensor(a.data - b.data)

    def backward_fn(g):
        _accum(a, _unbroadcast(g, a.shape))
        _accum(b, -_unbroadcast(g, b.shape))

    return _track(out, (a, b), backward_fn)


def mul(a: Tensor, b: Tensor) -> Tensor:
    a, b = _lift(a), _lift(b)
    _check_same_shape(a, b, "mul")
    out = Tensor(a.data * b.data)

    def backward_fn(g):
        _accum(a, _unbroadcast(g * b.data, a.shape))
        _accum(b, _unbroadcast(g * a.data, b.shape))

    return _track(out, (a, b), backward_fn)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.shape[-1] != b.shape[0 if b.data.ndim == 2 else -2]:
        raise GradError(f"matmul: incompatible shapes {a.shape} and {b.shape}")
    out = Tensor(a.data @ b.data)

    def backward_fn(g):
        ga = g @ np.swapaxes(b.data, -1, -2)
        gb = np.swapaxes(a.data, -1, -2) @ g
        _accum(a, _unbroadcast(ga, a.shape))
        _accum(b, _unbroadcast(gb, b.shape))

    return _track(out, (a, b), backward_fn)


def affine(x: Tensor, w: Tensor, b: Tensor) -> Tensor:
    """x @ w + b over the last axis of x; w: (in, out), b: (out,)."""
    if x.shape[-1] != w.shape[0]:
        raise GradError(f"affine: input {x.shape} vs weight {w.shape}")
    out = Tensor(x.data @ w.data + b.data)

    def backward_fn(g):
        x2 = x.data.reshape(-1, x.shape[-1])
        g2 = g.reshape(-1, w.shape[1])
        _accum(w, x2.T @ g2)
        _accum(b, g2.sum(axis=0, dtype=np.float64))
        _accum(x, (g2 @ w.data.T).reshape(x.shape))

    return _track(out, (x, w, b), backward_fn)


def relu(x: Tensor) -> Tensor:
    out = Tensor(np.maximum(x.data, 0.0))

    def backward_fn(g):
        _accum(x, g * (x.data > 0))

    return _track(out, (x,), backward_fn)


def silu(x: Tensor) -> Tensor:
    sig = 1.0 / (1.0 + np.exp(-x.data.astype(np.float64)))
    out = Tensor(x.data * sig)

    def backward_fn(g):
        _accum(x, g * (sig * (1.0 + x.data * (1.0 - sig))))

    return _track(out, (x,), backward_fn)


def layer_norm(x: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize the last axis to zero mean, unit variance (no affine)."""
    xd = x.data.astype(np.float64)
    mu = xd.mean(axis=-1, keepdims=True)
    var = xd.var(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (xd - mu) * inv
    out = Tensor(xhat)

    def backward_fn(g):
        n = x.shape[-1]
        g = g.astype(np.float64)
        gsum = g.sum(axis=-1, keepdims=True)
        gx = (g - gsum / n - xhat * (g * xhat).sum(axis=-1, keepdims=True) / n) * inv
        _accum(x, gx)

    return _track(out, (x,), backward_fn)


def concat(tensors, axis: int = -1) -> Tensor:
    tensors = [_lift(t) for t in tensors]
    out = Tensor(np.concatenate([t.data for t in tensors], axis=axis))
    sizes = [t.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]

    def backward_fn(g):
        for t, piece in zip(tensors, np.split(g, splits, axis=axis)):
            _accum(t, piece)

    return _track(out, tuple(tensors), backward_fn)


def mean(x: Tensor) -> Tensor:
    out = Tensor(np.array(x.data.sum(dtype=np.float64) / x.size))

    def backward_fn(g):
        _accum(x, np.full(x.shape, float(np.asarray(g).reshape(())) / x.size,
                          dtype=np.float32))

    return _track(out, (x,), backward_fn)


def sum_of_squares(x: Tensor) -> Tensor:
    """Scalar sum of squared entries."""
    out = Tensor(np.array(np.square(x.data.astype(np.float64)).sum()))

    def backward_fn(g):
        _accum(x, 2.0 * float(np.asarray(g).reshape(())) * x.data)

    return _track(out, (x,), backward_fn)


def slice_(x: Tensor, key) -> Tensor:
    out = Tensor(x.data[key])

    def backward_fn(g):
        gx = np.zeros(x.shape, dtype=np.float64)
        gx[key] += g
        _accum(x, gx)

    return _track(out, (x,), backward_fn)


def reshape(x: Tensor, shape) -> Tensor:
    out = Tensor(x.data.reshape(shape))

    def backward_fn(g):
        _accum(x, g.reshape(x.shape))

    return _track(out, (x,), backward_fn)


def broadcast_to(x: Tensor, shape) -> Tensor:
    out = Tensor(np.broadcast_to(x.data, shape).copy())

    def backward_fn(g):
        _accum(x, _unbroadcast(g, x.shape))

    return _track(out, (x,), backward_fn)


def assert_finite(x: Tensor, name: str = "tensor"):
    if not np.all(np.isfinite(x.data)):
        raise GradError(f"{name} contains non-finite values")
    return x


# --------------------------------------------------------------------------
# backward


def backward(loss: Tensor):
    """Populate grads of every reachable requires_grad tensor."""
    if loss.data.size != 1:
        raise GradError(f"backward needs a scalar loss, got shape {loss.shape}")
    if loss._stale:
        raise GradError("stale-graph")

    topo: list[Tensor] = []
    seen = set()
    stack = [(loss, False)]
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
            stack.append((p, False))

    loss.grad = np.ones_like(loss.data)
    for node in reversed(topo):
        if node._backward is not None:
            if node._stale:
                raise GradError("stale-graph")
            node._backward(node.grad if node.grad is not None else np.zeros_like(node.data))
            node._stale = True
            node._backward = None
    loss._stale = True


# --------------------------------------------------------------------------
# optimizer


class AdamW:
    """Decoupled weight decay, then Adam with bias correction."""

    def __init__(self, params, lr=1e-4, beta1=0.9, beta2=0.999, eps=1e-8,
                 weight_decay=0.01):
        self.params = list(params)
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.weight_decay = weight_decay
        self.step_count = 0
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]

    def zero_grad(self):
        for p in self.params:
            p.grad = None

    def step(self):
        self.step_count += 1
        t = self.step_count
        for i, p in enumerate(self.params):
            if p.grad is None:
                # parameter unused by this loss (e.g. a null token on the
                # untaken context path); leave it and its moments untouched
                continue
            g = p.grad
            if self.weight_decay:
                p.data -= (self.lr * self.weight_decay) * p.data
            self.m[i] = self.beta1 * self.m[i] + (1 - self.beta1) * g
            self.v[i] = self.beta2 * self.v[i] + (1 - self.beta2) * (g * g)
            mhat = self.m[i] / (1 - self.beta1 ** t)
            vhat = self.v[i] / (1 - self.beta2 ** t)
            p.data -= self.lr * mhat / (np.sqrt(vhat) + self.eps)


# --------------------------------------------------------------------------
# checkpoint io

CHECKPOINT_MAGIC = b"PSTW"
CHECKPOINT_VERSION = 1


def save_tensors(path, tensors: dict[str, np.ndarray]):
    """model.bin layout: magic, version u32, count u32, then per tensor
    name length u32 + UTF-8 name, rank u32, dims u32*rank, f32 LE data."""
    path = Path(path)
    with path.open("wb") as f:
        f.write(CHECKPOINT_MAGIC)
        f.write(struct.pack("<II", CHECKPOINT_VERSION, len(tensors)))
        for name, arr in tensors.items():
            arr = np.ascontiguousarray(arr, dtype="<f4")
            nb = name.encode("utf-8")
            f.write(struct.pack("<I", len(nb)))
            f.write(nb)
            f.write(struct.pack("<I", arr.ndim))
            f.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
            f.write(arr.tobytes())


def load_tensors(path) -> dict[str, np.ndarray]:
    path = Path(path)
    raw = path.read_bytes()
    if raw[:4] != CHECKPOINT_MAGIC:
        raise GradError(f"{path}: not a checkpoint (bad magic)")
    version, count = struct.unpack_from("<II", raw, 4)
    if version != CHECKPOINT_VERSION:
        raise GradError(f"{path}: unsupported checkpoint version {version}")
    off = 12
    out = {}
    for _ in range(count):
        (nlen,) = struct.unpack_from("<I", raw, off)
        off += 4
        name = raw[off:off + nlen].decode("utf-8")
        off += nlen
        (rank,) = struct.unpack_from("<I", raw, off)
        off += 4
        dims = struct.unpack_from(f"<{rank}I", raw, off)
        off += 4 * rank
        size = int(np.prod(dims)) if rank else 1
        arr = np.frombuffer(raw, dtype="<f4", count=size, offset=off).reshape(dims)
        off += 4 * size
        out[name] = arr.copy()
    return out
