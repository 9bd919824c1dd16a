"""Minimal reverse-mode automatic differentiation on numpy arrays.

Tensors carry values and a backward closure; gradients are computed functionally
by :func:`backward`, which returns a mapping from tensor id to gradient, so a
single graph can be differentiated several times with different seeds (this is
how Jacobians are extracted).
"""
from __future__ import annotations

import math
import json
import struct
from collections import OrderedDict
from contextlib import contextmanager
from pathlib import Path
from typing import Callable, Iterable, Mapping, Sequence

import numpy as np

DTYPE = np.float64


class ShapeError(ValueError):
    def __init__(self, op: str, message: str):
        super().__init__(f"{op}: {message}")
        self.op = op


class Tensor:
    __slots__ = ("data", "requires_grad", "parents", "backward_fn", "name")

    def __init__(self, data, requires_grad: bool = False, parents: tuple = (), backward_fn=None, name: str | None = None):
        self.data = np.asarray(data, dtype=DTYPE)
        self.requires_grad = requires_grad
        self.parents = parents
        self.backward_fn = backward_fn
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def numpy(self) -> np.ndarray:
        return self.data

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return add(self, neg(as_tensor(other)))

    def __rsub__(self, other):
        return add(as_tensor(other), neg(self))

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _node(data: np.ndarray, parents: Sequence[Tensor], backward_fn) -> Tensor:
    needs = any(p.requires_grad for p in parents)
    if not needs:
        return Tensor(data)
    return Tensor(data, True, tuple(parents), backward_fn)


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def _check_broadcast(op: str, a: np.ndarray, b: np.ndarray) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(op, f"incompatible shapes {a.shape} and {b.shape}") from None


# ---------------------------------------------------------------- elementwise

def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast("add", a.data, b.data)
    out = a.data + b.data
    return _node(out, (a, b), lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))


def neg(a: Tensor) -> Tensor:
    return _node(-a.data, (a,), lambda g: (-g,))


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast("mul", a.data, b.data)
    out = a.data * b.data
    return _node(out, (a, b), lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)))


def square(a: Tensor) -> Tensor:
    return _node(a.data * a.data, (a,), lambda g: (2.0 * a.data * g,))


def relu(a: Tensor) -> Tensor:
    mask = a.data > 0
    return _node(a.data * mask, (a,), lambda g: (g * mask,))


def sigmoid(a: Tensor) -> Tensor:
    out = np.empty_like(a.data)
    pos = a.data >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-a.data[pos]))
    ez = np.exp(a.data[~pos])
    out[~pos] = ez / (1.0 + ez)
    return _node(out, (a,), lambda g: (g * out * (1.0 - out),))


def affine_mix(alpha: float, a: Tensor, b: Tensor) -> Tensor:
    """alpha * a + (1 - alpha) * b for a fixed mixing coefficient."""
    if a.shape != b.shape:
        raise ShapeError("affine_mix", f"shapes differ: {a.shape} vs {b.shape}")
    if alpha == 1.0:
        out = a.data.copy()
    elif alpha == 0.0:
        out = b.data.copy()
    else:
        out = alpha * a.data + (1.0 - alpha) * b.data
    return _node(out, (a, b), lambda g: (alpha * g, (1.0 - alpha) * g))


# ---------------------------------------------------------------- reductions and shape ops

def sum_(a: Tensor, axis: int | None = None, keepdims: bool = False) -> Tensor:
    out = a.data.sum(axis=axis, keepdims=keepdims)

    def back(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape).copy(),)

    return _node(out, (a,), back)


def mean(a: Tensor, axis: int | None = None, keepdims: bool = False) -> Tensor:
    n = a.data.size if axis is None else a.shape[axis]
    return mul(sum_(a, axis, keepdims), 1.0 / n)


def concat(tensors: Sequence[Tensor], axis: int = -1) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    ref = tensors[0].shape
    ax = axis % len(ref)
    for t in tensors[1:]:
        if t.ndim != len(ref) or any(t.shape[i] != ref[i] for i in range(len(ref)) if i != ax):
            raise ShapeError("concat", f"shapes {[t.shape for t in tensors]} cannot be joined on axis {axis}")
    out = np.concatenate([t.data for t in tensors], axis=ax)
    bounds = np.cumsum([t.shape[ax] for t in tensors])[:-1]

    def back(g):
        return tuple(np.split(g, bounds, axis=ax))

    return _node(out, tensors, back)


def transpose(a: Tensor) -> Tensor:
    """Swap the last two axes."""
    return _node(np.swapaxes(a.data, -1, -2), (a,), lambda g: (np.swapaxes(g, -1, -2),))


def expand(a: Tensor, shape: tuple[int, ...]) -> Tensor:
    try:
        out = np.broadcast_to(a.data, shape).copy()
    except ValueError:
        raise ShapeError("expand", f"cannot expand {a.shape} to {shape}") from None
    return _node(out, (a,), lambda g: (_unbroadcast(g, a.shape),))


def reshape(a: Tensor, shape: tuple[int, ...]) -> Tensor:
    try:
        out = a.data.reshape(shape)
    except ValueError:
        raise ShapeError("reshape", f"cannot reshape {a.shape} to {shape}") from None
    return _node(out, (a,), lambda g: (g.reshape(a.shape),))


def slice_last(a: Tensor, start: int, stop: int) -> Tensor:
    """a[..., start:stop]."""
    if not 0 <= start <= stop <= a.shape[-1]:
        raise ShapeError("slice_last", f"slice {start}:{stop} out of range for {a.shape}")
    out = a.data[..., start:stop].copy()

    def back(g):
        full = np.zeros_like(a.data)
        full[..., start:stop] = g
        return (full,)

    return _node(out, (a,), back)


def take_rows(table: Tensor, index: np.ndarray) -> Tensor:
    """Embedding lookup: table[index] with scatter-add backward."""
    index = np.asarray(index, dtype=np.int64)
    out = table.data[index]

    def back(g):
        grad = np.zeros_like(table.data)
        np.add.at(grad, index, g)
        return (grad,)

    return _node(out, (table,), back)


# ---------------------------------------------------------------- linear algebra

def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError("matmul", f"cannot multiply {a.shape} by {b.shape}")
    out = np.matmul(a.data, b.data)

    def back(g):
        ga = np.matmul(g, np.swapaxes(b.data, -1, -2))
        gb = np.matmul(np.swapaxes(a.data, -1, -2), g)
        return _unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)

    return _node(out, (a, b), back)


def dense(x: Tensor, W: Tensor, b: Tensor | None = None) -> Tensor:
    """x @ W + b over the last axis."""
    if x.shape[-1] != W.shape[0]:
        raise ShapeError("dense", f"input width {x.shape[-1]} does not match weight {W.shape}")
    out = matmul(x, W)
    return out if b is None else add(out, b)


def softmax(a: Tensor, axis: int = -1) -> Tensor:
    z = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    out = e / e.sum(axis=axis, keepdims=True)

    def back(g):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)

    return _node(out, (a,), back)


def scaled_dot_attention(Q: Tensor, K: Tensor, V: Tensor, d_k: int | None = None, mask: np.ndarray | None = None) -> Tensor:
    """softmax(Q K^T / sqrt(d_k)) V over the row axis. ``mask`` marks valid key rows."""
    if Q.shape[-1] != K.shape[-1] or K.shape[-2] != V.shape[-2]:
        raise ShapeError("scaled_dot_attention", f"Q {Q.shape}, K {K.shape}, V {V.shape} are incompatible")
    d_k = d_k or Q.shape[-1]
    scores = mul(matmul(Q, transpose(K)), 1.0 / math.sqrt(d_k))
    if mask is not None:
        bias = np.where(np.asarray(mask, dtype=bool), 0.0, -1e30)[..., None, :]
        scores = add(scores, bias)
    return matmul(softmax(scores, axis=-1), V)


# ---------------------------------------------------------------- backward

def _topo(output: Tensor) -> list[Tensor]:
    order: list[Tensor] = []
    seen: set[int] = set()
    stack = [(output, False)]
    while stack:
        node, done = stack.pop()
        if done:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node.parents:
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    return order


def backward(output: Tensor, seed: np.ndarray | None = None) -> dict[int, np.ndarray]:
    """Reverse-mode sweep from ``output``; returns {id(tensor): gradient} for every reached tensor."""
    if seed is None:
        if output.data.size != 1:
            raise ShapeError("backward", f"non-scalar output {output.shape} needs an explicit seed")
        seed = np.ones_like(output.data)
    grads: dict[int, np.ndarray] = {id(output): np.asarray(seed, dtype=DTYPE)}
    if not output.requires_grad:
        return grads
    for node in reversed(_topo(output)):
        g = grads.get(id(node))
        if g is None or node.backward_fn is None:
            continue
        for parent, pg in zip(node.parents, node.backward_fn(g)):
            if not parent.requires_grad:
                continue
            key = id(parent)
            if key in grads:
                grads[key] = grads[key] + pg
            else:
                grads[key] = pg
    return grads


def grad(output: Tensor, wrt: Sequence[Tensor], seed: np.ndarray | None = None) -> list[np.ndarray]:
    g = backward(output, seed)
    return [g.get(id(t), np.zeros_like(t.data)) for t in wrt]


def jacobian(output: Tensor, x: Tensor) -> np.ndarray:
    """Per-sample Jacobian J[b, i, j] = d output[b, i] / d x[b, j] via one backward pass per output column.

    Assumes batch rows do not interact, which holds for every network in this package.
    """
    if output.ndim != 2 or x.ndim != 2:
        raise ShapeError("jacobian", f"expected (batch, K) output and input, got {output.shape}, {x.shape}")
    B, K = output.shape
    J = np.zeros((B, K, x.shape[1]))
    for i in range(K):
        seed = np.zeros_like(output.data)
        seed[:, i] = 1.0
        J[:, i, :] = grad(output, [x], seed)[0]
    return J


# ---------------------------------------------------------------- parameters

class ParamSet:
    """Named parameter tensors in a fixed order with seeded uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)) init."""

    def __init__(self, rng: np.random.Generator | None = None):
        self.tensors: "OrderedDict[str, Tensor]" = OrderedDict()
        self._rng = rng if rng is not None else np.random.default_rng(0)

    def add(self, name: str, shape: tuple[int, ...], fan_in: int) -> Tensor:
        bound = 1.0 / math.sqrt(fan_in)
        t = Tensor(self._rng.uniform(-bound, bound, size=shape), requires_grad=True, name=name)
        self.tensors[name] = t
        return t

    def dense(self, name: str, fan_in: int, fan_out: int, bias: bool = True) -> None:
        self.add(f"{name}.W", (fan_in, fan_out), fan_in)
        if bias:
            self.add(f"{name}.b", (fan_out,), fan_in)

    def __getitem__(self, name: str) -> Tensor:
        return self.tensors[name]

    def __contains__(self, name: str) -> bool:
        return name in self.tensors

    def __iter__(self):
        return iter(self.tensors.items())

    def names(self) -> list[str]:
        return list(self.tensors)

    @property
    def count(self) -> int:
        return int(sum(t.data.size for t in self.tensors.values()))

    def arrays(self) -> dict[str, np.ndarray]:
        return {n: t.data.copy() for n, t in self.tensors.items()}

    def load_arrays(self, arrays: Mapping[str, np.ndarray]) -> None:
        for n, t in self.tensors.items():
            a = np.asarray(arrays[n], dtype=DTYPE)
            if a.shape != t.shape:
                raise ShapeError("load_arrays", f"{n}: expected {t.shape}, got {a.shape}")
            t.data = a.copy()

    def copy(self) -> "ParamSet":
        other = ParamSet(self._rng)
        for n, t in self.tensors.items():
            other.tensors[n] = Tensor(t.data.copy(), requires_grad=True, name=n)
        return other

    def soft_update(self, online: "ParamSet", tau: float) -> None:
        """self <- tau * online + (1 - tau) * self, elementwise."""
        if self.names() != online.names():
            raise ShapeError("soft_update", "parameter sets have different names")
        for n, t in self.tensors.items():
            src = online.tensors[n]
            if src.shape != t.shape:
                raise ShapeError("soft_update", f"{n}: {src.shape} vs {t.shape}")
            if tau == 1.0:
                t.data = src.data.copy()
            elif tau != 0.0:
                t.data = tau * src.data + (1.0 - tau) * t.data

    def grads(self, output: Tensor) -> dict[str, np.ndarray]:
        g = backward(output)
        return {n: g.get(id(t), np.zeros_like(t.data)) for n, t in self.tensors.items()}


class Adam:
    def __init__(self, params: ParamSet, lr: float = 1e-3, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.params, self.lr, self.beta1, self.beta2, self.eps = params, lr, beta1, beta2, eps
        self.m = {n: np.zeros_like(t.data) for n, t in params}
        self.v = {n: np.zeros_like(t.data) for n, t in params}
        self.t = 0

    def step(self, grads: Mapping[str, np.ndarray]) -> None:
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        c1, c2 = 1.0 - b1 ** self.t, 1.0 - b2 ** self.t
        for n, p in self.params:
            g = grads[n]
            self.m[n] = b1 * self.m[n] + (1.0 - b1) * g
            self.v[n] = b2 * self.v[n] + (1.0 - b2) * g * g
            p.data = p.data - self.lr * (self.m[n] / c1) / (np.sqrt(self.v[n] / c2) + self.eps)

    def state_arrays(self, prefix: str) -> dict[str, np.ndarray]:
        out = {f"{prefix}.m.{n}": a for n, a in self.m.items()}
        out.update({f"{prefix}.v.{n}": a for n, a in self.v.items()})
        out[f"{prefix}.t"] = np.array([float(self.t)])
        return out

    def load_state(self, prefix: str, arrays: Mapping[str, np.ndarray]) -> None:
        for n in self.m:
            self.m[n] = np.array(arrays[f"{prefix}.m.{n}"])
            self.v[n] = np.array(arrays[f"{prefix}.v.{n}"])
        self.t = int(arrays[f"{prefix}.t"][0])


@contextmanager
def working_precision(dtype, params: ParamSet | None = None):
    """Temporarily build tensors (and hold ``params``) at ``dtype``; restores float64 afterwards."""
    global DTYPE
    saved, DTYPE = DTYPE, dtype
    originals = {}
    if params is not None:
        for name, t in params:
            originals[name] = t.data
            t.data = t.data.astype(dtype)
    try:
        yield
    finally:
        DTYPE = saved
        if params is not None:
            for name, t in params:
                t.data = originals[name]


def gradient_check(f: Callable[[], Tensor], params: ParamSet, eps: float = 1e-5, numeric_dtype=None) -> float:
    """Max over all parameter entries of |analytic - central difference| / max(1e-8, |analytic| + |numeric|).

    The analytic gradient is always taken at the working precision. ``numeric_dtype``
    (e.g. ``np.longdouble``) evaluates the central differences at higher precision so
    that roundoff in f does not swamp gradients far below the 1e-8 floor.
    """
    out = f()
    if out.data.size != 1:
        raise ShapeError("gradient_check", "function must be scalar-valued")
    if not np.all(np.isfinite(out.data)):
        raise ValueError("gradient_check: non-finite function value")
    analytic = params.grads(out)
    worst = 0.0
    with working_precision(numeric_dtype or DTYPE, params):
        for name, t in params:
            flat = t.data.reshape(-1)
            ga = analytic[name].reshape(-1)
            for i in range(flat.size):
                orig = flat[i]
                flat[i] = orig + eps
                fp = f().data.reshape(())
                flat[i] = orig - eps
                fm = f().data.reshape(())
                flat[i] = orig
                if not (np.isfinite(fp) and np.isfinite(fm)):
                    raise ValueError(f"gradient_check: non-finite value perturbing {name}[{i}]")
                num = float((fp - fm) / (2 * eps))
                err = abs(ga[i] - num) / max(1e-8, abs(ga[i]) + abs(num))
                worst = max(worst, err)
    return worst


# ---------------------------------------------------------------- checkpoint format

MAGIC = b"PHDDPGCK"
FORMAT_VERSION = 1


def save_arrays(path: str | Path, arrays: Mapping[str, np.ndarray], meta: Mapping | None = None) -> None:
    """Binary layout: magic, u16 version, u32 meta length + JSON, u32 count, name table, float64 blobs.

    Name-table entries are (u16 name length, utf-8 name, u8 ndim, u32 dims...).
    Blobs follow in table order, little-endian row-major float64.
    """
    meta_bytes = json.dumps(dict(meta or {}), sort_keys=True).encode()
    parts = [MAGIC, struct.pack("<HI", FORMAT_VERSION, len(meta_bytes)), meta_bytes, struct.pack("<I", len(arrays))]
    blobs = []
    for name, arr in arrays.items():
        a = np.ascontiguousarray(arr, dtype="<f8")
        nb = name.encode()
        parts.append(struct.pack("<H", len(nb)) + nb + struct.pack("<B", a.ndim) + struct.pack(f"<{a.ndim}I", *a.shape))
        blobs.append(a.tobytes())
    Path(path).write_bytes(b"".join(parts + blobs))


def load_arrays(path: str | Path) -> tuple["OrderedDict[str, np.ndarray]", dict]:
    data = Path(path).read_bytes()
    if data[:8] != MAGIC:
        raise ValueError(f"{path}: not a checkpoint file")
    version, meta_len = struct.unpack_from("<HI", data, 8)
    if version != FORMAT_VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {version}")
    pos = 14
    meta = json.loads(data[pos:pos + meta_len])
    pos += meta_len
    (count,) = struct.unpack_from("<I", data, pos)
    pos += 4
    table = []
    for _ in range(count):
        (nlen,) = struct.unpack_from("<H", data, pos)
        pos += 2
        name = data[pos:pos + nlen].decode()
        pos += nlen
        (ndim,) = struct.unpack_from("<B", data, pos)
        pos += 1
        shape = struct.unpack_from(f"<{ndim}I", data, pos)
        pos += 4 * ndim
        table.append((name, shape))
    out: "OrderedDict[str, np.ndarray]" = OrderedDict()
    for name, shape in table:
        n = int(np.prod(shape)) if shape else 1
        out[name] = np.frombuffer(data, dtype="<f8", count=n, offset=pos).reshape(shape).astype(DTYPE)
        pos += 8 * n
    return out, meta
