"""A small reverse-mode autodiff engine on float64 numpy arrays.

Only what the detectors need: conv2d, linear, normalization, softmax
attention pieces, pooling and cross-entropy, plus Adam and a
finite-difference gradient checker. Shapes are explicit; the only
broadcasting is bias-style addition over leading axes.
"""

from __future__ import annotations

import hashlib
import struct
from typing import Callable, Iterable, Sequence

import numpy as np


class ShapeError(ValueError):
    pass


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "name")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None, _parents=(), _backward=None):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad = None
        self.requires_grad = requires_grad
        self._parents = _parents
        self._backward = _backward
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    def __repr__(self):
        return f"Tensor(shape={self.shape}{', name=' + self.name if self.name else ''})"

    def zero_grad(self) -> None:
        self.grad = None

    def _accum(self, g: np.ndarray) -> None:
        if self.grad is None:
            self.grad = np.array(g, dtype=np.float64, copy=True)
        else:
            self.grad += g

    def backward(self, grad: np.ndarray | float | None = None) -> None:
        if grad is None:
            if self.data.size != 1:
                raise ShapeError(f"backward() without a seed needs a scalar, got shape {self.shape}")
            grad = np.ones_like(self.data)
        order, seen, stack = [], set(), [(self, False)]
        while stack:
            node, done = stack.pop()
            if done:
                order.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if id(p) not in seen and (p.requires_grad or p._parents):
                    stack.append((p, False))
        grads = {id(self): np.broadcast_to(np.asarray(grad, dtype=np.float64), self.shape).copy()}
        for node in reversed(order):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node.requires_grad and not node._parents:
                node._accum(g)
            if node._backward is not None:
                for parent, pg in zip(node._parents, node._backward(g)):
                    if pg is None:
                        continue
                    key = id(parent)
                    if key in grads:
                        grads[key] = grads[key] + pg
                    else:
                        grads[key] = pg

    # operator sugar
    def __add__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        return mul(self, other)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        return getitem(self, idx)

    def reshape(self, *shape):
        return reshape(self, shape[0] if len(shape) == 1 and isinstance(shape[0], tuple) else shape)

    def transpose(self, *axes):
        return transpose(self, axes)

    def sum(self):
        return total(self)

    def mean(self):
        return mean(self)


def _node(data, parents, backward) -> Tensor:
    req = any(p.requires_grad or p._parents for p in parents)
    if not req:
        return Tensor(data)
    return Tensor(data, _parents=tuple(parents), _backward=backward)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _same_shape(a: Tensor, b: Tensor, op: str) -> None:
    if a.shape != b.shape:
        raise ShapeError(f"{op}: shapes {a.shape} and {b.shape} differ")


# -- elementwise -----------------------------------------------------------

def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _same_shape(a, b, "add")
    return _node(a.data + b.data, (a, b), lambda g: (g, g))


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _same_shape(a, b, "sub")
    return _node(a.data - b.data, (a, b), lambda g: (g, -g))


def mul(a, b) -> Tensor:
    a = as_tensor(a)
    if np.isscalar(b):
        return _node(a.data * b, (a,), lambda g: (g * b,))
    b = as_tensor(b)
    _same_shape(a, b, "mul")
    return _node(a.data * b.data, (a, b), lambda g: (g * b.data, g * a.data))


def relu(x: Tensor) -> Tensor:
    # subgradient at 0 is 0
    mask = x.data > 0
    return _node(np.where(mask, x.data, 0.0), (x,), lambda g: (g * mask,))


def bias_add(x: Tensor, b: Tensor, axis: int | None = None) -> Tensor:
    """x + b where b's shape matches x's trailing dims, or x.shape[axis] when axis is given."""
    if axis is None:
        nd = b.data.ndim
        if x.shape[x.data.ndim - nd:] != b.shape:
            raise ShapeError(f"bias_add: bias {b.shape} does not match trailing dims of {x.shape}")
        lead = tuple(range(x.data.ndim - nd))
        return _node(x.data + b.data, (x, b), lambda g: (g, g.sum(axis=lead) if lead else g))
    ax = axis % x.data.ndim
    if b.data.ndim != 1 or b.shape[0] != x.shape[ax]:
        raise ShapeError(f"bias_add: bias {b.shape} does not match axis {axis} of {x.shape}")
    shape = [1] * x.data.ndim
    shape[ax] = -1
    other = tuple(i for i in range(x.data.ndim) if i != ax)
    return _node(x.data + b.data.reshape(shape), (x, b), lambda g: (g, g.sum(axis=other)))


def scale_shift(x: Tensor, gamma: Tensor, beta: Tensor, axis: int = -1) -> Tensor:
    """Per-feature affine along one axis: x * gamma + beta."""
    ax = axis % x.data.ndim
    if gamma.shape != (x.shape[ax],) or beta.shape != (x.shape[ax],):
        raise ShapeError(f"scale_shift: params {gamma.shape}/{beta.shape} vs axis {axis} of {x.shape}")
    shape = [1] * x.data.ndim
    shape[ax] = -1
    gr, br = gamma.data.reshape(shape), beta.data.reshape(shape)
    other = tuple(i for i in range(x.data.ndim) if i != ax)

    def back(g):
        return g * gr, (g * x.data).sum(axis=other), g.sum(axis=other)

    return _node(x.data * gr + br, (x, gamma, beta), back)


# -- shape -----------------------------------------------------------------

def reshape(x: Tensor, shape) -> Tensor:
    old = x.shape
    return _node(x.data.reshape(shape), (x,), lambda g: (g.reshape(old),))


def transpose(x: Tensor, axes) -> Tensor:
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    return _node(x.data.transpose(axes), (x,), lambda g: (g.transpose(inv),))


def getitem(x: Tensor, idx) -> Tensor:
    def back(g):
        full = np.zeros_like(x.data)
        full[idx] += g
        return (full,)
    return _node(x.data[idx], (x,), back)


def concat(xs: Sequence[Tensor], axis: int) -> Tensor:
    sizes = [t.shape[axis] for t in xs]
    cuts = np.cumsum(sizes)[:-1]
    return _node(np.concatenate([t.data for t in xs], axis=axis), tuple(xs),
                 lambda g: tuple(np.split(g, cuts, axis=axis)))


def expand(x: Tensor, lead: tuple[int, ...]) -> Tensor:
    """Repeat x over new leading axes."""
    n = len(lead)
    return _node(np.broadcast_to(x.data, lead + x.shape).copy(), (x,),
                 lambda g: (g.sum(axis=tuple(range(n))),))


# -- reductions ------------------------------------------------------------

def total(x: Tensor) -> Tensor:
    return _node(np.array(x.data.sum()), (x,), lambda g: (np.full(x.shape, float(g)),))


def mean(x: Tensor) -> Tensor:
    n = x.data.size
    return _node(np.array(x.data.sum() / n), (x,), lambda g: (np.full(x.shape, float(g) / n),))


def global_avg_pool(x: Tensor) -> Tensor:
    """(N, C, H, W) -> (N, C)."""
    n, c, h, w = x.shape
    return _node(x.data.mean(axis=(2, 3)), (x,),
                 lambda g: (np.broadcast_to(g[:, :, None, None] / (h * w), x.shape).copy(),))


# -- linear algebra --------------------------------------------------------

def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Batched matmul with identical leading dims: (..., m, k) @ (..., k, n)."""
    if a.data.ndim != b.data.ndim or a.shape[:-2] != b.shape[:-2] or a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: incompatible shapes {a.shape} and {b.shape}")
    return _node(a.data @ b.data, (a, b),
                 lambda g: (g @ np.swapaxes(b.data, -1, -2), np.swapaxes(a.data, -1, -2) @ g))


def linear(x: Tensor, w: Tensor, b: Tensor | None = None) -> Tensor:
    """x (..., in) @ w (in, out) + b (out,)."""
    if x.shape[-1] != w.shape[0] or w.data.ndim != 2:
        raise ShapeError(f"linear: input {x.shape} vs weight {w.shape}")
    lead = x.shape[:-1]
    x2 = x.data.reshape(-1, w.shape[0])
    out = x2 @ w.data
    if b is not None:
        out = out + b.data

    def back(g):
        g2 = g.reshape(-1, w.shape[1])
        grads = [(g2 @ w.data.T).reshape(x.shape), x2.T @ g2]
        if b is not None:
            grads.append(g2.sum(axis=0))
        return grads

    parents = (x, w) if b is None else (x, w, b)
    return _node(out.reshape(lead + (w.shape[1],)), parents, back)


def conv2d(x: Tensor, w: Tensor, b: Tensor | None = None, stride: int = 1, pad: int = 0) -> Tensor:
    """Cross-correlation of x (N, C, H, W) with w (O, C, k, k).

    The logical layout is NCHW; internally the data is kept channels-last
    in memory, so the result is an NCHW view over an NHWC buffer.
    """
    if x.data.ndim != 4 or w.data.ndim != 4 or x.shape[1] != w.shape[1] or w.shape[2] != w.shape[3]:
        raise ShapeError(f"conv2d: incompatible input {x.shape} and weight {w.shape}")
    n, c, h, wd = x.shape
    o, _, k, _ = w.shape
    if h + 2 * pad < k or wd + 2 * pad < k:
        raise ShapeError(f"conv2d: kernel {w.shape} larger than padded input {x.shape}")
    s = stride
    ho = (h + 2 * pad - k) // s + 1
    wo = (wd + 2 * pad - k) // s + 1
    xh = x.data.transpose(0, 2, 3, 1)
    if pad:
        xp = np.zeros((n, h + 2 * pad, wd + 2 * pad, c))
        xp[:, pad:pad + h, pad:pad + wd] = xh
    else:
        xp = xh
    kkc = k * k * c
    if k == 1:
        cols = np.ascontiguousarray(xp[:, :s * ho:s, :s * wo:s]).reshape(-1, kkc)
    else:
        cols = np.concatenate([xp[:, i:i + s * ho:s, j:j + s * wo:s] for i in range(k) for j in range(k)],
                              axis=-1).reshape(-1, kkc)
    wr = w.data.transpose(2, 3, 1, 0).reshape(kkc, o)
    out = cols @ wr
    if b is not None:
        out += b.data

    def back(g):
        g2 = g.transpose(0, 2, 3, 1).reshape(-1, o)
        dw = (cols.T @ g2).reshape(k, k, c, o).transpose(3, 2, 0, 1)
        dcols = (g2 @ wr.T).reshape(n, ho, wo, k, k, c)
        if k == 1 and s == 1 and not pad:
            dxh = dcols.reshape(n, ho, wo, c)
        else:
            dxp = np.zeros(xp.shape)
            for i in range(k):
                for j in range(k):
                    dxp[:, i:i + s * ho:s, j:j + s * wo:s] += dcols[:, :, :, i, j]
            dxh = dxp[:, pad:pad + h, pad:pad + wd] if pad else dxp
        grads = [dxh.transpose(0, 3, 1, 2), np.ascontiguousarray(dw)]
        if b is not None:
            grads.append(g2.sum(axis=0))
        return grads

    parents = (x, w) if b is None else (x, w, b)
    return _node(out.reshape(n, ho, wo, o).transpose(0, 3, 1, 2), parents, back)


# -- normalization and softmax ----------------------------------------------

def normalize(x: Tensor, axes: tuple[int, ...], eps: float = 1e-5) -> Tensor:
    """(x - mean) / sqrt(var + eps) over `axes`, no affine."""
    mu = x.data.mean(axis=axes, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=axes, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    y = xc * inv

    def back(g):
        gm = g.mean(axis=axes, keepdims=True)
        gym = (g * y).mean(axis=axes, keepdims=True)
        return (inv * (g - gm - y * gym),)

    return _node(y, (x,), back)


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize the last axis, then per-feature affine."""
    return scale_shift(normalize(x, (-1,), eps), gamma, beta, axis=-1)


def softmax(x: Tensor) -> Tensor:
    """Softmax over the last axis."""
    z = x.data - x.data.max(axis=-1, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=-1, keepdims=True)
    return _node(y, (x,), lambda g: (y * (g - (g * y).sum(axis=-1, keepdims=True)),))


def softmax_np(z: np.ndarray) -> np.ndarray:
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def cross_entropy(logits: Tensor, labels) -> Tensor:
    """Mean over the batch of -log softmax(logits)[label]."""
    labels = np.asarray(labels, dtype=np.int64)
    if logits.data.ndim != 2 or labels.shape != (logits.shape[0],):
        raise ShapeError(f"cross_entropy: logits {logits.shape} vs labels {labels.shape}")
    k = logits.shape[1]
    if labels.size and (labels.min() < 0 or labels.max() >= k):
        raise ValueError(f"labels must lie in [0, {k - 1}]")
    z = logits.data - logits.data.max(axis=1, keepdims=True)
    logz = np.log(np.exp(z).sum(axis=1, keepdims=True))
    logp = z - logz
    b = logits.shape[0]
    loss = -logp[np.arange(b), labels].sum() / b

    def back(g):
        p = np.exp(logp)
        p[np.arange(b), labels] -= 1.0
        return (p * (float(g) / b),)

    return _node(np.array(loss), (logits,), back)


# -- parameters and optimization ---------------------------------------------

class ParamStore:
    """Named parameters with Adam moments; iteration is always in name order."""

    MAGIC = b"AD2W"
    VERSION = 1

    def __init__(self):
        self._params: dict[str, Tensor] = {}
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}
        self.step = 0

    def add(self, name: str, value: np.ndarray) -> Tensor:
        if name in self._params:
            raise KeyError(f"duplicate parameter {name!r}")
        t = Tensor(np.array(value, dtype=np.float64), requires_grad=True, name=name)
        self._params[name] = t
        return t

    def __getitem__(self, name: str) -> Tensor:
        return self._params[name]

    def __contains__(self, name: str) -> bool:
        return name in self._params

    def names(self) -> list[str]:
        return sorted(self._params)

    def items(self):
        return [(n, self._params[n]) for n in self.names()]

    def count(self, prefix: str = "") -> int:
        return int(sum(t.data.size for n, t in self._params.items() if n.startswith(prefix)))

    def zero_grad(self) -> None:
        for t in self._params.values():
            t.grad = None

    def checksum(self) -> str:
        h = hashlib.sha256()
        for name, t in self.items():
            h.update(name.encode())
            h.update(np.ascontiguousarray(t.data, dtype="<f8").tobytes())
        return h.hexdigest()

    def to_bytes(self) -> bytes:
        out = [self.MAGIC, struct.pack("<I", self.VERSION)]
        for name, t in self.items():
            nb = name.encode("utf-8")
            out.append(struct.pack("<I", len(nb)))
            out.append(nb)
            out.append(struct.pack("<I", t.data.ndim))
            out.append(struct.pack(f"<{t.data.ndim}I", *t.shape))
            out.append(np.ascontiguousarray(t.data, dtype="<f8").tobytes())
        return b"".join(out)

    @classmethod
    def from_bytes(cls, buf: bytes) -> "ParamStore":
        if buf[:4] != cls.MAGIC:
            raise ValueError("not an AD2W parameter file")
        (version,) = struct.unpack_from("<I", buf, 4)
        if version != cls.VERSION:
            raise ValueError(f"unsupported parameter file version {version}")
        pos = 8
        store = cls()
        while pos < len(buf):
            (ln,) = struct.unpack_from("<I", buf, pos)
            pos += 4
            name = buf[pos:pos + ln].decode("utf-8")
            pos += ln
            (rank,) = struct.unpack_from("<I", buf, pos)
            pos += 4
            dims = struct.unpack_from(f"<{rank}I", buf, pos)
            pos += 4 * rank
            size = int(np.prod(dims)) if rank else 1
            vals = np.frombuffer(buf, dtype="<f8", count=size, offset=pos).reshape(dims)
            pos += 8 * size
            store.add(name, vals.astype(np.float64))
        return store

    def save(self, path) -> None:
        with open(path, "wb") as fh:
            fh.write(self.to_bytes())

    @classmethod
    def load(cls, path) -> "ParamStore":
        with open(path, "rb") as fh:
            return cls.from_bytes(fh.read())

    def load_values(self, other: "ParamStore") -> None:
        if other.names() != self.names():
            raise KeyError("parameter names differ")
        for name, t in self.items():
            if other[name].shape != t.shape:
                raise ShapeError(f"{name}: {other[name].shape} vs {t.shape}")
            t.data = other[name].data.copy()


def adam_step(store: ParamStore, lr: float, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8) -> None:
    missing = [n for n, t in store.items() if t.grad is None]
    if missing:
        raise ValueError(f"missing gradient for parameter(s): {', '.join(missing)}")
    store.step += 1
    t = store.step
    c1 = 1.0 - beta1 ** t
    c2 = 1.0 - beta2 ** t
    for name, p in store.items():
        g = p.grad
        m = store.m.get(name)
        if m is None:
            m = store.m[name] = np.zeros_like(p.data)
            store.v[name] = np.zeros_like(p.data)
        v = store.v[name]
        m *= beta1
        m += (1.0 - beta1) * g
        v *= beta2
        v += (1.0 - beta2) * g * g
        p.data -= lr * (m / c1) / (np.sqrt(v / c2) + eps)


# -- verification ------------------------------------------------------------

def grad_check(fn: Callable[[], Tensor], tensors: Iterable[Tensor], n_coords: int = 64,
               h: float = 1e-5, seed: int = 0) -> float:
    """Max relative error between backprop and central differences.

    `fn` rebuilds the graph from the current tensor values and returns a
    scalar. Coordinates are sampled uniformly over all given tensors.
    """
    tensors = list(tensors)
    for t in tensors:
        t.grad = None
        t.requires_grad = True
    out = fn()
    out.backward()
    analytic = [t.grad.copy() if t.grad is not None else np.zeros_like(t.data) for t in tensors]
    sizes = np.array([t.data.size for t in tensors])
    total_n = int(sizes.sum())
    rng = np.random.default_rng(seed)
    picks = rng.choice(total_n, size=min(n_coords, total_n), replace=False)
    offsets = np.concatenate([[0], np.cumsum(sizes)])
    worst = 0.0
    for flat in picks:
        ti = int(np.searchsorted(offsets, flat, side="right") - 1)
        idx = np.unravel_index(int(flat - offsets[ti]), tensors[ti].shape)
        t = tensors[ti]
        orig = t.data[idx]
        t.data[idx] = orig + h
        fp = float(fn().data)
        t.data[idx] = orig - h
        fm = float(fn().data)
        t.data[idx] = orig
        num = (fp - fm) / (2.0 * h)
        a = float(analytic[ti][idx])
        worst = max(worst, abs(a - num) / max(1e-8, abs(a) + abs(num)))
    return worst
