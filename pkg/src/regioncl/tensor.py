"""Dense tensors with reverse-mode automatic differentiation.

A :class:`Tensor` wraps a numpy array. Every op that touches a tensor with
``requires_grad`` records a backward closure and its parents; :func:`backward`
linearises that graph into a :class:`Tape` (topological order) and walks it
once in reverse.
"""

from __future__ import annotations

import contextlib
from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np

from .errors import ContractError, DimensionError, NonFiniteError

_DEFAULT_DTYPE = np.float32
_DEBUG = False
_GRAD_ENABLED = True

# norms below this are treated as exactly zero
ZERO_NORM = 1e-12


def set_default_dtype(dtype) -> None:
    global _DEFAULT_DTYPE
    dtype = np.dtype(dtype)
    if dtype not in (np.dtype(np.float32), np.dtype(np.float64)):
        raise ValueError(f"unsupported dtype {dtype}")
    _DEFAULT_DTYPE = dtype.type


def get_default_dtype():
    return _DEFAULT_DTYPE


@contextlib.contextmanager
def default_dtype(dtype):
    previous = _DEFAULT_DTYPE
    set_default_dtype(dtype)
    try:
        yield
    finally:
        set_default_dtype(previous)


def set_debug(flag: bool) -> None:
    """Toggle the post-op NaN/Inf assertion."""
    global _DEBUG
    _DEBUG = bool(flag)


@contextlib.contextmanager
def debug_mode(flag: bool = True):
    previous = _DEBUG
    set_debug(flag)
    try:
        yield
    finally:
        set_debug(previous)


@contextlib.contextmanager
def no_grad():
    global _GRAD_ENABLED
    previous = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = previous


class Tensor:
    """n-dimensional float array that can take part in autodiff.

    ``flags`` carries per-op metadata such as the degenerate-input mask
    produced by :func:`l2_normalize` and :func:`cosine_similarity`.
    """

    __slots__ = ("data", "grad", "requires_grad", "name", "flags", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None, dtype=None, *, _check: bool = True):
        if isinstance(data, Tensor):
            data = data.data
        arr = np.array(data, dtype=dtype or _DEFAULT_DTYPE, copy=True) if _check else data
        if _check and not np.all(np.isfinite(arr)):
            raise NonFiniteError(f"tensor {name or ''} contains NaN or Inf at construction")
        self.data: np.ndarray = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = bool(requires_grad)
        self.name = name
        self.flags: dict = {}
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], Sequence[np.ndarray | None]] | None = None

    @property
    def shape(self) -> tuple[int, ...]:
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

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data, _check=False, dtype=self.data.dtype)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, dtype={self.dtype}, requires_grad={self.requires_grad})"

    def __len__(self) -> int:
        return len(self.data)

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
        return mul(self, reciprocal(other) if isinstance(other, Tensor) else 1.0 / other)

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return take(self, index)

    def sum(self, axis=None):
        return tsum(self, axis)

    def mean(self, axis=None):
        return mean(self, axis)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)


def as_tensor(x) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=_DEFAULT_DTYPE))


def parameter(data, name: str | None = None) -> Tensor:
    return Tensor(data, requires_grad=True, name=name)


def _make(data: np.ndarray, parents: Sequence[Tensor], backward_fn) -> Tensor:
    if _DEBUG and not np.all(np.isfinite(data)):
        raise NonFiniteError(f"non-finite values produced by {getattr(backward_fn, '__qualname__', 'op')}")
    out = Tensor(data, _check=False)
    if _GRAD_ENABLED and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward_fn
    return out


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


# ---------------------------------------------------------------------------
# elementwise and reductions


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return _make(a.data + b.data, (a, b), lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return _make(a.data - b.data, (a, b), lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)))


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return _make(
        a.data * b.data,
        (a, b),
        lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)),
    )


def reciprocal(a) -> Tensor:
    a = as_tensor(a)
    out = 1.0 / a.data
    return _make(out, (a,), lambda g: (-g * out * out,))


def exp(a) -> Tensor:
    a = as_tensor(a)
    out = np.exp(a.data)
    return _make(out, (a,), lambda g: (g * out,))


def log(a) -> Tensor:
    a = as_tensor(a)
    return _make(np.log(a.data), (a,), lambda g: (g / a.data,))


def square(a) -> Tensor:
    a = as_tensor(a)
    return _make(a.data * a.data, (a,), lambda g: (2.0 * g * a.data,))


def relu(x) -> Tensor:
    x = as_tensor(x)
    mask = x.data > 0
    return _make(np.where(mask, x.data, 0).astype(x.dtype), (x,), lambda g: (g * mask,))


def tsum(x, axis=None) -> Tensor:
    x = as_tensor(x)
    out = np.sum(x.data, axis=axis)

    def backward(g):
        if axis is not None:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, x.shape).copy(),)

    return _make(np.asarray(out, dtype=x.dtype), (x,), backward)


def mean(x, axis=None) -> Tensor:
    x = as_tensor(x)
    count = x.size if axis is None else x.shape[axis]
    return mul(tsum(x, axis), 1.0 / count)


def dot(u, v) -> Tensor:
    return tsum(mul(u, v))


def reshape(x, shape) -> Tensor:
    x = as_tensor(x)
    return _make(x.data.reshape(shape), (x,), lambda g: (g.reshape(x.shape),))


def transpose(x) -> Tensor:
    x = as_tensor(x)
    return _make(x.data.T, (x,), lambda g: (g.T,))


def take(x, index) -> Tensor:
    """Basic or fancy indexing along any axis; gradients scatter-add back."""
    x = as_tensor(x)

    def backward(g):
        full = np.zeros_like(x.data)
        np.add.at(full, index, g)
        return (full,)

    return _make(np.asarray(x.data[index]), (x,), backward)


def concat(tensors: Sequence[Tensor], axis: int = -1) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    sizes = [t.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]
    return _make(
        np.concatenate([t.data for t in tensors], axis=axis),
        tensors,
        lambda g: tuple(np.split(g, splits, axis=axis)),
    )


def stack(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    n = len(tensors)
    return _make(
        np.stack([t.data for t in tensors], axis=axis),
        tensors,
        lambda g: tuple(np.take(g, i, axis=axis) for i in range(n)),
    )


# ---------------------------------------------------------------------------
# linear algebra


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 1 or b.ndim < 1 or a.shape[-1] != b.shape[0 if b.ndim == 1 else -2]:
        raise DimensionError(f"matmul shapes {a.shape} and {b.shape} do not conform")

    def backward(g):
        if a.ndim == 1 and b.ndim == 1:
            return g * b.data, g * a.data
        if b.ndim == 1:
            return np.multiply.outer(g, b.data), np.tensordot(g, a.data, axes=(range(g.ndim), range(g.ndim)))
        if a.ndim == 1:
            return b.data @ g, np.outer(a.data, g)
        ga = g @ np.swapaxes(b.data, -1, -2)
        gb = np.swapaxes(a.data, -1, -2) @ g
        return _unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)

    return _make(a.data @ b.data, (a, b), backward)


def affine(x, W, b) -> Tensor:
    """``x @ W + b`` for ``x`` of shape (n, p), ``W`` (p, q) and ``b`` (q,)."""
    x, W, b = as_tensor(x), as_tensor(W), as_tensor(b)
    if x.ndim != 2 or W.ndim != 2 or b.ndim != 1 or x.shape[1] != W.shape[0] or W.shape[1] != b.shape[0]:
        raise DimensionError(f"affine: x{x.shape}, W{W.shape}, b{b.shape} do not conform")
    out = x.data @ W.data + b.data
    return _make(out, (x, W, b), lambda g: (g @ W.data.T, x.data.T @ g, g.sum(axis=0)))


# ---------------------------------------------------------------------------
# normalisation and probabilities


def softmax_row(x) -> Tensor:
    """Softmax over the last axis, max-subtracted."""
    x = as_tensor(x)
    z = x.data - x.data.max(axis=-1, keepdims=True)
    e = np.exp(z)
    out = e / e.sum(axis=-1, keepdims=True)

    def backward(g):
        return (out * (g - (g * out).sum(axis=-1, keepdims=True)),)

    return _make(out, (x,), backward)


def log_softmax_row(x) -> Tensor:
    x = as_tensor(x)
    z = x.data - x.data.max(axis=-1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=-1, keepdims=True))
    out = z - lse
    soft = np.exp(out)

    def backward(g):
        return (g - soft * g.sum(axis=-1, keepdims=True),)

    return _make(out, (x,), backward)


def l2_normalize(x) -> Tensor:
    """Scale the last axis to unit norm.

    Rows whose norm is (numerically) zero map to zero with zero gradient;
    the boolean mask of such rows is in ``out.flags["degenerate"]``.
    """
    x = as_tensor(x)
    norm = np.sqrt((x.data * x.data).sum(axis=-1, keepdims=True))
    zero = norm <= ZERO_NORM
    safe = np.where(zero, 1.0, norm)
    y = np.where(zero, 0.0, x.data / safe).astype(x.dtype)

    def backward(g):
        proj = (g * y).sum(axis=-1, keepdims=True)
        return (np.where(zero, 0.0, (g - y * proj) / safe),)

    out = _make(y, (x,), backward)
    out.flags["degenerate"] = zero[..., 0]
    return out


def cosine_similarity(u, v) -> Tensor:
    """Cosine over the last axis; zero vectors give 0 and set the degenerate flag."""
    u, v = as_tensor(u), as_tensor(v)
    if u.shape[-1] != v.shape[-1] or u.shape[-1] < 1:
        raise DimensionError(f"cosine_similarity shapes {u.shape} and {v.shape} do not conform")
    nu, nv = l2_normalize(u), l2_normalize(v)
    out = tsum(mul(nu, nv), axis=-1)
    out.flags["degenerate"] = np.logical_or(nu.flags["degenerate"], nv.flags["degenerate"])
    return out


def pairwise_cosine(a, b) -> Tensor:
    """Matrix of cosines between rows of ``a`` (n, d) and rows of ``b`` (m, d)."""
    na, nb = l2_normalize(a), l2_normalize(b)
    return matmul(na, transpose(nb))


def sigmoid(x) -> Tensor:
    x = as_tensor(x)
    out = _stable_sigmoid(x.data)
    return _make(out, (x,), lambda g: (g * out * (1.0 - out),))


def log_sigmoid(x) -> Tensor:
    x = as_tensor(x)
    out = -np.logaddexp(0.0, -x.data)
    sig = _stable_sigmoid(-x.data)
    return _make(out.astype(x.dtype), (x,), lambda g: (g * sig,))


def _stable_sigmoid(z: np.ndarray) -> np.ndarray:
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


# ---------------------------------------------------------------------------
# convolution and pooling


def _windows(x: np.ndarray, k: int, stride: int) -> np.ndarray:
    # (N, C, H', W', k, k) strided view
    win = np.lib.stride_tricks.sliding_window_view(x, (k, k), axis=(2, 3))
    return win[:, :, ::stride, ::stride]


def conv2d(x, K, stride: int = 1, padding: int = 0) -> Tensor:
    """Cross-correlation of ``x`` (C, H, W) or (N, C, H, W) with ``K`` (C_out, C_in, k, k)."""
    x, K = as_tensor(x), as_tensor(K)
    single = x.ndim == 3
    xd = x.data[None] if single else x.data
    if xd.ndim != 4 or K.ndim != 4:
        raise DimensionError(f"conv2d expects (N,)C,H,W input and 4-d kernel, got {x.shape} and {K.shape}")
    n, c_in, h, w = xd.shape
    c_out, kc, k, k2 = K.shape
    if kc != c_in or k != k2:
        raise DimensionError(f"conv2d kernel {K.shape} does not match input {x.shape}")
    if stride < 1:
        raise ContractError("conv2d stride must be >= 1")
    if k > h + 2 * padding or k > w + 2 * padding:
        raise DimensionError(f"conv2d kernel {K.shape} larger than padded input {x.shape} (padding {padding})")
    xp = np.pad(xd, ((0, 0), (0, 0), (padding, padding), (padding, padding))) if padding else xd
    win = _windows(xp, k, stride)
    ho, wo = win.shape[2], win.shape[3]
    # (N*H'*W', C_in*k*k)
    cols = win.transpose(0, 2, 3, 1, 4, 5).reshape(n * ho * wo, c_in * k * k)
    kmat = K.data.reshape(c_out, -1)
    out = (cols @ kmat.T).reshape(n, ho, wo, c_out).transpose(0, 3, 1, 2)

    def backward(g):
        if single:
            g = g[None]
        gmat = g.transpose(0, 2, 3, 1).reshape(n * ho * wo, c_out)
        gK = (gmat.T @ cols).reshape(K.shape)
        gcols = (gmat @ kmat).reshape(n, ho, wo, c_in, k, k)
        gxp = np.zeros_like(xp)
        for i in range(k):
            for j in range(k):
                gxp[:, :, i : i + stride * ho : stride, j : j + stride * wo : stride] += gcols[:, :, :, :, i, j].transpose(0, 3, 1, 2)
        gx = gxp[:, :, padding : padding + h, padding : padding + w] if padding else gxp
        return (gx[0] if single else gx), gK

    out = np.ascontiguousarray(out)
    return _make(out[0] if single else out, (x, K), backward)


def add_channel_bias(x, b) -> Tensor:
    """Add a per-channel bias to (C, H, W) or (N, C, H, W) feature maps."""
    x, b = as_tensor(x), as_tensor(b)
    return add(x, reshape(b, (-1, 1, 1)))


def max_pool2d(x, size: int = 2) -> Tensor:
    """Non-overlapping max pooling with window ``size``; trailing rows/cols that do not fit are dropped."""
    x = as_tensor(x)
    single = x.ndim == 3
    xd = x.data[None] if single else x.data
    n, c, h, w = xd.shape
    if size < 1 or size > h or size > w:
        raise DimensionError(f"pool window {size} does not fit input {x.shape}")
    ho, wo = h // size, w // size
    blocks = xd[:, :, : ho * size, : wo * size].reshape(n, c, ho, size, wo, size).transpose(0, 1, 2, 4, 3, 5)
    flat = blocks.reshape(n, c, ho, wo, size * size)
    arg = flat.argmax(axis=-1)
    out = np.take_along_axis(flat, arg[..., None], axis=-1)[..., 0]

    def backward(g):
        if single:
            g = g[None]
        gflat = np.zeros_like(flat)
        np.put_along_axis(gflat, arg[..., None], g[..., None], axis=-1)
        gblocks = gflat.reshape(n, c, ho, wo, size, size).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, ho * size, wo * size)
        gx = np.zeros_like(xd)
        gx[:, :, : ho * size, : wo * size] = gblocks
        return (gx[0] if single else gx,)

    return _make(out[0] if single else out, (x,), backward)


def global_avg_pool(x) -> Tensor:
    """Mean over the two trailing spatial axes."""
    x = as_tensor(x)
    h, w = x.shape[-2], x.shape[-1]
    out = x.data.mean(axis=(-2, -1))
    return _make(out, (x,), lambda g: (np.broadcast_to(g[..., None, None], x.shape) / (h * w),))


# ---------------------------------------------------------------------------
# tape and backward


@dataclass
class Tape:
    """Recorded operations in topological order (inputs before outputs)."""

    nodes: list[Tensor] = field(default_factory=list)

    @classmethod
    def from_output(cls, output: Tensor) -> "Tape":
        order: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(output, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                order.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for parent in node._parents:
                if parent.requires_grad and id(parent) not in seen:
                    stack.append((parent, False))
        return cls(order)

    def leaves(self) -> list[Tensor]:
        return [t for t in self.nodes if t._backward is None]


def backward(loss: Tensor, wrt: Iterable[Tensor] | None = None, tape: Tape | None = None) -> dict[Tensor, np.ndarray]:
    """Reverse pass from a scalar ``loss``.

    Returns a map from every requires_grad leaf (plus any tensor in ``wrt``)
    to its gradient; leaves in ``wrt`` that the loss does not depend on get
    exact zeros. ``.grad`` is set on the same tensors.
    """
    if loss.size != 1:
        raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
    tape = tape or Tape.from_output(loss)
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for node in reversed(tape.nodes):
        g = grads.get(id(node))
        if g is None or node._backward is None:
            continue
        for parent, pg in zip(node._parents, node._backward(g)):
            if pg is None or not parent.requires_grad:
                continue
            pg = np.asarray(pg, dtype=parent.dtype).reshape(parent.shape)
            if id(parent) in grads:
                grads[id(parent)] = grads[id(parent)] + pg
            else:
                grads[id(parent)] = pg
    result: dict[Tensor, np.ndarray] = {}
    for leaf in tape.leaves():
        result[leaf] = grads.get(id(leaf), np.zeros_like(leaf.data))
    for t in wrt or ():
        result[t] = grads.get(id(t), np.zeros_like(t.data))
    for t, g in result.items():
        t.grad = g
    return result
