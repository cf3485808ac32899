"""Dense tensors with reverse-mode automatic differentiation.

A :class:`Tensor` wraps a numpy array (float32 by default, float64 allowed for
gradient oracles). Every differentiable operation records its parents and a
closure mapping the output gradient to parent gradients; :func:`backward`
replays that record in reverse topological order.
"""

from __future__ import annotations

import contextlib
import struct
from typing import Callable, Iterable, Sequence

import numpy as np
from scipy.special import erf

from .errors import NumericError, ShapeError, UsageError

LAYER_NORM_EPS = 1e-5
_SQRT2 = np.sqrt(2.0)
_INV_SQRT_2PI = 1.0 / np.sqrt(2.0 * np.pi)

_grad_enabled = True


@contextlib.contextmanager
def no_grad():
    """Disable graph recording inside the block (evaluation, generation)."""
    global _grad_enabled
    prev, _grad_enabled = _grad_enabled, False
    try:
        yield
    finally:
        _grad_enabled = prev


def rng(seed: int) -> np.random.Generator:
    """PCG64 generator; all peftkit randomness flows through this."""
    return np.random.Generator(np.random.PCG64(int(seed) & 0xFFFFFFFFFFFFFFFF))


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward", "op")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        if isinstance(data, Tensor):
            data = data.data
        if dtype is None:
            dtype = data.dtype if isinstance(data, np.ndarray) and data.dtype == np.float64 else np.float32
        self.data = np.array(data, dtype=dtype)
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable | None = None
        self.op = "leaf"

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float("nan")

    def detach(self) -> Tensor:
        return Tensor(self.data, dtype=self.data.dtype)

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{flag})"

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return add(self, neg(_lift(other, self)))

    def __rsub__(self, other):
        return add(_lift(other, self), neg(self))

    def __neg__(self):
        return neg(self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __matmul__(self, other):
        return matmul(self, other)

    @property
    def T(self) -> Tensor:
        return transpose(self)

    def sum(self, axis=None, keepdims=False) -> Tensor:
        return sum_(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False) -> Tensor:
        return mean(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape) -> Tensor:
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes) -> Tensor:
        return transpose(self, axes or None)

    # binary layout: u64 rank, u64 dims, f32 row-major payload, all little-endian
    def to_bytes(self) -> bytes:
        header = struct.pack(f"<Q{self.ndim}Q", self.ndim, *self.shape)
        return header + np.ascontiguousarray(self.data, dtype="<f4").tobytes()

    @classmethod
    def from_bytes(cls, buf: bytes) -> Tensor:
        (rank,) = struct.unpack_from("<Q", buf, 0)
        dims = struct.unpack_from(f"<{rank}Q", buf, 8)
        off = 8 + 8 * rank
        count = int(np.prod(dims, dtype=np.int64)) if rank else 1
        if len(buf) - off != 4 * count:
            raise ShapeError(f"payload of {len(buf) - off} bytes does not match shape {tuple(dims)}")
        arr = np.frombuffer(buf, dtype="<f4", count=count, offset=off).reshape(dims)
        return cls(arr.astype(np.float32))


def tensor(data, requires_grad: bool = False, dtype=None) -> Tensor:
    return Tensor(data, requires_grad=requires_grad, dtype=dtype)


def _lift(x, like: Tensor) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=like.dtype), dtype=like.dtype)


def make_result(data: np.ndarray, parents: Sequence[Tensor], backward_fn: Callable, op: str) -> Tensor:
    """Wrap ``data`` as the output of a differentiable op.

    ``backward_fn(grad_out)`` must return one gradient (or None) per parent.
    Fused ops outside this module (cross-entropy, quantized linear) use this too.
    """
    out = Tensor(data, dtype=data.dtype)
    if _grad_enabled and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward_fn
        out.op = op
    return out


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for i, n in enumerate(shape):
        if n == 1 and grad.shape[i] != 1:
            grad = grad.sum(axis=i, keepdims=True)
    return grad


# -- elementwise ---------------------------------------------------------


def add(a: Tensor, b) -> Tensor:
    b = _lift(b, a)
    try:
        out = a.data + b.data
    except ValueError:
        raise ShapeError(f"cannot add shapes {a.shape} and {b.shape}") from None
    return make_result(
        out, (a, b), lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)), "add"
    )


def neg(a: Tensor) -> Tensor:
    return make_result(-a.data, (a,), lambda g: (-g,), "neg")


def mul(a: Tensor, b) -> Tensor:
    b = _lift(b, a)
    try:
        out = a.data * b.data
    except ValueError:
        raise ShapeError(f"cannot multiply shapes {a.shape} and {b.shape}") from None
    return make_result(
        out,
        (a, b),
        lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)),
        "mul",
    )


def gelu(x: Tensor) -> Tensor:
    """Exact GeLU, x * Phi(x) with Phi the standard normal CDF."""
    cdf = 0.5 * (1.0 + erf(x.data / _SQRT2))
    out = (x.data * cdf).astype(x.dtype)

    def backward(g):
        pdf = _INV_SQRT_2PI * np.exp(-0.5 * x.data * x.data)
        return ((g * (cdf + x.data * pdf)).astype(x.dtype),)

    return make_result(out, (x,), backward, "gelu")


# -- linear algebra ------------------------------------------------------


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product over the last two axes; leading axes broadcast."""
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul dimension mismatch: {a.shape} @ {b.shape}")
    out = np.matmul(a.data, b.data)

    def backward(g):
        ga = np.matmul(g, np.swapaxes(b.data, -1, -2)) if a.requires_grad else None
        gb = np.matmul(np.swapaxes(a.data, -1, -2), g) if b.requires_grad else None
        return (
            None if ga is None else _unbroadcast(ga, a.shape),
            None if gb is None else _unbroadcast(gb, b.shape),
        )

    return make_result(out, (a, b), backward, "matmul")


def transpose(a: Tensor, axes: Sequence[int] | None = None) -> Tensor:
    if axes is None:
        axes = tuple(range(a.ndim - 2)) + (a.ndim - 1, a.ndim - 2)
    axes = tuple(axes)
    inverse = tuple(np.argsort(axes))
    return make_result(np.transpose(a.data, axes), (a,), lambda g: (np.transpose(g, inverse),), "transpose")


def reshape(a: Tensor, shape: Sequence[int]) -> Tensor:
    return make_result(a.data.reshape(shape), (a,), lambda g: (g.reshape(a.shape),), "reshape")


def broadcast_to(a: Tensor, shape: Sequence[int]) -> Tensor:
    shape = tuple(shape)
    return make_result(
        np.broadcast_to(a.data, shape).copy(), (a,), lambda g: (_unbroadcast(g, a.shape),), "broadcast"
    )


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = list(tensors)
    out = np.concatenate([t.data for t in tensors], axis=axis)
    bounds = np.cumsum([t.shape[axis] for t in tensors])[:-1]
    return make_result(out, tensors, lambda g: tuple(np.split(g, bounds, axis=axis)), "concat")


# -- reductions ----------------------------------------------------------


def sum_(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    out = np.sum(a.data, axis=axis, keepdims=keepdims)

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape).astype(a.dtype),)

    return make_result(np.asarray(out, dtype=a.dtype), (a,), backward, "sum")


def mean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    count = a.size if axis is None else int(np.prod([a.shape[i] for i in np.atleast_1d(axis)]))
    return mul(sum_(a, axis=axis, keepdims=keepdims), 1.0 / count)


# -- normalisation -------------------------------------------------------


def softmax(v: Tensor, axis: int = -1) -> Tensor:
    """Max-subtracted softmax. Entries of -inf act as masked positions."""
    if np.isnan(v.data).any():
        raise NumericError("softmax received NaN input")
    shifted = v.data - np.max(v.data, axis=axis, keepdims=True)
    e = np.exp(shifted)
    y = e / np.sum(e, axis=axis, keepdims=True)

    def backward(g):
        return (y * (g - np.sum(g * y, axis=axis, keepdims=True)),)

    return make_result(y, (v,), backward, "softmax")


def log_softmax(v: Tensor, axis: int = -1) -> Tensor:
    if np.isnan(v.data).any():
        raise NumericError("log_softmax received NaN input")
    shifted = v.data - np.max(v.data, axis=axis, keepdims=True)
    lse = np.log(np.sum(np.exp(shifted), axis=axis, keepdims=True))
    out = shifted - lse

    def backward(g):
        return (g - np.exp(out) * np.sum(g, axis=axis, keepdims=True),)

    return make_result(out, (v,), backward, "log_softmax")


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = LAYER_NORM_EPS) -> Tensor:
    """Normalise the last axis to zero mean / unit variance, then gamma*x_hat + beta."""
    d = x.shape[-1]
    if gamma.shape != (d,) or beta.shape != (d,):
        raise ShapeError(f"layer_norm params {gamma.shape}/{beta.shape} do not match width {d}")
    mu = x.data.mean(axis=-1, keepdims=True)
    centred = x.data - mu
    var = (centred * centred).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = centred * inv
    out = xhat * gamma.data + beta.data

    def backward(g):
        dxhat = g * gamma.data
        dx = inv / d * (d * dxhat - dxhat.sum(-1, keepdims=True) - xhat * (dxhat * xhat).sum(-1, keepdims=True))
        lead = tuple(range(g.ndim - 1))
        return dx, (g * xhat).sum(axis=lead), g.sum(axis=lead)

    return make_result(out.astype(x.dtype), (x, gamma, beta), backward, "layer_norm")


# -- indexing ------------------------------------------------------------


def embedding(table: Tensor, ids) -> Tensor:
    """Gather rows of ``table`` for integer ``ids`` (any shape)."""
    ids = np.asarray(ids, dtype=np.int64)

    def backward(g):
        grad = np.zeros_like(table.data)
        np.add.at(grad, ids.reshape(-1), g.reshape(-1, table.shape[-1]))
        return (grad,)

    return make_result(table.data[ids], (table,), backward, "embedding")


def masked_fill(x: Tensor, mask: np.ndarray, value: float) -> Tensor:
    """Replace entries where ``mask`` is True with a constant (no gradient there)."""
    mask = np.broadcast_to(np.asarray(mask, dtype=bool), x.shape)
    out = np.where(mask, np.asarray(value, dtype=x.dtype), x.data)
    return make_result(out, (x,), lambda g: (np.where(mask, 0, g).astype(x.dtype),), "masked_fill")


# -- reverse mode --------------------------------------------------------


class GradTape:
    """Operations reachable from a root, in topological order (inputs first).

    Each node appears exactly once; :meth:`run` visits them in reverse.
    """

    def __init__(self, root: Tensor):
        self.root = root
        self.nodes: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(root, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                self.nodes.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if id(p) not in seen:
                    stack.append((p, False))

    def __len__(self) -> int:
        return len(self.nodes)

    def run(self, seed: np.ndarray) -> dict[int, np.ndarray]:
        grads: dict[int, np.ndarray] = {id(self.root): seed}
        for node in reversed(self.nodes):
            g = grads.pop(id(node), None) if node._backward is not None else grads.get(id(node))
            if g is None or node._backward is None:
                continue
            for parent, pg in zip(node._parents, node._backward(g)):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                grads[key] = grads[key] + pg if key in grads else pg
        return grads


def backward(loss: Tensor, wrt: Iterable[Tensor] | None = None, tape: GradTape | None = None) -> GradTape:
    """Populate ``.grad`` on every leaf that requires grad and feeds ``loss``.

    Gradients accumulate into existing ``.grad`` buffers. Tensors listed in
    ``wrt`` that do not contribute to ``loss`` receive an all-zero gradient.
    """
    if loss.size != 1:
        raise UsageError(f"backward needs a scalar loss, got shape {loss.shape}")
    tape = tape or GradTape(loss)
    grads = tape.run(np.ones_like(loss.data))
    for node in tape.nodes:
        if node._backward is None and node.requires_grad:
            g = grads.get(id(node))
            if g is not None:
                g = np.asarray(g, dtype=node.dtype).reshape(node.shape)
                node.grad = g.copy() if node.grad is None else node.grad + g
    for t in wrt or ():
        if t.grad is None:
            t.grad = np.zeros_like(t.data)
    return tape
