"""Float64 tensors with tape-based reverse-mode differentiation.

A :class:`Tape` is activated as a context manager. While it is active, every
operation whose inputs are tracked (``requires_grad`` leaves, or outputs of
earlier recorded operations) appends a node holding its parents and a
vector-Jacobian closure. :func:`backward` then walks the nodes in reverse id
order, so each node is visited exactly once.

Binary operations accept equal shapes, or a trailing vector ``b`` of shape
``a.shape[-1:]`` broadcast over all leading axes of ``a``.
"""
from __future__ import annotations

import threading
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np
from scipy.special import erf

from diffad.errors import ContractError, ShapeError

_SQRT2 = np.sqrt(2.0)
_INV_SQRT_2PI = 1.0 / np.sqrt(2.0 * np.pi)


class Tensor:
    __slots__ = ("data", "requires_grad", "_node", "_tape")

    def __init__(self, data, requires_grad: bool = False):
        if isinstance(data, Tensor):
            data = data.data
        arr = np.asarray(data, dtype=np.float64)
        if arr.ndim == 0:
            arr = arr.reshape(())
        self.data = arr
        self.requires_grad = requires_grad
        self._node: int | None = None
        self._tape: Tape | None = None

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
        if self.data.size != 1:
            raise ContractError(f"item() on tensor of shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    def __add__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        if np.isscalar(other):
            return scale(self, float(other))
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)


@dataclass
class Node:
    kind: str
    parents: tuple[int | None, ...]
    vjp: Callable[[np.ndarray], Sequence[np.ndarray | None]] | None


class Tape:
    """Ordered record of differentiable operations."""

    _local = threading.local()

    def __init__(self):
        self.nodes: list[Node] = []
        self._leaves: dict[int, int] = {}
        self._leaf_refs: list[Tensor] = []

    def __enter__(self) -> Tape:
        stack = getattr(Tape._local, "stack", None)
        if stack is None:
            stack = Tape._local.stack = []
        stack.append(self)
        return self

    def __exit__(self, *exc) -> None:
        Tape._local.stack.pop()

    @staticmethod
    def current() -> Tape | None:
        stack = getattr(Tape._local, "stack", None)
        return stack[-1] if stack else None

    def watch(self, t: Tensor) -> int:
        """Register ``t`` as a leaf and return its node id."""
        if t._tape is self and t._node is not None:
            return t._node
        key = id(t)
        if key in self._leaves:
            return self._leaves[key]
        nid = len(self.nodes)
        self.nodes.append(Node("leaf", (), None))
        self._leaves[key] = nid
        self._leaf_refs.append(t)  # keeps id(t) stable for the tape's lifetime
        return nid

    def id_of(self, t: Tensor) -> int | None:
        if t._tape is self:
            return t._node
        return self._leaves.get(id(t))

    def _parent_id(self, t: Tensor) -> int | None:
        if t._tape is self and t._node is not None:
            return t._node
        if t.requires_grad:
            return self.watch(t)
        return None

    def record(self, kind: str, inputs: Sequence[Tensor], out: np.ndarray, vjp) -> Tensor:
        parents = tuple(self._parent_id(t) for t in inputs)
        res = Tensor(out)
        if all(p is None for p in parents):
            return res
        res._node = len(self.nodes)
        res._tape = self
        self.nodes.append(Node(kind, parents, vjp))
        return res


class Gradients(dict):
    """Node id -> gradient array, for every leaf reached from the loss."""

    def __init__(self, tape: Tape, grads: dict[int, np.ndarray]):
        super().__init__(grads)
        self.tape = tape

    def wrt(self, t: Tensor) -> np.ndarray:
        nid = self.tape.id_of(t)
        if nid is None or nid not in self:
            return np.zeros_like(t.data)
        return self[nid]


def backward(tape: Tape, loss: Tensor) -> Gradients:
    if loss.size != 1:
        raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
    root = tape.id_of(loss)
    if root is None:
        return Gradients(tape, {})
    grads: dict[int, np.ndarray] = {root: np.ones_like(loss.data)}
    leaves: dict[int, np.ndarray] = {}
    for nid in range(root, -1, -1):
        g = grads.pop(nid, None)
        if g is None:
            continue
        node = tape.nodes[nid]
        if node.vjp is None:
            leaves[nid] = g
            continue
        for pid, pg in zip(node.parents, node.vjp(g)):
            if pid is None or pg is None:
                continue
            if pid in grads:
                grads[pid] = grads[pid] + pg
            else:
                grads[pid] = pg
    return Gradients(tape, leaves)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _record(kind, inputs, out, vjp) -> Tensor:
    tape = Tape.current()
    if tape is None:
        return Tensor(out)
    return tape.record(kind, inputs, out, vjp)


def _check_binary(a: Tensor, b: Tensor) -> bool:
    """Return True if ``b`` is broadcast as a trailing vector."""
    if a.shape == b.shape:
        return False
    if b.ndim == 1 and a.ndim >= 1 and a.shape[-1:] == b.shape:
        return True
    raise ShapeError(f"incompatible shapes {a.shape} and {b.shape}")


def _unbroadcast(g: np.ndarray, bcast: bool) -> np.ndarray:
    return g.reshape(-1, g.shape[-1]).sum(axis=0) if bcast else g


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    bc = _check_binary(a, b)
    return _record("add", (a, b), a.data + b.data, lambda g: (g, _unbroadcast(g, bc)))


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    bc = _check_binary(a, b)
    return _record("sub", (a, b), a.data - b.data, lambda g: (g, -_unbroadcast(g, bc)))


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    bc = _check_binary(a, b)
    ad, bd = a.data, b.data
    return _record("mul", (a, b), ad * bd, lambda g: (g * bd, _unbroadcast(g * ad, bc)))


def scale(a, c: float) -> Tensor:
    a = as_tensor(a)
    return _record("scale", (a,), a.data * c, lambda g: (g * c,))


def relu(a) -> Tensor:
    a = as_tensor(a)
    mask = a.data > 0
    return _record("relu", (a,), np.where(mask, a.data, 0.0), lambda g: (g * mask,))


def gelu(a) -> Tensor:
    """Exact GELU, x * Phi(x)."""
    a = as_tensor(a)
    x = a.data
    cdf = 0.5 * (1.0 + erf(x / _SQRT2))
    pdf = _INV_SQRT_2PI * np.exp(-0.5 * x * x)
    return _record("gelu", (a,), x * cdf, lambda g: (g * (cdf + x * pdf),))


_UNARY = {"relu": relu, "gelu": gelu}
_BINARY = {"add": add, "sub": sub, "mul": mul}


def elementwise(op: str, a, b=None) -> Tensor:
    if op in _UNARY:
        return _UNARY[op](a)
    if op in _BINARY:
        if b is None:
            raise ContractError(f"{op} needs two operands")
        return _BINARY[op](a, b)
    raise ContractError(f"unknown elementwise op {op!r}")


def matmul(a, b) -> Tensor:
    """Matrix product over the last two axes.

    ``a`` may carry leading batch axes. ``b`` is either 2-D (shared across
    the batch) or has the same leading axes as ``a``.
    """
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul shape mismatch {a.shape} @ {b.shape}")
    if b.ndim > 2 and b.shape[:-2] != a.shape[:-2]:
        raise ShapeError(f"matmul batch mismatch {a.shape} @ {b.shape}")
    ad, bd = a.data, b.data
    shared = bd.ndim == 2

    def vjp(g):
        ga = g @ np.swapaxes(bd, -1, -2)
        if shared:
            gb = ad.reshape(-1, ad.shape[-1]).T @ g.reshape(-1, g.shape[-1])
        else:
            gb = np.swapaxes(ad, -1, -2) @ g
        return ga, gb

    return _record("matmul", (a, b), ad @ bd, vjp)


def transpose(a) -> Tensor:
    """Swap the last two axes."""
    a = as_tensor(a)
    return _record("transpose", (a,), np.swapaxes(a.data, -1, -2), lambda g: (np.swapaxes(g, -1, -2),))


def reshape(a, shape) -> Tensor:
    a = as_tensor(a)
    old = a.shape
    return _record("reshape", (a,), a.data.reshape(shape), lambda g: (g.reshape(old),))


def concat(a, b) -> Tensor:
    """Concatenate along the last axis."""
    a, b = as_tensor(a), as_tensor(b)
    if a.shape[:-1] != b.shape[:-1]:
        raise ShapeError(f"concat mismatch {a.shape} and {b.shape}")
    k = a.shape[-1]
    out = np.concatenate([a.data, b.data], axis=-1)
    return _record("concat", (a, b), out, lambda g: (g[..., :k], g[..., k:]))


def repeat_tokens(a, n: int) -> Tensor:
    """(batch, w) -> (batch, n, w), the same row copied to every token."""
    a = as_tensor(a)
    if a.ndim != 2:
        raise ShapeError(f"repeat_tokens expects 2-D input, got {a.shape}")
    out = np.repeat(a.data[:, None, :], n, axis=1)
    return _record("repeat_tokens", (a,), out, lambda g: (g.sum(axis=1),))


def sum(a) -> Tensor:  # noqa: A001
    a = as_tensor(a)
    shape = a.shape
    return _record("sum", (a,), np.asarray(a.data.sum()), lambda g: (np.broadcast_to(g, shape).copy(),))


def mean(a) -> Tensor:
    a = as_tensor(a)
    shape, n = a.shape, a.size
    return _record("mean", (a,), np.asarray(a.data.mean()), lambda g: (np.full(shape, g / n),))


def square(a) -> Tensor:
    a = as_tensor(a)
    x = a.data
    return _record("square", (a,), x * x, lambda g: (2.0 * g * x,))


def softmax(x) -> Tensor:
    """Softmax along the last axis, max-shifted."""
    x = as_tensor(x)
    z = x.data - x.data.max(axis=-1, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=-1, keepdims=True)

    def vjp(g):
        return (y * (g - (g * y).sum(axis=-1, keepdims=True)),)

    return _record("softmax", (x,), y, vjp)


def layer_norm(x, gain, bias, eps: float = 1e-5) -> Tensor:
    """Standardize along the last axis, then ``gain * xhat + bias``."""
    if eps <= 0:
        raise ContractError("layer_norm eps must be positive")
    x, gain, bias = as_tensor(x), as_tensor(gain), as_tensor(bias)
    d = x.shape[-1]
    if gain.shape != (d,) or bias.shape != (d,):
        raise ShapeError(f"layer_norm parameters must have shape ({d},)")
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    gd = gain.data

    def vjp(g):
        gx_hat = g * gd
        gx = inv * (gx_hat - gx_hat.mean(axis=-1, keepdims=True)
                    - xhat * (gx_hat * xhat).mean(axis=-1, keepdims=True))
        flat = lambda a: a.reshape(-1, d)  # noqa: E731
        return gx, (flat(g) * flat(xhat)).sum(axis=0), flat(g).sum(axis=0)

    return _record("layer_norm", (x, gain, bias), xhat * gd + bias.data, vjp)
