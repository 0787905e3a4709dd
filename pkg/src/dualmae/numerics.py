"""A small float64 tensor engine with reverse-mode autodiff.

Storage is a numpy array; every op records a closure mapping the output
gradient to per-parent gradients. Broadcasting is limited to adding or
multiplying by a tensor whose shape matches the trailing dimensions of the
other operand (bias / affine parameters).
"""

from __future__ import annotations

import contextlib
import math
import zlib
from typing import Callable, Iterable, Sequence

import numpy as np

from .errors import ContractError, NonFiniteError, ShapeError

_GRAD_ENABLED = True


@contextlib.contextmanager
def no_grad():
    """Disable graph construction inside the block."""
    global _GRAD_ENABLED
    prev = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


def _check_finite(arr: np.ndarray, what: str) -> None:
    # a finite sum implies every element is finite; only fall back to the full scan otherwise
    if math.isfinite(np.add.reduce(arr, axis=None)):
        return
    if not np.isfinite(arr).all():
        raise NonFiniteError(f"non-finite values produced by {what}")


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "_op")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.array(data, dtype=np.float64)
        _check_finite(self.data, "tensor construction")
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], Sequence[np.ndarray | None]] | None = None
        self._op = "leaf"

    # -- construction helpers -------------------------------------------------

    @classmethod
    def _result(cls, data: np.ndarray, parents: Sequence["Tensor"], backward, op: str) -> "Tensor":
        _check_finite(data, op)
        out = cls.__new__(cls)
        out.data = data
        out.grad = None
        out._op = op
        needs = _GRAD_ENABLED and any(p.requires_grad for p in parents)
        out.requires_grad = needs
        if needs:
            out._parents = tuple(parents)
            out._backward = backward
        else:
            out._parents = ()
            out._backward = None
        return out

    @staticmethod
    def zeros(shape, requires_grad: bool = False) -> "Tensor":
        return Tensor(np.zeros(shape), requires_grad=requires_grad)

    # -- introspection --------------------------------------------------------

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
        if self.data.size != 1:
            raise ContractError(f"item() needs a single element, got shape {self.shape}")
        return float(self.data.reshape(()))

    def numpy(self) -> np.ndarray:
        return self.data

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, op={self._op}, requires_grad={self.requires_grad})"

    # -- autodiff -------------------------------------------------------------

    def backward(self, grad: np.ndarray | None = None) -> None:
        if grad is None:
            if self.data.size != 1:
                raise ContractError("backward() without a seed gradient needs a scalar output")
            grad = np.ones_like(self.data)
        order = _topological_order(self)
        pending: dict[int, np.ndarray] = {id(self): np.asarray(grad, dtype=np.float64)}
        for node in reversed(order):
            g = pending.pop(id(node), None)
            if g is None:
                continue
            _check_finite(g, f"backward of {node._op}")
            if node._backward is None:
                if node.requires_grad:
                    node.grad = g.copy() if node.grad is None else node.grad + g
                continue
            for parent, pg in zip(node._parents, node._backward(g)):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                if key in pending:
                    pending[key] = pending[key] + pg
                else:
                    pending[key] = pg

    # -- operator sugar -------------------------------------------------------

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return add(scale(self, -1.0), other)

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, float(other))
        return mul(self, other)

    def __rmul__(self, other):
        return self.__mul__(other)

    def __truediv__(self, other):
        if not isinstance(other, (int, float)):
            raise ContractError("division is only defined by a scalar")
        return scale(self, 1.0 / float(other))

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def reshape(self, *shape) -> "Tensor":
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes) -> "Tensor":
        return transpose(self, axes or None)

    def sum(self, axis=None) -> "Tensor":
        return tsum(self, axis)

    def mean(self, axis=None) -> "Tensor":
        return mean(self, axis)


def _topological_order(root: Tensor) -> list[Tensor]:
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if id(p) not in seen:
                stack.append((p, False))
    return order


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _reduce_to(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum a gradient over the leading axes that a trailing-dim operand was broadcast along."""
    if g.shape == shape:
        return g
    lead = g.ndim - len(shape)
    return g.sum(axis=tuple(range(lead))) if lead else g


def _check_broadcast(a: Tensor, b: Tensor, op: str) -> None:
    if a.shape == b.shape:
        return
    if b.ndim <= a.ndim and a.shape[a.ndim - b.ndim:] == b.shape:
        return
    raise ShapeError(f"{op}: shape {b.shape} is neither {a.shape} nor a trailing suffix of it")


# -- elementwise ---------------------------------------------------------------


def add(a, b) -> Tensor:
    a = as_tensor(a)
    if isinstance(b, (int, float)):
        c = float(b)
        return Tensor._result(a.data + c, (a,), lambda g: (g,), "add_scalar")
    b = as_tensor(b)
    if b.ndim > a.ndim:
        a, b = b, a
    _check_broadcast(a, b, "add")
    return Tensor._result(a.data + b.data, (a, b), lambda g: (g, _reduce_to(g, b.shape)), "add")


def sub(a, b) -> Tensor:
    a = as_tensor(a)
    if isinstance(b, (int, float)):
        return add(a, -float(b))
    b = as_tensor(b)
    _check_broadcast(a, b, "sub")
    return Tensor._result(a.data - b.data, (a, b), lambda g: (g, -_reduce_to(g, b.shape)), "sub")


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if b.ndim > a.ndim:
        a, b = b, a
    _check_broadcast(a, b, "mul")
    ad, bd = a.data, b.data

    def backward(g):
        return g * bd, _reduce_to(g * ad, bd.shape)

    return Tensor._result(ad * bd, (a, b), backward, "mul")


def scale(a: Tensor, c: float) -> Tensor:
    c = float(c)
    return Tensor._result(a.data * c, (a,), lambda g: (g * c,), "scale")


_GELU_K = math.sqrt(2.0 / math.pi)


def gelu(x: Tensor) -> Tensor:
    """Tanh-approximated GELU."""
    xd = x.data
    inner = _GELU_K * (xd + 0.044715 * xd**3)
    t = np.tanh(inner)
    out = 0.5 * xd * (1.0 + t)

    def backward(g):
        dinner = _GELU_K * (1.0 + 3 * 0.044715 * xd**2)
        return (g * (0.5 * (1.0 + t) + 0.5 * xd * (1.0 - t * t) * dinner),)

    return Tensor._result(out, (x,), backward, "gelu")


# -- linear algebra and shape ----------------------------------------------------


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product; ``a`` may carry leading batch dims when ``b`` is 2-D,
    otherwise both operands must share their leading dims."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError(f"matmul needs rank >= 2 operands, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul inner dimensions differ: {a.shape} @ {b.shape}")
    ad, bd = a.data, b.data
    if b.ndim == 2:
        out = ad @ bd

        def backward(g):
            ga = g @ bd.T
            gb = ad.reshape(-1, ad.shape[-1]).T @ g.reshape(-1, g.shape[-1])
            return ga, gb

        return Tensor._result(out, (a, b), backward, "matmul")
    if a.shape[:-2] != b.shape[:-2]:
        raise ShapeError(f"matmul batch dimensions differ: {a.shape} @ {b.shape}")
    out = np.matmul(ad, bd)

    def backward_batched(g):
        return np.matmul(g, np.swapaxes(bd, -1, -2)), np.matmul(np.swapaxes(ad, -1, -2), g)

    return Tensor._result(out, (a, b), backward_batched, "bmm")


def transpose(a: Tensor, axes: Sequence[int] | None = None) -> Tensor:
    if axes is None:
        axes = tuple(reversed(range(a.ndim)))
    axes = tuple(axes)
    if sorted(axes) != list(range(a.ndim)):
        raise ShapeError(f"transpose axes {axes} invalid for rank {a.ndim}")
    inverse = tuple(np.argsort(axes))
    return Tensor._result(np.transpose(a.data, axes), (a,), lambda g: (np.transpose(g, inverse),), "transpose")


def reshape(a: Tensor, shape: Sequence[int]) -> Tensor:
    shape = tuple(int(s) for s in shape)
    if int(np.prod(shape)) != a.size:
        raise ShapeError(f"cannot reshape {a.shape} into {shape}")
    src = a.shape
    return Tensor._result(a.data.reshape(shape), (a,), lambda g: (g.reshape(src),), "reshape")


def _as_index(indices, n: int) -> np.ndarray:
    idx = np.asarray(indices, dtype=np.int64).reshape(-1)
    if idx.size and (idx.min() < 0 or idx.max() >= n):
        raise IndexError(f"row index out of range [0, {n}): min={idx.min()} max={idx.max()}")
    return idx


def gather(a: Tensor, indices) -> Tensor:
    """Select rows (axis 0) in the given order."""
    idx = _as_index(indices, a.shape[0])
    shape = a.shape

    def backward(g):
        out = np.zeros(shape)
        np.add.at(out, idx, g)
        return (out,)

    return Tensor._result(a.data[idx], (a,), backward, "gather")


def scatter(a: Tensor, indices, n_rows: int) -> Tensor:
    """Place the rows of ``a`` at ``indices`` of a zero tensor with ``n_rows`` rows
    (repeated indices accumulate)."""
    idx = _as_index(indices, n_rows)
    if idx.size != a.shape[0]:
        raise ShapeError(f"scatter: {idx.size} indices for {a.shape[0]} rows")
    out = np.zeros((n_rows,) + a.shape[1:])
    np.add.at(out, idx, a.data)
    return Tensor._result(out, (a,), lambda g: (g[idx],), "scatter")


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    if not tensors:
        raise ShapeError("concat of an empty list")
    ref = tensors[0].shape
    ax = axis % len(ref)
    for t in tensors[1:]:
        if t.ndim != len(ref) or any(t.shape[i] != ref[i] for i in range(len(ref)) if i != ax):
            raise ShapeError(f"concat: incompatible shapes {ref} and {t.shape} on axis {axis}")
    sizes = [t.shape[ax] for t in tensors]
    bounds = np.cumsum([0] + sizes)

    def backward(g):
        return tuple(np.take(g, range(bounds[i], bounds[i + 1]), axis=ax) for i in range(len(tensors)))

    return Tensor._result(np.concatenate([t.data for t in tensors], axis=ax), tensors, backward, "concat")


# -- reductions and normalisation ---------------------------------------------------


def tsum(a: Tensor, axis=None) -> Tensor:
    shape = a.shape

    def backward(g):
        if axis is None:
            return (np.broadcast_to(g, shape).copy(),)
        return (np.broadcast_to(np.expand_dims(g, axis), shape).copy(),)

    return Tensor._result(np.asarray(a.data.sum(axis=axis)), (a,), backward, "sum")


def mean(a: Tensor, axis=None) -> Tensor:
    n = a.size if axis is None else a.shape[axis]
    return scale(tsum(a, axis), 1.0 / n)


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-6) -> Tensor:
    d = x.shape[-1]
    if gamma.shape != (d,) or beta.shape != (d,):
        raise ShapeError(f"layer_norm: affine shapes {gamma.shape}/{beta.shape} do not match last dim {d}")
    if eps <= 0:
        raise ContractError("layer_norm eps must be positive")
    xd = x.data
    mu = xd.mean(axis=-1, keepdims=True)
    xc = xd - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    gd = gamma.data

    def backward(g):
        dxhat = g * gd
        dx = inv * (dxhat - dxhat.mean(axis=-1, keepdims=True) - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True))
        lead = tuple(range(g.ndim - 1))
        return dx, (g * xhat).sum(axis=lead), g.sum(axis=lead)

    return Tensor._result(xhat * gd + beta.data, (x, gamma, beta), backward, "layer_norm")


def softmax(x: Tensor) -> Tensor:
    """Softmax along the last axis."""
    z = x.data - x.data.max(axis=-1, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=-1, keepdims=True)

    def backward(g):
        return (y * (g - (g * y).sum(axis=-1, keepdims=True)),)

    return Tensor._result(y, (x,), backward, "softmax")


def log_softmax(x: Tensor) -> Tensor:
    z = x.data - x.data.max(axis=-1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=-1, keepdims=True))
    y = z - lse
    p = np.exp(y)

    def backward(g):
        return (g - p * g.sum(axis=-1, keepdims=True),)

    return Tensor._result(y, (x,), backward, "log_softmax")


# -- randomness ----------------------------------------------------------------------


def _key_part(name) -> int:
    if isinstance(name, int):
        return name & 0xFFFFFFFF
    return zlib.crc32(str(name).encode("utf-8"))


class Rng:
    """Seeded Philox stream; ``split(name)`` derives an independent child stream
    addressed by name, regardless of how much the parent has been consumed."""

    def __init__(self, seed: int, key: Iterable[int] = ()):
        self.seed = int(seed)
        self.key = tuple(key)
        ss = np.random.SeedSequence(self.seed, spawn_key=self.key)
        self._gen = np.random.Generator(np.random.Philox(ss))

    def split(self, *names) -> "Rng":
        return Rng(self.seed, self.key + tuple(_key_part(n) for n in names))

    @property
    def generator(self) -> np.random.Generator:
        return self._gen

    def choice(self, n: int, k: int) -> np.ndarray:
        """``k`` distinct integers from ``range(n)``, sorted."""
        return np.sort(self._gen.permutation(n)[:k])

    def permutation(self, n: int) -> np.ndarray:
        return self._gen.permutation(n)

    def uniform(self, low=0.0, high=1.0, size=None):
        return self._gen.uniform(low, high, size)

    def normal(self, size=None, std: float = 1.0):
        return self._gen.normal(0.0, std, size)

    def integers(self, low, high=None, size=None):
        return self._gen.integers(low, high, size)

    def beta(self, a: float, b: float, size=None):
        return self._gen.beta(a, b, size)

    def trunc_normal(self, shape, std: float = 0.02, bound: float = 2.0) -> np.ndarray:
        """Normal samples redrawn until they fall within ``bound`` standard deviations."""
        out = self._gen.normal(0.0, 1.0, shape)
        bad = np.abs(out) > bound
        while bad.any():
            out[bad] = self._gen.normal(0.0, 1.0, int(bad.sum()))
            bad = np.abs(out) > bound
        return out * std


# -- verification ------------------------------------------------------------------------


def grad_check(
    f: Callable[[Tensor], Tensor],
    x: Tensor,
    h: float = 1e-5,
    coords: Sequence[int] | None = None,
) -> float:
    """Largest ``|analytic - central difference| / max(1, |analytic|)`` over the
    coordinates of ``x`` (all of them unless ``coords`` names flat indices)."""
    if h <= 0:
        raise ContractError("finite-difference step must be positive")
    was = x.requires_grad
    x.requires_grad = True
    x.grad = None
    try:
        out = f(x)
        if out.size != 1:
            raise ContractError(f"grad_check needs a scalar-valued function, got shape {out.shape}")
        out.backward()
        analytic = np.zeros_like(x.data) if x.grad is None else x.grad.copy()
        flat = x.data.reshape(-1)
        idx = range(flat.size) if coords is None else coords
        worst = 0.0
        with no_grad():
            for i in idx:
                orig = flat[i]
                flat[i] = orig + h
                fp = f(x).item()
                flat[i] = orig - h
                fm = f(x).item()
                flat[i] = orig
                numeric = (fp - fm) / (2 * h)
                a = analytic.reshape(-1)[i]
                worst = max(worst, abs(a - numeric) / max(1.0, abs(a)))
        return worst
    finally:
        x.requires_grad = was
        x.grad = None
