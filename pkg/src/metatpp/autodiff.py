"""Dense-tensor computation with reverse-mode differentiation.

Tensors wrap contiguous numpy arrays (float64 by default; float32 is
accepted for faster training runs).  Every operation registers a reverse
rule; calling ``backward`` on a scalar fills ``grad`` on every reachable
tensor that requires gradients.  The graph is single-use unless
``retain_graph=True`` is passed.
"""

from __future__ import annotations

import contextlib
import math
from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np
from scipy import special as _special

__all__ = [
    "Tensor",
    "Rng",
    "ShapeError",
    "OP_REGISTRY",
    "no_grad",
    "is_grad_enabled",
    "tensor",
    "stop_gradient",
    "add",
    "sub",
    "mul",
    "div",
    "neg",
    "matmul",
    "transpose",
    "reshape",
    "broadcast_to",
    "concat",
    "take_slice",
    "gather",
    "embedding",
    "exp",
    "log",
    "sqrt",
    "erf",
    "softplus",
    "relu",
    "clip_min",
    "tsum",
    "tmean",
    "cumsum",
    "logsumexp",
    "masked_softmax",
    "layer_norm",
    "grad_check",
    "GradCheckReport",
]

MASK_FILL = -1e9  # additive surrogate for -inf in masked softmax


class ShapeError(ValueError):
    """Raised when operand shapes do not conform for an operation."""


_grad_enabled = True


@contextlib.contextmanager
def no_grad():
    """Disable graph recording inside the block (inference mode)."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


def is_grad_enabled() -> bool:
    return _grad_enabled


# Every differentiable op registers its name here so test suites can
# enumerate the full surface and refuse to pass when an op lacks coverage.
OP_REGISTRY: dict[str, str] = {}


def _register(name: str, doc: str = "") -> None:
    OP_REGISTRY[name] = doc


class Tensor:
    """A dense array plus an optional gradient accumulator."""

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "_op", "name")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        arr = np.asarray(data)
        if arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(np.float64)
        self.data = np.ascontiguousarray(arr)
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], tuple] | None = None
        self._op = "leaf"
        self.name = name

    # -- basic introspection -------------------------------------------------
    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def dtype(self):
        return self.data.dtype

    def item(self) -> float:
        return float(self.data.reshape(-1)[0])

    def numpy(self) -> np.ndarray:
        return self.data

    def detach(self) -> "Tensor":
        return Tensor(self.data, requires_grad=False, name=self.name)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, op={self._op}{tag})"

    # -- operator sugar -------------------------------------------------------
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, key):
        return take_slice(self, key)

    # -- reverse pass ----------------------------------------------------------
    def backward(self, retain_graph: bool = False) -> None:
        """Run reverse-mode accumulation from this scalar.

        Fills ``grad`` of every reachable tensor with ``requires_grad`` set.
        The graph is released afterwards unless ``retain_graph`` is given.
        """
        if self.size != 1:
            raise ValueError(f"backward requires a scalar loss, got shape {self.shape}")
        topo: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
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

        grads: dict[int, np.ndarray] = {id(self): np.ones_like(self.data)}
        for node in reversed(topo):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node.requires_grad:
                node.grad = g if node.grad is None else node.grad + g
            if node._backward is None:
                continue
            parent_grads = node._backward(g)
            for parent, pg in zip(node._parents, parent_grads):
                if pg is None or not parent.requires_grad:
                    continue
                acc = grads.get(id(parent))
                grads[id(parent)] = pg if acc is None else acc + pg
            if not retain_graph:
                node._parents = ()
                node._backward = None


def tensor(data, requires_grad: bool = False, name: str | None = None) -> Tensor:
    return Tensor(data, requires_grad=requires_grad, name=name)


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(data: np.ndarray, parents: Sequence[Tensor], backward, op: str) -> Tensor:
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out.name = None
    out._op = op
    needs = _grad_enabled and any(p.requires_grad for p in parents)
    out.requires_grad = needs
    if needs:
        out._parents = tuple(parents)
        out._backward = backward
    else:
        out._parents = ()
        out._backward = None
    return out


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum a broadcast gradient back down to ``shape``."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


def _check_broadcast(op: str, a: np.ndarray, b: np.ndarray) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError as exc:
        raise ShapeError(f"{op}: operand shapes {a.shape} and {b.shape} do not broadcast") from exc


# -- elementwise arithmetic -----------------------------------------------------

_register("add")


def add(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _check_broadcast("add", a.data, b.data)

    def backward(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _make(a.data + b.data, (a, b), backward, "add")


_register("sub")


def sub(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _check_broadcast("sub", a.data, b.data)

    def backward(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return _make(a.data - b.data, (a, b), backward, "sub")


_register("mul")


def mul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _check_broadcast("mul", a.data, b.data)

    def backward(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return _make(a.data * b.data, (a, b), backward, "mul")


_register("div")


def div(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _check_broadcast("div", a.data, b.data)

    def backward(g):
        ga = _unbroadcast(g / b.data, a.shape)
        gb = _unbroadcast(-g * a.data / (b.data * b.data), b.shape)
        return ga, gb

    return _make(a.data / b.data, (a, b), backward, "div")


_register("neg")


def neg(a) -> Tensor:
    a = _as_tensor(a)

    def backward(g):
        return (-g,)

    return _make(-a.data, (a,), backward, "neg")


# -- linear algebra --------------------------------------------------------------

_register("matmul")


def matmul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError(f"matmul: operands must be at least 2-D, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: inner dimensions differ, {a.shape} vs {b.shape}")

    def backward(g):
        ga = _unbroadcast(g @ np.swapaxes(b.data, -1, -2), a.shape)
        gb = _unbroadcast(np.swapaxes(a.data, -1, -2) @ g, b.shape)
        return ga, gb

    return _make(a.data @ b.data, (a, b), backward, "matmul")


_register("transpose")


def transpose(a, axes: Sequence[int] | None = None) -> Tensor:
    a = _as_tensor(a)
    if axes is None:
        axes = tuple(reversed(range(a.ndim)))
    axes = tuple(axes)
    inv = np.argsort(axes)

    def backward(g):
        return (np.ascontiguousarray(g.transpose(inv)),)

    return _make(np.ascontiguousarray(a.data.transpose(axes)), (a,), backward, "transpose")


def swap_last2(a) -> Tensor:
    a = _as_tensor(a)
    axes = list(range(a.ndim))
    axes[-1], axes[-2] = axes[-2], axes[-1]
    return transpose(a, axes)


_register("reshape")


def reshape(a, shape) -> Tensor:
    a = _as_tensor(a)
    shape = tuple(shape)

    def backward(g):
        return (g.reshape(a.shape),)

    return _make(a.data.reshape(shape), (a,), backward, "reshape")


_register("broadcast_to")


def broadcast_to(a, shape) -> Tensor:
    a = _as_tensor(a)
    shape = tuple(shape)

    def backward(g):
        return (_unbroadcast(g, a.shape),)

    return _make(np.ascontiguousarray(np.broadcast_to(a.data, shape)), (a,), backward, "broadcast_to")


_register("concat")


def concat(tensors: Iterable, axis: int = -1) -> Tensor:
    ts = [_as_tensor(t) for t in tensors]
    if not ts:
        raise ShapeError("concat: empty tensor list")
    nd = ts[0].ndim
    ax = axis % nd
    for t in ts[1:]:
        if t.ndim != nd:
            raise ShapeError(f"concat: rank mismatch {ts[0].shape} vs {t.shape}")
        for d in range(nd):
            if d != ax and t.shape[d] != ts[0].shape[d]:
                raise ShapeError(f"concat: shapes {ts[0].shape} and {t.shape} differ off axis {ax}")
    sizes = [t.shape[ax] for t in ts]
    offsets = np.cumsum([0] + sizes)

    def backward(g):
        pieces = []
        for i in range(len(ts)):
            idx = [slice(None)] * nd
            idx[ax] = slice(offsets[i], offsets[i + 1])
            pieces.append(np.ascontiguousarray(g[tuple(idx)]))
        return tuple(pieces)

    return _make(np.concatenate([t.data for t in ts], axis=ax), ts, backward, "concat")


_register("slice")


def take_slice(a, key) -> Tensor:
    """Basic indexing (ints and slices); gradient scatters back into place."""
    a = _as_tensor(a)

    def backward(g):
        out = np.zeros_like(a.data)
        out[key] = g
        return (out,)

    return _make(np.ascontiguousarray(a.data[key]), (a,), backward, "slice")


_register("gather")


def gather(a, indices: np.ndarray, axis: int) -> Tensor:
    """``take_along_axis`` with a scatter-add reverse rule."""
    a = _as_tensor(a)
    idx = np.asarray(indices)
    if idx.ndim != a.ndim:
        raise ShapeError(f"gather: index rank {idx.ndim} must match operand rank {a.ndim}")

    def backward(g):
        out = np.zeros_like(a.data)
        np.put_along_axis(out, idx, 0.0, axis=axis)  # touch pages before add.at
        np.add.at(out, _expand_index(idx, axis, a.data.shape), g)
        return (out,)

    return _make(np.take_along_axis(a.data, idx, axis=axis), (a,), backward, "gather")


def _expand_index(idx: np.ndarray, axis: int, shape: tuple[int, ...]):
    grids = np.ogrid[tuple(slice(n) for n in idx.shape)]
    grids = list(grids)
    grids[axis] = idx
    return tuple(grids)


_register("embedding")


def embedding(weight, ids: np.ndarray) -> Tensor:
    """Row lookup into a ``[C, D]`` table by integer ids."""
    weight = _as_tensor(weight)
    ids = np.asarray(ids)
    if weight.ndim != 2:
        raise ShapeError(f"embedding: weight must be 2-D, got {weight.shape}")
    if ids.min(initial=0) < 0 or ids.max(initial=0) >= weight.shape[0]:
        raise ShapeError(f"embedding: ids outside [0, {weight.shape[0]})")

    def backward(g):
        out = np.zeros_like(weight.data)
        np.add.at(out, ids.reshape(-1), g.reshape(-1, weight.shape[1]))
        return (out,)

    return _make(weight.data[ids], (weight,), backward, "embedding")


# -- elementwise transcendentals --------------------------------------------------

_register("exp")


def exp(a) -> Tensor:
    a = _as_tensor(a)
    out_data = np.exp(a.data)

    def backward(g):
        return (g * out_data,)

    return _make(out_data, (a,), backward, "exp")


_register("log")


def log(a) -> Tensor:
    a = _as_tensor(a)
    if np.any(a.data <= 0):
        raise ValueError("log: operand has non-positive entries")

    def backward(g):
        return (g / a.data,)

    return _make(np.log(a.data), (a,), backward, "log")


_register("sqrt")


def sqrt(a) -> Tensor:
    a = _as_tensor(a)
    if np.any(a.data <= 0):
        raise ValueError("sqrt: operand has non-positive entries")
    out_data = np.sqrt(a.data)

    def backward(g):
        return (g * 0.5 / out_data,)

    return _make(out_data, (a,), backward, "sqrt")


_register("erf")


def erf(a) -> Tensor:
    a = _as_tensor(a)
    coeff = 2.0 / math.sqrt(math.pi)

    def backward(g):
        return (g * coeff * np.exp(-a.data * a.data),)

    return _make(_special.erf(a.data), (a,), backward, "erf")


_register("softplus")


def softplus(a) -> Tensor:
    a = _as_tensor(a)

    def backward(g):
        return (g * _special.expit(a.data),)

    return _make(np.logaddexp(0.0, a.data), (a,), backward, "softplus")


_register("relu")


def relu(a) -> Tensor:
    a = _as_tensor(a)
    keep = a.data > 0

    def backward(g):
        return (g * keep,)

    return _make(np.where(keep, a.data, 0.0), (a,), backward, "relu")


_register("clip_min")


def clip_min(a, floor: float) -> Tensor:
    """max(a, floor); gradient passes only where the operand wins."""
    a = _as_tensor(a)
    keep = a.data > floor

    def backward(g):
        return (g * keep,)

    return _make(np.maximum(a.data, floor), (a,), backward, "clip_min")


# -- reductions --------------------------------------------------------------------

_register("sum")


def tsum(a, axis=None, keepdims: bool = False) -> Tensor:
    a = _as_tensor(a)

    def backward(g):
        if axis is None:
            return (np.broadcast_to(g, a.shape).copy(),)
        if not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape).copy(),)

    return _make(a.data.sum(axis=axis, keepdims=keepdims), (a,), backward, "sum")


_register("mean")


def tmean(a, axis=None, keepdims: bool = False) -> Tensor:
    a = _as_tensor(a)
    if axis is None:
        count = a.size
    else:
        count = a.shape[axis]

    def backward(g):
        if axis is None:
            return (np.broadcast_to(g / count, a.shape).copy(),)
        if not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g / count, a.shape).copy(),)

    return _make(a.data.mean(axis=axis, keepdims=keepdims), (a,), backward, "mean")


_register("cumsum")


def cumsum(a, axis: int) -> Tensor:
    a = _as_tensor(a)

    def backward(g):
        rev = np.flip(g, axis=axis)
        return (np.flip(np.cumsum(rev, axis=axis), axis=axis),)

    return _make(np.cumsum(a.data, axis=axis), (a,), backward, "cumsum")


_register("logsumexp")


def logsumexp(a, axis: int = -1, keepdims: bool = False) -> Tensor:
    a = _as_tensor(a)
    m = a.data.max(axis=axis, keepdims=True)
    e = np.exp(a.data - m)
    s = e.sum(axis=axis, keepdims=True)
    out_data = np.log(s) + m
    soft = e / s

    def backward(g):
        if not keepdims:
            g = np.expand_dims(g, axis)
        return (g * soft,)

    return _make(out_data if keepdims else np.squeeze(out_data, axis=axis), (a,), backward, "logsumexp")


_register("masked_softmax")


def masked_softmax(logits, mask: np.ndarray, axis: int = -1) -> Tensor:
    """Softmax with an additive large-negative fill at masked positions.

    ``mask`` is boolean, True where attention is allowed.  Masked weights
    come out exactly zero; rows with no allowed position come out all-zero.
    """
    a = _as_tensor(logits)
    mask = np.broadcast_to(np.asarray(mask, dtype=bool), a.shape)
    fill = np.asarray(MASK_FILL, dtype=a.dtype)
    shifted = a.data + np.where(mask, a.data.dtype.type(0), fill)
    m = shifted.max(axis=axis, keepdims=True)
    e = np.exp(shifted - m)
    e *= mask
    s = e.sum(axis=axis, keepdims=True)
    s_safe = np.where(s > 0, s, 1.0)
    p = e / s_safe

    def backward(g):
        inner = (g * p).sum(axis=axis, keepdims=True)
        return (p * (g - inner),)

    return _make(p, (a,), backward, "masked_softmax")


_register("layer_norm")


def layer_norm(a, eps: float = 1e-5) -> Tensor:
    """Normalize the last axis to zero mean and unit variance (pre-affine)."""
    a = _as_tensor(a)
    mu = a.data.mean(axis=-1, keepdims=True)
    var = a.data.var(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (a.data - mu) * inv
    d = a.shape[-1]

    def backward(g):
        gm = g.mean(axis=-1, keepdims=True)
        gx = (g * xhat).mean(axis=-1, keepdims=True)
        return (inv * (g - gm - xhat * gx),)

    return _make(xhat, (a,), backward, "layer_norm")


_register("stop_gradient")


def stop_gradient(a) -> Tensor:
    a = _as_tensor(a)
    return _make(a.data, (), None, "stop_gradient")


# -- seeded randomness --------------------------------------------------------------


class Rng:
    """Seeded random stream; identical seeds give identical draw sequences."""

    def __init__(self, seed: int | np.random.SeedSequence):
        if isinstance(seed, np.random.SeedSequence):
            self._ss = seed
            self.seed = int(seed.entropy if not isinstance(seed.entropy, (list, tuple)) else seed.entropy[0])
        else:
            self.seed = int(seed)
            self._ss = np.random.SeedSequence(self.seed)
        self._gen = np.random.Generator(np.random.PCG64(self._ss))

    def normal(self, shape=(), dtype=np.float64) -> np.ndarray:
        return self._gen.standard_normal(size=shape, dtype=dtype)

    def uniform(self, low: float = 0.0, high: float = 1.0, shape=()) -> np.ndarray:
        return self._gen.uniform(low, high, size=shape)

    def integers(self, low: int, high: int, shape=()) -> np.ndarray:
        return self._gen.integers(low, high, size=shape)

    def exponential(self, scale: float = 1.0, shape=()) -> np.ndarray:
        return self._gen.exponential(scale, size=shape)

    def permutation(self, n: int) -> np.ndarray:
        return self._gen.permutation(n)

    def choice(self, n: int, size, replace: bool = True) -> np.ndarray:
        return self._gen.choice(n, size=size, replace=replace)

    def split(self, n: int) -> list["Rng"]:
        """Spawn n independent child streams (deterministic)."""
        return [Rng(child) for child in self._ss.spawn(n)]

    @staticmethod
    def keyed(seed: int, *keys: int) -> "Rng":
        """A stream derived statelessly from (seed, keys); stable across calls."""
        return Rng(np.random.SeedSequence([int(seed)] + [int(k) for k in keys]))


# -- numeric gradient verification ----------------------------------------------------


@dataclass
class GradCheckReport:
    """Outcome of comparing reverse-mode gradients with central differences."""

    max_rel_err: float
    worst: tuple[str, tuple, float, float] | None = None
    nonsmooth: list[tuple[str, tuple]] = field(default_factory=list)

    def ok(self, tol: float) -> bool:
        return self.max_rel_err < tol


def grad_check(
    f: Callable[..., Tensor],
    tensors: Sequence[Tensor],
    h: float = 1e-5,
    denom_floor: float = 1e-4,
) -> GradCheckReport:
    """Compare reverse-mode gradients of ``f(*tensors)`` against central differences.

    ``f`` must return a scalar Tensor.  Entries where the left and right
    one-sided differences disagree are flagged as non-smooth rather than
    silently inflating the error.
    """
    for t in tensors:
        t.zero_grad()
    loss = f(*tensors)
    loss.backward()
    analytic = [np.zeros_like(t.data) if t.grad is None else t.grad.copy() for t in tensors]

    report = GradCheckReport(max_rel_err=0.0)
    for ti, t in enumerate(tensors):
        flat = t.data.reshape(-1)
        for j in range(flat.size):
            orig = flat[j]
            flat[j] = orig + h
            fp = float(f(*tensors).data)
            flat[j] = orig - h
            fm = float(f(*tensors).data)
            flat[j] = orig
            numeric = (fp - fm) / (2.0 * h)
            a = float(analytic[ti].reshape(-1)[j])
            rel = abs(a - numeric) / max(abs(a), abs(numeric), denom_floor)
            idx = np.unravel_index(j, t.data.shape)
            tname = t.name or f"arg{ti}"
            if rel > report.max_rel_err:
                report.max_rel_err = rel
                report.worst = (tname, idx, a, numeric)
            if rel > 10.0 * h:
                f0 = float(f(*tensors).data)
                left = (f0 - fm) / h
                right = (fp - f0) / h
                scale = max(abs(left), abs(right), denom_floor)
                if abs(left - right) / scale > 0.1:
                    report.nonsmooth.append((tname, idx))
    return report
