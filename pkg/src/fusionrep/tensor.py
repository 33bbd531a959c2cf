"""Minimal reverse-mode automatic differentiation over dense float64 arrays.

Every op records its inputs and a backward closure on the output tensor.
``backward`` rebuilds the tape (ops in execution order) from the loss and
replays it in exact reverse order, so gradient accumulation is deterministic.
"""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np

_seq = itertools.count()

GELU_C = math.sqrt(2.0 / math.pi)


class TensorError(ValueError):
    """Base class for errors raised by tensor ops."""


class ShapeError(TensorError):
    def __init__(self, op: str, *shapes):
        self.op = op
        self.shapes = tuple(tuple(s) for s in shapes)
        joined = " vs ".join(str(s) for s in self.shapes)
        super().__init__(f"{op}: shape mismatch {joined}")


class NonFiniteError(TensorError):
    def __init__(self, op: str, where: str = "input"):
        self.op = op
        super().__init__(f"{op}: non-finite {where}")


class DegenerateVectorError(TensorError):
    def __init__(self, op: str, norm: float, eps: float):
        self.op = op
        self.norm = norm
        super().__init__(f"{op}: degenerate vector (norm {norm:.3g} < eps {eps:.3g})")


class Tensor:
    """Dense float64 array with an optional gradient buffer."""

    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward", "_op", "_seq", "name")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        self.data = np.array(data, dtype=np.float64)
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], None] | None = None
        self._op = "leaf"
        self._seq = next(_seq)
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float("nan")

    def numpy(self) -> np.ndarray:
        return self.data

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        tag = f" name={self.name}" if self.name else ""
        return f"Tensor(shape={self.shape}, op={self._op}{tag})"

    # operator sugar
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, float(other))
        return mul(self, other)

    def __rmul__(self, other):
        return self.__mul__(other)

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        return getitem(self, idx)

    @property
    def T(self):
        return transpose(self)

    def backward(self) -> None:
        backward(self)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _check_finite(op: str, *arrays: np.ndarray) -> None:
    for a in arrays:
        if not np.isfinite(a).all():
            raise NonFiniteError(op)


def _make(op: str, data: np.ndarray, parents: Sequence[Tensor], backward_fn) -> Tensor:
    if not np.isfinite(data).all():
        raise NonFiniteError(op, "output")
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out.name = None
    out._op = op
    out._seq = next(_seq)
    out.requires_grad = any(p.requires_grad for p in parents)
    if out.requires_grad:
        out._parents = tuple(parents)
        out._backward = backward_fn
    else:
        out._parents = ()
        out._backward = None
    return out


def _accum(t: Tensor, g: np.ndarray) -> None:
    if not t.requires_grad:
        return
    if g.shape != t.data.shape:
        g = _unbroadcast(g, t.data.shape)
    if t.grad is None:
        t.grad = np.array(g, dtype=np.float64, copy=True)
    else:
        t.grad += g


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


def _broadcast_shape(op: str, a: Tensor, b: Tensor) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(op, a.shape, b.shape) from None


# ---------------------------------------------------------------- elementwise


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape("add", a, b)
    _check_finite("add", a.data, b.data)

    def bw(g):
        _accum(a, g)
        _accum(b, g)

    return _make("add", a.data + b.data, (a, b), bw)


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape("sub", a, b)
    _check_finite("sub", a.data, b.data)

    def bw(g):
        _accum(a, g)
        _accum(b, -g)

    return _make("sub", a.data - b.data, (a, b), bw)


def mul(a, b) -> Tensor:
    """Elementwise (broadcasting) product."""
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape("mul", a, b)
    _check_finite("mul", a.data, b.data)

    def bw(g):
        _accum(a, g * b.data)
        _accum(b, g * a.data)

    return _make("mul", a.data * b.data, (a, b), bw)


def scale(a: Tensor, k: float) -> Tensor:
    _check_finite("scale", a.data)

    def bw(g):
        _accum(a, g * k)

    return _make("scale", a.data * k, (a,), bw)


def exp(a: Tensor) -> Tensor:
    _check_finite("exp", a.data)
    with np.errstate(over="ignore"):
        out_data = np.exp(a.data)

    def bw(g):
        _accum(a, g * out_data)

    return _make("exp", out_data, (a,), bw)


def log1p_exp(a) -> Tensor:
    """Stable softplus: log(1 + e^x), branched as x + log1p(e^-x) for x > 0."""
    a = as_tensor(a)
    _check_finite("log1p_exp", a.data)
    x = a.data
    pos = x > 0
    out_data = np.where(pos, x + np.log1p(np.exp(-np.abs(x))), np.log1p(np.exp(np.minimum(x, 0.0))))
    # d/dx softplus = sigmoid(x), also branched
    ex = np.exp(-np.abs(x))
    sig = np.where(pos, 1.0 / (1.0 + ex), ex / (1.0 + ex))

    def bw(g):
        _accum(a, g * sig)

    return _make("log1p_exp", out_data, (a,), bw)


def gelu(a: Tensor) -> Tensor:
    """GELU, tanh approximation."""
    _check_finite("gelu", a.data)
    x = a.data
    inner = GELU_C * (x + 0.044715 * x**3)
    th = np.tanh(inner)
    out_data = 0.5 * x * (1.0 + th)

    def bw(g):
        d_inner = GELU_C * (1.0 + 3 * 0.044715 * x**2)
        d = 0.5 * (1.0 + th) + 0.5 * x * (1.0 - th**2) * d_inner
        _accum(a, g * d)

    return _make("gelu", out_data, (a,), bw)


# ---------------------------------------------------------------- linear algebra


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError("matmul", a.shape, b.shape)
    try:
        np.broadcast_shapes(a.shape[:-2], b.shape[:-2])
    except ValueError:
        raise ShapeError("matmul", a.shape, b.shape) from None
    _check_finite("matmul", a.data, b.data)

    def bw(g):
        if a.requires_grad:
            _accum(a, g @ np.swapaxes(b.data, -1, -2))
        if b.requires_grad:
            _accum(b, np.swapaxes(a.data, -1, -2) @ g)

    return _make("matmul", a.data @ b.data, (a, b), bw)


def transpose(a: Tensor, axes: Sequence[int] | None = None) -> Tensor:
    """Permute axes; default swaps the last two."""
    if axes is None:
        if a.ndim < 2:
            raise ShapeError("transpose", a.shape)
        axes = list(range(a.ndim))
        axes[-1], axes[-2] = axes[-2], axes[-1]
    axes = tuple(axes)
    if sorted(axes) != list(range(a.ndim)):
        raise ShapeError("transpose", a.shape, axes)
    inv = tuple(np.argsort(axes))

    def bw(g):
        _accum(a, np.transpose(g, inv))

    return _make("transpose", np.transpose(a.data, axes), (a,), bw)


def reshape(a: Tensor, shape: Sequence[int]) -> Tensor:
    try:
        out_data = a.data.reshape(tuple(shape))
    except ValueError:
        raise ShapeError("reshape", a.shape, tuple(shape)) from None

    def bw(g):
        _accum(a, g.reshape(a.shape))

    return _make("reshape", out_data, (a,), bw)


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    if not tensors:
        raise ShapeError("concat")
    ref = tensors[0]
    ax = axis % ref.ndim
    for t in tensors[1:]:
        if t.ndim != ref.ndim or any(
            t.shape[i] != ref.shape[i] for i in range(ref.ndim) if i != ax
        ):
            raise ShapeError("concat", ref.shape, t.shape)
    bounds = np.cumsum([0] + [t.shape[ax] for t in tensors])

    def bw(g):
        for t, lo, hi in zip(tensors, bounds[:-1], bounds[1:]):
            if t.requires_grad:
                sl = [slice(None)] * g.ndim
                sl[ax] = slice(lo, hi)
                _accum(t, g[tuple(sl)])

    return _make("concat", np.concatenate([t.data for t in tensors], axis=ax), tensors, bw)


def getitem(a: Tensor, idx) -> Tensor:
    """Slicing and integer-array gathering (used for embedding lookup)."""
    try:
        out_data = a.data[idx]
    except IndexError:
        raise ShapeError("slice", a.shape, (str(idx),)) from None
    out_data = np.array(out_data, dtype=np.float64)

    def bw(g):
        full = np.zeros_like(a.data)
        np.add.at(full, idx, g)
        _accum(a, full)

    return _make("slice", out_data, (a,), bw)


# ---------------------------------------------------------------- reductions


def sum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:  # noqa: A001
    _check_finite("sum", a.data)
    out_data = np.sum(a.data, axis=axis, keepdims=keepdims)

    def bw(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        _accum(a, np.broadcast_to(g, a.shape))

    return _make("sum", np.asarray(out_data, dtype=np.float64), (a,), bw)


def mean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    _check_finite("mean", a.data)
    out_data = np.mean(a.data, axis=axis, keepdims=keepdims)
    if axis is None:
        count = a.data.size
    else:
        axes = (axis,) if isinstance(axis, int) else tuple(axis)
        count = int(np.prod([a.shape[ax] for ax in axes]))

    def bw(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        _accum(a, np.broadcast_to(g, a.shape) / count)

    return _make("mean", np.asarray(out_data, dtype=np.float64), (a,), bw)


# ---------------------------------------------------------------- normalizations


def softmax(a: Tensor, axis: int = -1, mask: np.ndarray | None = None) -> Tensor:
    """Softmax along ``axis``. ``mask`` (broadcastable bool, True = keep) zeroes
    excluded entries; every slice must keep at least one entry."""
    _check_finite("softmax", a.data)
    x = a.data
    if mask is not None:
        mask = np.broadcast_to(mask, x.shape)
        if not mask.any(axis=axis).all():
            raise TensorError("softmax: fully masked slice")
        x = np.where(mask, x, -np.inf)
    shifted = x - np.max(x, axis=axis, keepdims=True)
    e = np.exp(shifted)
    y = e / np.sum(e, axis=axis, keepdims=True)

    def bw(g):
        _accum(a, y * (g - np.sum(g * y, axis=axis, keepdims=True)))

    return _make("softmax", y, (a,), bw)


def layer_norm(a: Tensor, eps: float = 1e-10) -> Tensor:
    """Normalize the last axis to zero mean and unit variance (no affine)."""
    _check_finite("layer_norm", a.data)
    x = a.data
    mu = x.mean(axis=-1, keepdims=True)
    xc = x - mu
    var = (xc**2).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    y = xc * inv

    def bw(g):
        gm = g.mean(axis=-1, keepdims=True)
        gy = (g * y).mean(axis=-1, keepdims=True)
        _accum(a, inv * (g - gm - y * gy))

    return _make("layer_norm", y, (a,), bw)


def l2_normalize(a: Tensor, axis: int = -1, eps: float = 1e-12) -> Tensor:
    """Scale each slice along ``axis`` to unit Euclidean norm."""
    _check_finite("l2_normalize", a.data)
    norm = np.sqrt(np.sum(a.data**2, axis=axis, keepdims=True))
    if norm.size and norm.min() < eps:
        raise DegenerateVectorError("l2_normalize", float(norm.min()), eps)
    y = a.data / norm

    def bw(g):
        _accum(a, (g - y * np.sum(g * y, axis=axis, keepdims=True)) / norm)

    return _make("l2_normalize", y, (a,), bw)


def funnel_pool(a: Tensor, stride: int) -> Tensor:
    """Mean-pool consecutive groups of ``stride`` tokens along axis -2.

    The final group may be shorter; output length is ceil(N / stride).
    """
    if stride < 1:
        raise TensorError(f"funnel_pool: stride must be >= 1, got {stride}")
    if a.ndim < 2:
        raise ShapeError("funnel_pool", a.shape)
    _check_finite("funnel_pool", a.data)
    if stride == 1:
        return _make("funnel_pool", a.data.copy(), (a,), lambda g: _accum(a, g))
    n = a.shape[-2]
    starts = np.arange(0, n, stride)
    sums = np.add.reduceat(a.data, starts, axis=-2)
    counts = np.minimum(stride, n - starts).astype(np.float64)
    out_data = sums / counts[:, None]
    group = np.repeat(np.arange(len(starts)), stride)[:n]

    def bw(g):
        _accum(a, (g / counts[:, None])[..., group, :])

    return _make("funnel_pool", out_data, (a,), bw)


# ---------------------------------------------------------------- tape / backward


@dataclass
class Tape:
    """Ops reachable from a root, in execution order."""

    ops: list[Tensor] = field(default_factory=list)

    @classmethod
    def from_root(cls, root: Tensor) -> "Tape":
        seen: set[int] = set()
        nodes: list[Tensor] = []
        stack = [root]
        while stack:
            t = stack.pop()
            if id(t) in seen:
                continue
            seen.add(id(t))
            if t._backward is not None:
                nodes.append(t)
                stack.extend(t._parents)
        nodes.sort(key=lambda t: t._seq)
        return cls(nodes)

    def __len__(self) -> int:
        return len(self.ops)


def backward(loss: Tensor) -> None:
    """Accumulate d(loss)/d(leaf) into every requires_grad leaf's ``grad``.

    Interior gradients are held on the op outputs only while the tape is
    replayed and cleared once consumed.
    """
    if loss.data.size != 1:
        raise TensorError(f"backward: loss must be scalar, got shape {loss.shape}")
    tape = Tape.from_root(loss)
    if not len(tape):
        raise TensorError("backward: empty tape, loss does not depend on any trainable tensor")
    loss.grad = np.ones_like(loss.data)
    for node in reversed(tape.ops):
        g, node.grad = node.grad, None
        if g is not None:
            node._backward(g)


def grad_check(
    f: Callable[[], Tensor],
    leaves: Iterable[Tensor],
    h: float = 1e-4,
    max_per_leaf: int | None = None,
    seed: int = 0,
) -> float:
    """Max relative error between analytic and central-difference gradients.

    ``f`` recomputes a scalar from the current leaf values. The error for each
    component is |analytic - numeric| / max(1, |analytic|). With
    ``max_per_leaf`` set, each leaf is probed at that many seeded random
    components instead of all of them.
    """
    rng = np.random.default_rng(seed)
    leaves = list(leaves)
    for leaf in leaves:
        leaf.grad = None
    out = f()
    backward(out)
    analytic = [leaf.grad.copy() if leaf.grad is not None else np.zeros_like(leaf.data) for leaf in leaves]
    worst = 0.0
    for leaf, ga in zip(leaves, analytic):
        flat = leaf.data.reshape(-1)
        gflat = ga.reshape(-1)
        idx = np.arange(flat.size)
        if max_per_leaf is not None and flat.size > max_per_leaf:
            idx = np.sort(rng.choice(flat.size, size=max_per_leaf, replace=False))
        for i in idx:
            orig = flat[i]
            flat[i] = orig + h
            fp = f().item()
            flat[i] = orig - h
            fm = f().item()
            flat[i] = orig
            num = (fp - fm) / (2.0 * h)
            err = abs(gflat[i] - num) / max(1.0, abs(gflat[i]))
            worst = max(worst, err)
    for leaf in leaves:
        leaf.grad = None
    return worst
