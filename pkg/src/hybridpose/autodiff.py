"""Small dense-tensor engine with reverse-mode differentiation.

Every tensor wraps a float64 numpy array. Operations executed on tensors that
require gradients record a node holding the parents and a closure mapping the
output gradient to parent gradients; :func:`backward` replays those nodes in
reverse execution order.

Conventions worth knowing:

* ``max_elementwise`` and ``max_reduce`` send the whole gradient to a single
  winner; ties go to the first operand (or the first index along the reduced
  axes).
* ``sqrt`` has zero derivative at exactly zero and ``clamp`` passes gradient
  on the closed interval ``[lo, hi]``. Both are subgradient choices that keep
  masked norms NaN-free.
* ``conv2d_small`` supports stride 1, odd square kernels and zero "same"
  padding only.
"""

from __future__ import annotations

import contextlib
import itertools
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .errors import ContractViolation, DomainError

_counter = itertools.count()
_grad_enabled = True


@contextlib.contextmanager
def no_grad():
    """Disable graph recording inside the block."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward", "op", "_id")
    __array_priority__ = 100

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.array(data, dtype=np.float64)
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable | None = None
        self.op: str | None = None
        self._id = next(_counter)

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
    def is_leaf(self) -> bool:
        return self._backward is None

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        if self.data.size != 1:
            raise ContractViolation(f"item() needs a single-element tensor, got shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        rg = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{rg}, op={self.op})"

    def __len__(self) -> int:
        return len(self.data)

    # operator sugar
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

    def __getitem__(self, index):
        return getitem(self, index)

    def sum(self, axis=None, keepdims=False):
        return sum_(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes or None)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(data: np.ndarray, parents: Sequence[Tensor], backward: Callable, op: str) -> Tensor:
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out._id = next(_counter)
    out.op = op
    if _grad_enabled and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward
    else:
        out.requires_grad = False
        out._parents = ()
        out._backward = None
    return out


def unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum ``grad`` down to ``shape`` after numpy broadcasting."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


def _broadcast_shapes(a: Tensor, b: Tensor, op: str) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ContractViolation(f"{op}: shapes {a.shape} and {b.shape} do not broadcast") from None


# ----------------------------------------------------------------- elementwise


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shapes(a, b, "add")
    return _make(a.data + b.data, (a, b),
                 lambda g: (unbroadcast(g, a.shape), unbroadcast(g, b.shape)), "add")


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shapes(a, b, "sub")
    return _make(a.data - b.data, (a, b),
                 lambda g: (unbroadcast(g, a.shape), unbroadcast(-g, b.shape)), "sub")


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shapes(a, b, "mul")
    return _make(a.data * b.data, (a, b),
                 lambda g: (unbroadcast(g * b.data, a.shape), unbroadcast(g * a.data, b.shape)),
                 "mul")


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shapes(a, b, "div")
    out = a.data / b.data

    def bw(g):
        return unbroadcast(g / b.data, a.shape), unbroadcast(-g * out / b.data, b.shape)

    return _make(out, (a, b), bw, "div")


def neg(a) -> Tensor:
    a = as_tensor(a)
    return _make(-a.data, (a,), lambda g: (-g,), "neg")


def square(a) -> Tensor:
    a = as_tensor(a)
    return _make(a.data * a.data, (a,), lambda g: (2.0 * a.data * g,), "square")


def sqrt(a) -> Tensor:
    a = as_tensor(a)
    if np.any(a.data < 0):
        raise DomainError("sqrt of negative value")
    out = np.sqrt(a.data)

    def bw(g):
        safe = np.where(out > 0, out, 1.0)
        return (np.where(out > 0, 0.5 * g / safe, 0.0),)

    return _make(out, (a,), bw, "sqrt")


def exp(a) -> Tensor:
    a = as_tensor(a)
    out = np.exp(a.data)
    return _make(out, (a,), lambda g: (g * out,), "exp")


def log(a) -> Tensor:
    a = as_tensor(a)
    if np.any(a.data <= 0):
        raise DomainError("log of non-positive value")
    return _make(np.log(a.data), (a,), lambda g: (g / a.data,), "log")


def _sigmoid_np(x: np.ndarray) -> np.ndarray:
    # split by sign so neither branch overflows
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def sigmoid(a) -> Tensor:
    a = as_tensor(a)
    out = _sigmoid_np(a.data)
    return _make(out, (a,), lambda g: (g * out * (1.0 - out),), "sigmoid")


def clamp(a, lo=None, hi=None) -> Tensor:
    a = as_tensor(a)
    out = np.clip(a.data, lo, hi) if (lo is not None or hi is not None) else a.data.copy()
    mask = np.ones(a.shape, dtype=bool)
    if lo is not None:
        mask &= a.data >= lo
    if hi is not None:
        mask &= a.data <= hi
    return _make(out, (a,), lambda g: (g * mask,), "clamp")


def relu(a) -> Tensor:
    return clamp(a, 0.0, None)


def max_elementwise(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shapes(a, b, "max_elementwise")
    first = a.data >= b.data
    out = np.where(first, a.data, b.data)

    def bw(g):
        return unbroadcast(g * first, a.shape), unbroadcast(g * ~first, b.shape)

    return _make(out, (a, b), bw, "max_elementwise")


maximum = max_elementwise


def minimum(a, b) -> Tensor:
    return neg(max_elementwise(neg(a), neg(b)))


# ------------------------------------------------------------------ reductions


def _norm_axes(axis, ndim: int) -> tuple[int, ...]:
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(sorted(ax % ndim for ax in axis))


def sum_(a, axis=None, keepdims=False) -> Tensor:
    a = as_tensor(a)
    axes = _norm_axes(axis, a.ndim)
    out = a.data.sum(axis=axes, keepdims=keepdims)

    def bw(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g, a.shape).copy(),)

    return _make(np.asarray(out, dtype=np.float64), (a,), bw, "sum")


def mean(a, axis=None, keepdims=False) -> Tensor:
    a = as_tensor(a)
    axes = _norm_axes(axis, a.ndim)
    n = int(np.prod([a.shape[ax] for ax in axes])) if axes else 1
    if n == 0:
        raise ContractViolation("mean over an empty axis")
    out = a.data.mean(axis=axes, keepdims=keepdims)

    def bw(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g / n, a.shape).copy(),)

    return _make(np.asarray(out, dtype=np.float64), (a,), bw, "mean")


def max_reduce(a, axis=None, keepdims=False) -> Tensor:
    """Maximum over ``axis``; the gradient goes to the first maximal entry."""
    a = as_tensor(a)
    axes = _norm_axes(axis, a.ndim)
    keep = [ax for ax in range(a.ndim) if ax not in axes]
    moved = np.transpose(a.data, keep + list(axes))
    kept_shape = moved.shape[: len(keep)]
    flat = moved.reshape(kept_shape + (-1,))
    idx = np.argmax(flat, axis=-1)
    out = np.take_along_axis(flat, idx[..., None], axis=-1)[..., 0]
    if keepdims:
        out_shaped = np.expand_dims(out, axes)
    else:
        out_shaped = out

    def bw(g):
        if keepdims:
            g = np.squeeze(g, axis=axes)
        gflat = np.zeros_like(flat)
        np.put_along_axis(gflat, idx[..., None], g[..., None], axis=-1)
        gmoved = gflat.reshape(moved.shape)
        inv = np.argsort(keep + list(axes))
        return (np.transpose(gmoved, inv),)

    return _make(np.asarray(out_shaped, dtype=np.float64), (a,), bw, "max_reduce")


# ------------------------------------------------------------------ structural


def reshape(a, shape) -> Tensor:
    a = as_tensor(a)
    return _make(a.data.reshape(shape), (a,), lambda g: (g.reshape(a.shape),), "reshape")


def transpose(a, axes=None) -> Tensor:
    a = as_tensor(a)
    axes = tuple(reversed(range(a.ndim))) if axes is None else tuple(axes)
    inv = np.argsort(axes)
    return _make(np.transpose(a.data, axes), (a,), lambda g: (np.transpose(g, inv),),
                 "transpose")


def getitem(a, index) -> Tensor:
    a = as_tensor(a)
    out = a.data[index]

    idx = index if isinstance(index, tuple) else (index,)
    basic = all(i is None or i is Ellipsis or isinstance(i, (int, np.integer, slice)) for i in idx)

    def bw(g):
        full = np.zeros(a.shape)
        if basic:
            full[index] = g
        else:
            np.add.at(full, index, g)
        return (full,)

    return _make(np.array(out, dtype=np.float64), (a,), bw, "getitem")


def stack(tensors: Sequence, axis: int = 0) -> Tensor:
    ts = [as_tensor(t) for t in tensors]
    out = np.stack([t.data for t in ts], axis=axis)

    def bw(g):
        return tuple(np.take(g, i, axis=axis) for i in range(len(ts)))

    return _make(out, ts, bw, "stack")


# --------------------------------------------------------------------- linalg


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ContractViolation(f"matmul: incompatible shapes {a.shape} @ {b.shape}")
    out = a.data @ b.data

    def bw(g):
        ga = g @ np.swapaxes(b.data, -1, -2)
        gb = np.swapaxes(a.data, -1, -2) @ g
        return unbroadcast(ga, a.shape), unbroadcast(gb, b.shape)

    return _make(out, (a, b), bw, "matmul")


def conv2d_small(x, w, b=None) -> Tensor:
    """Stride-1 'same' convolution. ``x`` is (B, C, H, W), ``w`` is (O, C, k, k)."""
    x, w = as_tensor(x), as_tensor(w)
    if x.ndim != 4 or w.ndim != 4:
        raise ContractViolation("conv2d_small expects 4-d input and weight")
    nb, c, h, wd = x.shape
    o, cw, k, k2 = w.shape
    if cw != c or k != k2 or k % 2 == 0:
        raise ContractViolation(f"conv2d_small: bad weight shape {w.shape} for input {x.shape}")
    p = k // 2
    if k == 1:
        xm = x.data.transpose(0, 2, 3, 1).reshape(-1, c)
        wm = w.data.reshape(o, c)
        out = (xm @ wm.T).reshape(nb, h, wd, o).transpose(0, 3, 1, 2)

        def bw_1x1(g):
            gm = g.transpose(0, 2, 3, 1).reshape(-1, o)
            gx = (gm @ wm).reshape(nb, h, wd, c).transpose(0, 3, 1, 2)
            gw = (gm.T @ xm).reshape(w.shape)
            return gx, gw

        res = _make(np.ascontiguousarray(out), (x, w), bw_1x1, "conv2d_small")
    else:
        xp = np.pad(x.data, ((0, 0), (0, 0), (p, p), (p, p)))
        win = np.lib.stride_tricks.sliding_window_view(xp, (k, k), axis=(2, 3))
        cols = win.transpose(0, 2, 3, 1, 4, 5).reshape(nb * h * wd, c * k * k)
        wm = w.data.reshape(o, c * k * k)
        out = (cols @ wm.T).reshape(nb, h, wd, o).transpose(0, 3, 1, 2)

        def bw_kxk(g):
            gm = g.transpose(0, 2, 3, 1).reshape(-1, o)
            gw = (gm.T @ cols).reshape(w.shape)
            gcols = (gm @ wm).reshape(nb, h, wd, c, k, k)
            gxp = np.zeros_like(xp)
            for di in range(k):
                for dj in range(k):
                    gxp[:, :, di:di + h, dj:dj + wd] += gcols[:, :, :, :, di, dj].transpose(0, 3, 1, 2)
            return gxp[:, :, p:p + h, p:p + wd], gw

        res = _make(np.ascontiguousarray(out), (x, w), bw_kxk, "conv2d_small")
    if b is not None:
        res = add(res, reshape(as_tensor(b), (1, -1, 1, 1)))
    return res


# ----------------------------------------------------------------- dispatcher

OPS: dict[str, Callable] = {
    "add": add,
    "sub": sub,
    "mul": mul,
    "div": div,
    "neg": neg,
    "square": square,
    "sqrt": sqrt,
    "exp": exp,
    "sigmoid": sigmoid,
    "sum": sum_,
    "mean": mean,
    "max_reduce": max_reduce,
    "max_elementwise": max_elementwise,
    "matmul": matmul,
    "conv2d_small": conv2d_small,
    "clamp": clamp,
    "log": log,
    # shape plumbing, no arithmetic
    "reshape": reshape,
    "transpose": transpose,
    "getitem": getitem,
    "stack": stack,
}


def forward_op(name: str, *inputs, **attrs) -> Tensor:
    """Run a registered op by name."""
    try:
        fn = OPS[name]
    except KeyError:
        raise ContractViolation(f"unknown op {name!r}") from None
    return fn(*inputs, **attrs)


# ------------------------------------------------------------------- backward


def _topo_order(root: Tensor) -> list[Tensor]:
    seen: set[int] = set()
    nodes: list[Tensor] = []
    stack_ = [root]
    while stack_:
        t = stack_.pop()
        if id(t) in seen:
            continue
        seen.add(id(t))
        nodes.append(t)
        stack_.extend(p for p in t._parents if p.requires_grad)
    # ids grow with execution, so descending id is a reverse topological order
    nodes.sort(key=lambda t: t._id, reverse=True)
    return nodes


def backward(root: Tensor) -> None:
    """Accumulate d(root)/d(leaf) into ``leaf.grad`` for every reachable leaf."""
    if root.size != 1:
        raise ContractViolation(f"backward needs a scalar root, got shape {root.shape}")
    if not root.requires_grad:
        return
    grads: dict[int, np.ndarray] = {id(root): np.ones(root.shape)}
    for node in _topo_order(root):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node.is_leaf:
            node.grad = g.copy() if node.grad is None else node.grad + g
            continue
        for parent, pg in zip(node._parents, node._backward(g)):
            if not parent.requires_grad:
                continue
            key = id(parent)
            if key in grads:
                grads[key] = grads[key] + pg
            else:
                grads[key] = np.asarray(pg, dtype=np.float64)


# ------------------------------------------------------------------ gradcheck


@dataclass
class GradcheckReport:
    analytic: np.ndarray
    numeric: np.ndarray
    rel_error: np.ndarray
    tol: float
    failures: list[tuple[tuple[int, ...], str]] = field(default_factory=list)

    @property
    def max_rel_error(self) -> float:
        return float(np.max(self.rel_error)) if self.rel_error.size else 0.0

    @property
    def passed(self) -> bool:
        return not self.failures and self.max_rel_error < self.tol


def relative_error(a: np.ndarray, n: np.ndarray, floor: float = 1e-6) -> np.ndarray:
    """|a - n| / max(|a|, |n|, floor); the floor keeps near-zero gradients meaningful."""
    return np.abs(a - n) / np.maximum(np.maximum(np.abs(a), np.abs(n)), floor)


def gradcheck(f: Callable[[Tensor], Tensor], point, step: float = 1e-5, tol: float = 1e-4,
              floor: float = 1e-6) -> GradcheckReport:
    """Compare the analytic gradient of scalar ``f`` at ``point`` with central differences."""
    if not step > 0:
        raise ContractViolation("gradcheck step must be positive")
    x0 = np.array(as_tensor(point).data, dtype=np.float64)
    x = Tensor(x0.copy(), requires_grad=True)
    y = f(x)
    if y.size != 1:
        raise ContractViolation("gradcheck needs a scalar-valued function")
    backward(y)
    analytic = np.zeros_like(x0) if x.grad is None else x.grad.copy()
    numeric = np.zeros_like(x0)
    failures = []
    with no_grad():
        for idx in np.ndindex(x0.shape):
            xp = x0.copy()
            xp[idx] += step
            fp = f(Tensor(xp)).item()
            xp[idx] -= 2 * step
            fm = f(Tensor(xp)).item()
            if not (np.isfinite(fp) and np.isfinite(fm)):
                failures.append((idx, "non-finite value at perturbed point"))
                numeric[idx] = np.nan
                continue
            numeric[idx] = (fp - fm) / (2 * step)
    rel = relative_error(analytic, np.nan_to_num(numeric, nan=np.inf), floor)
    return GradcheckReport(analytic, numeric, rel, tol, failures)


def gradcheck_directional(f: Callable[[], Tensor], params: Sequence[Tensor], n_dirs: int = 8,
                          step: float = 1e-5, tol: float = 1e-4, floor: float = 1e-6,
                          rng: np.random.Generator | None = None) -> GradcheckReport:
    """Check directional derivatives of ``f()`` along random unit directions in parameter space.

    ``f`` reads the current values of ``params``; their data is perturbed in
    place and restored afterwards.
    """
    if not step > 0:
        raise ContractViolation("gradcheck step must be positive")
    rng = np.random.default_rng(0) if rng is None else rng
    for p in params:
        p.grad = None
    backward(f())
    grads = [np.zeros(p.shape) if p.grad is None else p.grad.copy() for p in params]
    originals = [p.data.copy() for p in params]
    analytic = np.zeros(n_dirs)
    numeric = np.zeros(n_dirs)
    failures = []
    try:
        with no_grad():
            for d in range(n_dirs):
                dirs = [rng.standard_normal(p.shape) for p in params]
                norm = np.sqrt(sum(float((v * v).sum()) for v in dirs))
                dirs = [v / norm for v in dirs]
                analytic[d] = sum(float((g * v).sum()) for g, v in zip(grads, dirs))
                vals = []
                for sign in (1.0, -1.0):
                    for p, o, v in zip(params, originals, dirs):
                        p.data = o + sign * step * v
                    vals.append(f().item())
                if not all(np.isfinite(vals)):
                    failures.append(((d,), "non-finite value at perturbed point"))
                numeric[d] = (vals[0] - vals[1]) / (2 * step)
    finally:
        for p, o in zip(params, originals):
            p.data = o
    rel = relative_error(analytic, numeric, floor)
    return GradcheckReport(analytic, numeric, rel, tol, failures)
