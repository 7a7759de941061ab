"""Dense float64 tensors with reverse-mode automatic differentiation.

Define-by-run: every operation records its parents and a gradient
function on the output tensor. ``backward()`` on a scalar walks the
reachable graph in exact reverse construction order (tensors carry a
monotonically increasing creation id), accumulating gradients
additively across fan-out into ``requires_grad`` leaves.

All data is float64. Every forward op validates that its output is
finite; NaN/Inf raises :class:`NumericError`.
"""

from __future__ import annotations

import itertools
from functools import lru_cache
from typing import Callable, Iterable, Sequence

import numpy as np

from .errors import ContractError, NumericError, ShapeError

# Floor applied to log/divide inputs and to gradient denominators so
# saturated softmax outputs cannot produce infinities.
EPS_FLOOR = 1e-12

_ids = itertools.count()
_grad_enabled = True


class no_grad:
    """Context manager that disables graph recording (inference paths)."""

    def __enter__(self):
        global _grad_enabled
        self._prev = _grad_enabled
        _grad_enabled = False
        return self

    def __exit__(self, *exc):
        global _grad_enabled
        _grad_enabled = self._prev
        return False


def _check_finite(arr: np.ndarray, op: str) -> None:
    if not np.isfinite(arr).all():
        raise NumericError(f"non-finite values produced by op '{op}'")


class Tensor:
    """A dense float64 array with optional gradient tracking."""

    __slots__ = ("data", "requires_grad", "grad", "_parents", "_grad_fn", "_id", "_op")

    def __init__(self, data, requires_grad: bool = False):
        arr = np.asarray(data, dtype=np.float64)
        _check_finite(arr, "leaf")
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self._parents: tuple[Tensor, ...] = ()
        self._grad_fn: Callable | None = None
        self._op = "leaf"
        self._id = next(_ids)

    # -- construction helpers -------------------------------------------------

    @staticmethod
    def _from_op(data: np.ndarray, parents: Sequence["Tensor"], grad_fn: Callable, op: str) -> "Tensor":
        _check_finite(data, op)
        t = Tensor.__new__(Tensor)
        t.data = data
        t.grad = None
        t._op = op
        t._id = next(_ids)
        if _grad_enabled and any(p.requires_grad for p in parents):
            t.requires_grad = True
            t._parents = tuple(parents)
            t._grad_fn = grad_fn
        else:
            t.requires_grad = False
            t._parents = ()
            t._grad_fn = None
        return t

    @staticmethod
    def zeros(shape, requires_grad: bool = False) -> "Tensor":
        return Tensor(np.zeros(shape), requires_grad=requires_grad)

    @staticmethod
    def ones(shape, requires_grad: bool = False) -> "Tensor":
        return Tensor(np.ones(shape), requires_grad=requires_grad)

    # -- basic protocol -------------------------------------------------------

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        if self.data.size != 1:
            raise ContractError(f"item() on tensor of shape {self.shape}")
        return float(self.data.reshape(()))

    def detach(self) -> "Tensor":
        return Tensor(self.data.copy())

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, op={self._op}, requires_grad={self.requires_grad})"

    # -- backward -------------------------------------------------------------

    def backward(self) -> None:
        """Populate ``grad`` on every reachable requires_grad leaf.

        The loss must be scalar. Nodes are visited in exact reverse
        construction order, which is a valid reverse-topological order
        because parents are always created before their consumers.
        """
        if self.data.size != 1:
            raise ContractError(f"backward() requires a scalar, got shape {self.shape}")
        if not self.requires_grad:
            return
        # collect reachable grad-tracking nodes
        nodes: dict[int, Tensor] = {}
        stack = [self]
        while stack:
            t = stack.pop()
            if t._id in nodes:
                continue
            nodes[t._id] = t
            for p in t._parents:
                if p.requires_grad and p._id not in nodes:
                    stack.append(p)
        pending: dict[int, np.ndarray] = {self._id: np.ones_like(self.data)}
        for t in sorted(nodes.values(), key=lambda n: n._id, reverse=True):
            g = pending.pop(t._id, None)
            if g is None:
                continue
            if t._grad_fn is None:
                # leaf: accumulate
                t.grad = g.copy() if t.grad is None else t.grad + g
                continue
            for p, pg in zip(t._parents, t._grad_fn(g)):
                if pg is None or not p.requires_grad:
                    continue
                if p._id in pending:
                    pending[p._id] = pending[p._id] + pg
                else:
                    pending[p._id] = pg

    # -- operator sugar -------------------------------------------------------

    def __add__(self, other):
        if isinstance(other, Tensor):
            return add(self, other)
        return add_scalar(self, float(other))

    __radd__ = __add__

    def __mul__(self, other):
        if isinstance(other, Tensor):
            return mul(self, other)
        return scale(self, float(other))

    __rmul__ = __mul__

    def __neg__(self):
        return scale(self, -1.0)

    def __sub__(self, other):
        if isinstance(other, Tensor):
            return add(self, scale(other, -1.0))
        return add_scalar(self, -float(other))

    def __rsub__(self, other):
        return add_scalar(scale(self, -1.0), float(other))

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            return divide(self, other)
        return scale(self, 1.0 / float(other))

    def sum(self):
        return sum_all(self)

    def mean(self):
        return mean_all(self)

    def reshape(self, shape):
        return reshape(self, shape)

    def transpose(self, axes):
        return transpose(self, axes)


# ---------------------------------------------------------------------------
# elementwise ops
# ---------------------------------------------------------------------------


def add(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise ShapeError(f"add: shape mismatch {a.shape} vs {b.shape}")
    return Tensor._from_op(a.data + b.data, (a, b), lambda g: (g, g), "add")


def add_scalar(a: Tensor, c: float) -> Tensor:
    return Tensor._from_op(a.data + c, (a,), lambda g: (g,), "add_scalar")


def scale(a: Tensor, c: float) -> Tensor:
    return Tensor._from_op(a.data * c, (a,), lambda g: (g * c,), "scale")


def mul(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise ShapeError(f"mul: shape mismatch {a.shape} vs {b.shape}")
    ad, bd = a.data, b.data
    return Tensor._from_op(ad * bd, (a, b), lambda g: (g * bd, g * ad), "mul")


def divide(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise a / b with the denominator floored at EPS_FLOOR."""
    if a.shape != b.shape:
        raise ShapeError(f"divide: shape mismatch {a.shape} vs {b.shape}")
    bf = np.maximum(b.data, EPS_FLOOR)
    ad = a.data
    out = ad / bf

    def grad(g):
        ga = g / bf
        gb = np.where(b.data > EPS_FLOOR, -g * ad / (bf * bf), 0.0)
        return ga, gb

    return Tensor._from_op(out, (a, b), grad, "divide")


def relu(a: Tensor) -> Tensor:
    mask = a.data > 0
    return Tensor._from_op(np.where(mask, a.data, 0.0), (a,), lambda g: (g * mask,), "relu")


def sigmoid(a: Tensor) -> Tensor:
    # stable piecewise form
    x = a.data
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return Tensor._from_op(out, (a,), lambda g: (g * out * (1.0 - out),), "sigmoid")


def log(a: Tensor) -> Tensor:
    """Natural log with the input floored at EPS_FLOOR."""
    mask = a.data > EPS_FLOOR
    out = np.log(np.maximum(a.data, EPS_FLOOR))
    ad = a.data
    return Tensor._from_op(out, (a,), lambda g: (np.where(mask, g / np.where(mask, ad, 1.0), 0.0),), "log")


def square(a: Tensor) -> Tensor:
    ad = a.data
    return Tensor._from_op(ad * ad, (a,), lambda g: (2.0 * ad * g,), "square")


def sqrt(a: Tensor) -> Tensor:
    """Exact sqrt value; gradient masked to 0 where the input <= EPS_FLOOR.

    Keeps e.g. a zero distance at exactly 0.0 while guarding the
    1/(2*sqrt) gradient against the origin.
    """
    if (a.data < 0).any():
        raise NumericError("sqrt: negative input")
    out = np.sqrt(a.data)
    mask = a.data > EPS_FLOOR
    return Tensor._from_op(out, (a,), lambda g: (np.where(mask, 0.5 * g / np.where(mask, out, 1.0), 0.0),), "sqrt")


def powf(a: Tensor, p: float) -> Tensor:
    """a**p for non-negative inputs, input floored at EPS_FLOOR.

    Exponent 1 is an exact passthrough. Gradient is masked to 0 at or
    below the floor.
    """
    if p == 1.0:
        return Tensor._from_op(a.data.copy(), (a,), lambda g: (g,), "powf1")
    base = np.maximum(a.data, EPS_FLOOR)
    out = base ** p
    mask = a.data > EPS_FLOOR
    return Tensor._from_op(out, (a,), lambda g: (np.where(mask, p * base ** (p - 1.0) * g, 0.0),), "powf")


# ---------------------------------------------------------------------------
# reductions, softmax
# ---------------------------------------------------------------------------


def sum_all(a: Tensor) -> Tensor:
    shape = a.shape
    return Tensor._from_op(np.asarray(a.data.sum()), (a,), lambda g: (np.broadcast_to(g, shape).copy(),), "sum")


def mean_all(a: Tensor) -> Tensor:
    n = a.data.size
    shape = a.shape
    return Tensor._from_op(
        np.asarray(a.data.mean()), (a,), lambda g: (np.broadcast_to(g / n, shape).copy(),), "mean"
    )


def sum_axis(a: Tensor, axis: int) -> Tensor:
    axis = _valid_axis(a, axis, "sum_axis")
    return Tensor._from_op(
        a.data.sum(axis=axis), (a,), lambda g: (np.repeat(np.expand_dims(g, axis), a.shape[axis], axis=axis),),
        "sum_axis",
    )


def _valid_axis(a: Tensor, axis: int, op: str) -> int:
    nd = a.data.ndim
    if not -nd <= axis < nd:
        raise ShapeError(f"{op}: axis {axis} invalid for shape {a.shape}")
    return axis % nd


def softmax(a: Tensor, axis: int) -> Tensor:
    """Probabilities along ``axis``, computed with max-subtraction."""
    axis = _valid_axis(a, axis, "softmax")
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=axis, keepdims=True)

    def grad(g):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)

    return Tensor._from_op(out, (a,), grad, "softmax")


# ---------------------------------------------------------------------------
# shape / indexing ops
# ---------------------------------------------------------------------------


def reshape(a: Tensor, shape) -> Tensor:
    old = a.shape
    return Tensor._from_op(a.data.reshape(shape), (a,), lambda g: (g.reshape(old),), "reshape")


def transpose(a: Tensor, axes) -> Tensor:
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    return Tensor._from_op(np.ascontiguousarray(a.data.transpose(axes)), (a,), lambda g: (g.transpose(inv),), "transpose")


def concat(tensors: Sequence[Tensor], axis: int = 1) -> Tensor:
    if not tensors:
        raise ContractError("concat: empty input list")
    nd = tensors[0].data.ndim
    for t in tensors[1:]:
        if t.data.ndim != nd:
            raise ShapeError("concat: rank mismatch")
    axis = axis % nd
    sizes = [t.shape[axis] for t in tensors]
    offsets = np.cumsum([0] + sizes)

    def grad(g):
        return tuple(
            np.ascontiguousarray(np.take(g, np.arange(offsets[i], offsets[i + 1]), axis=axis))
            for i in range(len(sizes))
        )

    return Tensor._from_op(np.concatenate([t.data for t in tensors], axis=axis), tuple(tensors), grad, "concat")


def take_rows(a: Tensor, indices) -> Tensor:
    """Gather rows along axis 0; backward scatter-adds (repeat-safe)."""
    idx = np.asarray(indices, dtype=np.intp)
    shape = a.shape

    def grad(g):
        ga = np.zeros(shape)
        np.add.at(ga, idx, g)
        return (ga,)

    return Tensor._from_op(a.data[idx], (a,), grad, "take_rows")


def take_per_row(a: Tensor, cols) -> Tensor:
    """out[i] = a[i, cols[i]] for a 2-D tensor."""
    if a.data.ndim != 2:
        raise ShapeError(f"take_per_row: expected 2-D, got {a.shape}")
    idx = np.asarray(cols, dtype=np.intp)
    if idx.shape[0] != a.shape[0]:
        raise ShapeError("take_per_row: one column index per row required")
    rows = np.arange(a.shape[0])
    shape = a.shape

    def grad(g):
        ga = np.zeros(shape)
        np.add.at(ga, (rows, idx), g)
        return (ga,)

    return Tensor._from_op(a.data[rows, idx], (a,), grad, "take_per_row")


def select_column(a: Tensor, j: int) -> Tensor:
    if a.data.ndim != 2:
        raise ShapeError(f"select_column: expected 2-D, got {a.shape}")
    shape = a.shape

    def grad(g):
        ga = np.zeros(shape)
        ga[:, j] = g
        return (ga,)

    return Tensor._from_op(a.data[:, j].copy(), (a,), grad, "select_column")


# ---------------------------------------------------------------------------
# conv2d
# ---------------------------------------------------------------------------


def conv2d(x: Tensor, w: Tensor, b: Tensor, stride: int = 1, padding: int = 0) -> Tensor:
    """2-D convolution, NCHW input, OIKK weight, per-output-channel bias.

    Output spatial size is floor((H + 2*padding - K)/stride) + 1.
    """
    if x.data.ndim != 4:
        raise ShapeError(f"conv2d: input must be NCHW, got {x.shape}")
    if w.data.ndim != 4 or w.shape[2] != w.shape[3]:
        raise ShapeError(f"conv2d: weight must be OIKK with square kernel, got {w.shape}")
    n, ci, h, wid = x.shape
    co, wi, k, _ = w.shape
    if ci != wi:
        raise ShapeError(f"conv2d: input has {ci} channels but weight expects {wi}")
    if b.shape != (co,):
        raise ShapeError(f"conv2d: bias shape {b.shape} != ({co},)")
    if stride < 1 or padding < 0:
        raise ContractError(f"conv2d: stride={stride}, padding={padding}")
    oh = (h + 2 * padding - k) // stride + 1
    ow = (wid + 2 * padding - k) // stride + 1
    if oh < 1 or ow < 1:
        raise ShapeError(f"conv2d: kernel {k} does not fit input {h}x{wid} with padding {padding}")

    if padding:
        xp = np.pad(x.data, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    else:
        xp = x.data
    win = np.lib.stride_tricks.sliding_window_view(xp, (k, k), axis=(2, 3))
    win = win[:, :, ::stride, ::stride]  # (n, ci, oh, ow, k, k)
    cols = np.ascontiguousarray(win.transpose(0, 2, 3, 1, 4, 5)).reshape(n, oh * ow, ci * k * k)
    wm = w.data.reshape(co, ci * k * k)
    out = cols @ wm.T  # (n, oh*ow, co)
    out = np.ascontiguousarray(out.transpose(0, 2, 1)).reshape(n, co, oh, ow) + b.data[None, :, None, None]

    hp, wp = h + 2 * padding, wid + 2 * padding

    def grad(g):
        gflat = np.ascontiguousarray(g.reshape(n, co, oh * ow).transpose(0, 2, 1))  # (n, oh*ow, co)
        gw = np.einsum("npo,npc->oc", gflat, cols).reshape(co, ci, k, k)
        gb = g.sum(axis=(0, 2, 3))
        gcols = gflat @ wm  # (n, oh*ow, ci*k*k)
        gwin = gcols.reshape(n, oh, ow, ci, k, k).transpose(0, 3, 1, 2, 4, 5)
        gxp = np.zeros((n, ci, hp, wp))
        for ki in range(k):
            for kj in range(k):
                gxp[:, :, ki : ki + stride * (oh - 1) + 1 : stride, kj : kj + stride * (ow - 1) + 1 : stride] += gwin[
                    :, :, :, :, ki, kj
                ]
        if padding:
            gx = gxp[:, :, padding : padding + h, padding : padding + wid]
        else:
            gx = gxp
        return gx, gw, gb

    return Tensor._from_op(out, (x, w, b), grad, "conv2d")


# ---------------------------------------------------------------------------
# bilinear resize
# ---------------------------------------------------------------------------


@lru_cache(maxsize=256)
def interp_matrix(n_in: int, n_out: int) -> np.ndarray:
    """1-D bilinear interpolation matrix (n_out x n_in), align-corners=false."""
    r = np.zeros((n_out, n_in))
    if n_in == 1:
        r[:, 0] = 1.0
        return r
    src = np.clip((np.arange(n_out) + 0.5) * (n_in / n_out) - 0.5, 0.0, n_in - 1.0)
    i0 = np.floor(src).astype(np.intp)
    i1 = np.minimum(i0 + 1, n_in - 1)
    w1 = src - i0
    np.add.at(r, (np.arange(n_out), i0), 1.0 - w1)
    np.add.at(r, (np.arange(n_out), i1), w1)
    return r


def bilinear_resize(x: Tensor, out_h: int, out_w: int) -> Tensor:
    """Separable bilinear resize of an NCHW tensor (align-corners=false)."""
    if x.data.ndim != 4:
        raise ShapeError(f"bilinear_resize: input must be NCHW, got {x.shape}")
    if out_h < 1 or out_w < 1:
        raise ShapeError(f"bilinear_resize: target {out_h}x{out_w} invalid")
    _, _, h, w = x.shape
    rh = interp_matrix(h, out_h)
    rw = interp_matrix(w, out_w)
    out = rh @ x.data @ rw.T

    def grad(g):
        return (rh.T @ g @ rw,)

    return Tensor._from_op(np.ascontiguousarray(out), (x,), grad, "bilinear_resize")


# ---------------------------------------------------------------------------
# composites
# ---------------------------------------------------------------------------


def l2norm_rows(a: Tensor) -> Tensor:
    """Euclidean norm of each row of a 2-D tensor, shape (n,)."""
    return sqrt(sum_axis(square(a), 1))


# ---------------------------------------------------------------------------
# gradient checking
# ---------------------------------------------------------------------------


def grad_check(
    f: Callable[[Tensor], Tensor],
    x: Tensor,
    epsilon: float = 1e-5,
    max_coords: int | None = None,
    rng: np.random.Generator | None = None,
) -> float:
    """Max relative error between analytic and central-difference gradients.

    ``f`` must build a fresh scalar graph from ``x`` on every call.
    Error per coordinate is |analytic - fd| / max(1, |analytic|). When
    ``max_coords`` is given, that many coordinates are sampled without
    replacement (deterministic under ``rng``).
    """
    if not 0 < epsilon <= 1e-2:
        raise ContractError(f"grad_check: epsilon {epsilon} outside (0, 1e-2]")
    if not x.requires_grad:
        raise ContractError("grad_check: x must require grad")
    x.grad = None
    out = f(x)
    if out.data.size != 1:
        raise ContractError("grad_check: f must produce a scalar")
    out.backward()
    analytic = np.zeros_like(x.data) if x.grad is None else x.grad.copy()
    flat = x.data.reshape(-1)
    aflat = analytic.reshape(-1)
    n = flat.size
    if max_coords is not None and max_coords < n:
        rng = rng or np.random.default_rng(0)
        coords = rng.choice(n, size=max_coords, replace=False)
    else:
        coords = np.arange(n)
    worst = 0.0
    for i in coords:
        orig = flat[i]
        flat[i] = orig + epsilon
        fp = f(x).item()
        flat[i] = orig - epsilon
        fm = f(x).item()
        flat[i] = orig
        fd = (fp - fm) / (2.0 * epsilon)
        err = abs(aflat[i] - fd) / max(1.0, abs(aflat[i]))
        worst = max(worst, err)
    return worst


def grad_check_params(
    f: Callable[[], Tensor],
    params: dict[str, Tensor],
    epsilon: float = 1e-5,
    coords_per_param: int = 4,
    rng: np.random.Generator | None = None,
) -> float:
    """grad_check across a named parameter set, sampling coordinates per array."""
    rng = rng or np.random.default_rng(0)
    for p in params.values():
        p.grad = None
    out = f()
    if out.data.size != 1:
        raise ContractError("grad_check_params: f must produce a scalar")
    out.backward()
    analytic = {k: (np.zeros_like(p.data) if p.grad is None else p.grad.copy()) for k, p in params.items()}
    worst = 0.0
    for name, p in params.items():
        flat = p.data.reshape(-1)
        aflat = analytic[name].reshape(-1)
        n = flat.size
        take = min(coords_per_param, n)
        coords = rng.choice(n, size=take, replace=False)
        for i in coords:
            orig = flat[i]
            flat[i] = orig + epsilon
            fp = f().item()
            flat[i] = orig - epsilon
            fm = f().item()
            flat[i] = orig
            fd = (fp - fm) / (2.0 * epsilon)
            err = abs(aflat[i] - fd) / max(1.0, abs(aflat[i]))
            worst = max(worst, err)
    return worst
