"""Reverse-mode differentiation over a small set of image-shaped ops.

Every op returns a :class:`Node` holding its forward value and, for each
parent that needs a gradient, a vector-Jacobian product closure.  Nodes
carry a global creation index; :func:`backward` walks reachable nodes in
decreasing index order, which is a valid reverse topological order
(parents are always created before children) and makes adjoint
accumulation order deterministic.

Only equal-shape elementwise arithmetic is supported.  Python scalars are
accepted on either side of ``+ - * /`` and routed to the scalar ops.

Values are float64.  ``np.longdouble`` inputs are carried through in
extended precision (slower, pure-numpy correlation path); this is used by
the finite-difference oracle, never by the optimisers.
"""
from __future__ import annotations

import hashlib
import itertools
from contextlib import contextmanager
from dataclasses import dataclass
from functools import lru_cache
from typing import Callable, Sequence

import numpy as np
from scipy import ndimage

from .errors import NumericError, ShapeError

_counter = itertools.count()

# branch recorder: while active, every piecewise decision is hashed into it
_branches: list | None = None


def record_branch(mask) -> None:
    """Register a piecewise-branch mask (used to locate kinks)."""
    if _branches is not None:
        m = np.ascontiguousarray(mask, dtype=bool)
        _branches.append(np.packbits(m.ravel()).tobytes())


@contextmanager
def branch_recorder():
    """Collect the branch masks of all ops evaluated inside the block."""
    global _branches
    prev, _branches = _branches, []
    log = _branches
    try:
        yield log
    finally:
        _branches = prev


def branch_signature(parts: list) -> str:
    h = hashlib.sha1()
    for b in parts:
        h.update(b)
    return h.hexdigest()


class Node:
    __slots__ = ("value", "op", "parents", "vjps", "index", "requires_grad")

    def __init__(self, value, op="const", parents=(), vjps=(), requires_grad=False):
        self.value = _as_real(value)
        self.op = op
        self.parents = tuple(parents)
        self.vjps = tuple(vjps)
        self.requires_grad = requires_grad
        self.index = next(_counter)

    @property
    def shape(self):
        return self.value.shape

    def __repr__(self):
        return f"Node(op={self.op!r}, shape={self.shape}, index={self.index})"

    def __add__(self, other):
        return shift(self, other) if _is_scalar(other) else add(self, other)

    def __radd__(self, other):
        return self.__add__(other)

    def __sub__(self, other):
        return shift(self, -other) if _is_scalar(other) else sub(self, other)

    def __rsub__(self, other):
        return shift(scale(self, -1.0), other) if _is_scalar(other) else sub(other, self)

    def __mul__(self, other):
        return scale(self, other) if _is_scalar(other) else mul(self, other)

    def __rmul__(self, other):
        return self.__mul__(other)

    def __truediv__(self, other):
        return scale(self, 1.0 / other) if _is_scalar(other) else div(self, other)

    def __rtruediv__(self, other):
        return div(lift(np.full(self.shape, float(other))), self)

    def __neg__(self):
        return scale(self, -1.0)


def _as_real(x, copy=False) -> np.ndarray:
    a = np.array(x, copy=copy) if copy else np.asarray(x)
    if a.dtype != np.longdouble:
        a = a.astype(np.float64, copy=False)
    return a


def _is_scalar(x) -> bool:
    return isinstance(x, (int, float, np.floating, np.integer))


def variable(x) -> Node:
    return Node(_as_real(x, copy=True), op="var", requires_grad=True)


def constant(x) -> Node:
    return Node(_as_real(x, copy=True), op="const")


def lift(x) -> Node:
    return x if isinstance(x, Node) else constant(x)


def _make(value, op, pairs) -> Node:
    """Build a node from ``(parent, vjp)`` pairs, dropping constant parents."""
    live = [(p, f) for p, f in pairs if p.requires_grad]
    return Node(
        value,
        op=op,
        parents=[p for p, _ in live],
        vjps=[f for _, f in live],
        requires_grad=bool(live),
    )


def _same_shape(a: Node, b: Node, op: str) -> None:
    if a.shape != b.shape:
        raise ShapeError(f"{op}: shape mismatch {a.shape} vs {b.shape}")


# --------------------------------------------------------------------------
# elementwise
# --------------------------------------------------------------------------

def add(a, b) -> Node:
    a, b = lift(a), lift(b)
    _same_shape(a, b, "add")
    return _make(a.value + b.value, "add", [(a, lambda g: g), (b, lambda g: g)])


def sub(a, b) -> Node:
    a, b = lift(a), lift(b)
    _same_shape(a, b, "sub")
    return _make(a.value - b.value, "sub", [(a, lambda g: g), (b, lambda g: -g)])


def mul(a, b) -> Node:
    a, b = lift(a), lift(b)
    _same_shape(a, b, "mul")
    av, bv = a.value, b.value
    return _make(av * bv, "mul", [(a, lambda g: g * bv), (b, lambda g: g * av)])


def div(a, b) -> Node:
    a, b = lift(a), lift(b)
    _same_shape(a, b, "div")
    av, bv = a.value, b.value
    if np.any(bv == 0.0):
        raise NumericError("div: zero denominator (add a guard)")
    out = av / bv
    return _make(out, "div", [(a, lambda g: g / bv), (b, lambda g: -g * out / bv)])


def scale(a, c: float) -> Node:
    a = lift(a)
    c = float(c)
    return _make(a.value * c, "scale", [(a, lambda g: g * c)])


def shift(a, c: float) -> Node:
    a = lift(a)
    return _make(a.value + float(c), "shift", [(a, lambda g: g)])


def log(a) -> Node:
    a = lift(a)
    av = a.value
    if np.any(av <= 0.0):
        raise NumericError("log: non-positive argument (add a guard)")
    return _make(np.log(av), "log", [(a, lambda g: g / av)])


def square(a) -> Node:
    a = lift(a)
    av = a.value
    return _make(av * av, "square", [(a, lambda g: 2.0 * g * av)])


def absolute(a) -> Node:
    a = lift(a)
    s = np.sign(a.value)
    record_branch(s > 0)
    record_branch(s < 0)
    return _make(np.abs(a.value), "abs", [(a, lambda g: g * s)])


def clamp(a, lo: float | None = None, hi: float | None = None) -> Node:
    """Clamp with derivative 1 strictly inside (lo, hi) and 0 elsewhere."""
    a = lift(a)
    av = a.value
    lo_ = -np.inf if lo is None else float(lo)
    hi_ = np.inf if hi is None else float(hi)
    inside = (av > lo_) & (av < hi_)
    record_branch(inside)
    return _make(np.clip(av, lo_, hi_), "clamp", [(a, lambda g: g * inside)])


def power(a, p: float) -> Node:
    """``a**p`` for ``p > 0``; the derivative at 0 is taken as 0 when p < 1."""
    a = lift(a)
    p = float(p)
    if p <= 0:
        raise ValueError("power: exponent must be positive")
    av = a.value
    if not float(p).is_integer() and np.any(av < 0):
        raise NumericError("power: negative base with fractional exponent")
    out = av ** p
    with np.errstate(divide="ignore", invalid="ignore"):
        d = p * av ** (p - 1.0)
    if p < 1:
        record_branch(av > 0)
        d = np.where(av > 0, d, 0.0)
    return _make(out, "power", [(a, lambda g: g * d)])


# --------------------------------------------------------------------------
# spatial
# --------------------------------------------------------------------------

@lru_cache(maxsize=64)
def _factor(kbytes: bytes, shape: tuple[int, int]):
    """Rank-1 factors (col, row) of a kernel, or None if not separable."""
    k = np.frombuffer(kbytes, dtype=np.float64).reshape(shape)
    u, s, vt = np.linalg.svd(k)
    if s[0] == 0 or (len(s) > 1 and s[1] > 1e-13 * s[0]):
        return None
    col = u[:, 0] * np.sqrt(s[0])
    row = vt[0] * np.sqrt(s[0])
    if col.sum() < 0:
        col, row = -col, -row
    return col, row


def _corr1d(x, k, axis):
    n = len(k)
    length = x.shape[axis] - n + 1
    idx = [slice(None)] * x.ndim
    if x.dtype == np.float64:
        out = ndimage.correlate1d(x, k, axis=axis, mode="constant")
        idx[axis] = slice(n // 2, n // 2 + length)
        return out[tuple(idx)]
    out = None
    for t in range(n):
        idx[axis] = slice(t, t + length)
        term = k[t] * x[tuple(idx)]
        out = term if out is None else out + term
    return out


def _corr1d_adjoint(g, k, axis, size):
    # adjoint of a valid correlation = valid correlation of the zero-padded
    # adjoint with the reversed kernel
    n = len(k)
    pad = [(0, 0)] * g.ndim
    pad[axis] = (n - 1, n - 1)
    out = _corr1d(np.pad(g, pad), k[::-1].copy(), axis)
    assert out.shape[axis] == size
    return out


def correlate_valid(x: np.ndarray, kernel: np.ndarray) -> np.ndarray:
    """Plain numpy 'valid' 2-D cross-correlation (no flipping)."""
    kh, kw = kernel.shape
    h, w = x.shape
    if kh > h or kw > w:
        raise ShapeError(f"correlate: kernel {kernel.shape} larger than input {x.shape}")
    factors = _factor(np.ascontiguousarray(kernel).tobytes(), kernel.shape)
    if factors is not None:
        col, row = factors
        return _corr1d(_corr1d(x, col, 0), row, 1)
    oh, ow = h - kh + 1, w - kw + 1
    out = np.zeros((oh, ow), dtype=x.dtype)
    for a in range(kh):
        for b in range(kw):
            out += kernel[a, b] * x[a:a + oh, b:b + ow]
    return out


def _correlate_adjoint(g: np.ndarray, kernel: np.ndarray, in_shape) -> np.ndarray:
    factors = _factor(np.ascontiguousarray(kernel).tobytes(), kernel.shape)
    if factors is not None:
        col, row = factors
        t = _corr1d_adjoint(g, row, 1, in_shape[1])
        return _corr1d_adjoint(t, col, 0, in_shape[0])
    kh, kw = kernel.shape
    oh, ow = g.shape
    out = np.zeros(in_shape, dtype=g.dtype)
    for a in range(kh):
        for b in range(kw):
            out[a:a + oh, b:b + ow] += kernel[a, b] * g
    return out


def correlate(a, kernel) -> Node:
    """'Valid' cross-correlation of a 2-D node with a fixed kernel."""
    a = lift(a)
    k = np.asarray(kernel, dtype=np.float64)
    if a.value.ndim != 2 or k.ndim != 2:
        raise ShapeError("correlate: expects 2-D input and kernel")
    in_shape = a.shape
    out = correlate_valid(a.value, k)
    return _make(out, "correlate", [(a, lambda g: _correlate_adjoint(g, k, in_shape))])


def downsample2(a) -> Node:
    """Keep even-indexed rows and columns."""
    a = lift(a)
    in_shape = a.shape

    def vjp(g):
        out = np.zeros(in_shape)
        out[::2, ::2] = g
        return out

    return _make(a.value[::2, ::2], "downsample2", [(a, vjp)])


def crop(a, rows: slice, cols: slice) -> Node:
    a = lift(a)
    in_shape = a.shape

    def vjp(g):
        out = np.zeros(in_shape, dtype=np.result_type(g, np.float64))
        out[rows, cols] = g
        return out

    return _make(a.value[rows, cols], "crop", [(a, vjp)])


def haar_forward(x: np.ndarray):
    """One-level orthonormal 2-D Haar transform: (LL, LH, HL, HH)."""
    if x.ndim != 2 or x.shape[0] % 2 or x.shape[1] % 2:
        raise ShapeError(f"haar2: need even 2-D dimensions, got {x.shape}")
    a = x[0::2, 0::2]
    b = x[0::2, 1::2]
    c = x[1::2, 0::2]
    d = x[1::2, 1::2]
    ll = (a + b + c + d) * 0.5
    lh = (a + b - c - d) * 0.5
    hl = (a - b + c - d) * 0.5
    hh = (a - b - c + d) * 0.5
    return ll, lh, hl, hh


# sign pattern of (a, b, c, d) for each subband
_HAAR_SIGNS = (
    (1, 1, 1, 1),
    (1, 1, -1, -1),
    (1, -1, 1, -1),
    (1, -1, -1, 1),
)


def haar2(a) -> tuple[Node, Node, Node, Node]:
    a = lift(a)
    bands = haar_forward(a.value)
    in_shape = a.shape
    nodes = []
    for band, (sa, sb, sc, sd) in zip(bands, _HAAR_SIGNS):
        def vjp(g, sa=sa, sb=sb, sc=sc, sd=sd):
            out = np.empty(in_shape)
            out[0::2, 0::2] = 0.5 * sa * g
            out[0::2, 1::2] = 0.5 * sb * g
            out[1::2, 0::2] = 0.5 * sc * g
            out[1::2, 1::2] = 0.5 * sd * g
            return out

        nodes.append(_make(band, "haar2", [(a, vjp)]))
    return tuple(nodes)


# --------------------------------------------------------------------------
# reductions
# --------------------------------------------------------------------------

def sum_(a) -> Node:
    a = lift(a)
    shape = a.shape
    return _make(np.sum(a.value), "sum", [(a, lambda g: np.full(shape, float(g)))])


def mean(a) -> Node:
    a = lift(a)
    shape = a.shape
    n = a.value.size
    return _make(np.mean(a.value), "mean", [(a, lambda g: np.full(shape, float(g) / n))])


# --------------------------------------------------------------------------
# backward pass and checks
# --------------------------------------------------------------------------

def backward(output: Node, wrt: Node) -> np.ndarray:
    """Gradient of the scalar ``output`` with respect to ``wrt``."""
    if output.value.shape != ():
        raise ShapeError(f"backward: output must be scalar, got shape {output.shape}")
    # collect nodes that lie on some path to a grad-requiring leaf
    seen = {}
    stack = [output]
    while stack:
        n = stack.pop()
        if n.index in seen or not n.requires_grad:
            continue
        seen[n.index] = n
        stack.extend(n.parents)
    if wrt.index not in seen:
        raise ValueError("backward: output does not depend on wrt")
    adj = {output.index: np.ones(())}
    for idx in sorted(seen, reverse=True):
        node = seen[idx]
        g = adj.pop(idx, None)
        if idx == wrt.index:
            return np.zeros(node.shape) + (0.0 if g is None else g)
        if g is None:
            continue
        for parent, vjp in zip(node.parents, node.vjps):
            contrib = vjp(g)
            prev = adj.get(parent.index)
            adj[parent.index] = contrib if prev is None else prev + contrib
    raise AssertionError("unreachable")


def value_and_grad(f: Callable[[Node], Node], x) -> tuple[float, np.ndarray]:
    v = variable(x)
    out = f(v)
    return float(out.value), backward(out, v)


@dataclass
class GradientReport:
    analytic: np.ndarray
    numeric: np.ndarray
    max_rel_error: float          # over coordinates without a kink
    indices: np.ndarray           # flat indices that were checked
    rel_errors: np.ndarray | None = None
    kinks: np.ndarray | None = None   # True where x +/- h changes a branch

    @property
    def n_kinks(self) -> int:
        return 0 if self.kinks is None else int(self.kinks.sum())


def _eval_with_branches(f, x):
    with branch_recorder() as parts:
        value = f(constant(x)).value
    return value, branch_signature(parts)


def finite_diff_check(
    f: Callable[[Node], Node],
    x,
    h: float = 1e-3,
    indices: Sequence[int] | None = None,
    relative_step: bool = False,
    extended: bool = False,
) -> GradientReport:
    """Compare the tape gradient of ``f`` against central differences.

    ``f`` is a graph builder: it receives a node and returns a scalar node.
    The numeric side only ever reads forward values.  With ``indices`` only
    those flat coordinates are perturbed; ``relative_step`` scales the step
    by ``max(1, |x_i|)``.  ``extended`` evaluates the perturbed forwards in
    ``np.longdouble`` so the difference quotient is not limited by float64
    rounding of the function value.

    A coordinate whose +h or -h evaluation takes a different piecewise
    branch (clamp, abs, guard masks) than ``x`` itself straddles a kink;
    there the difference quotient is not a derivative estimate, so such
    coordinates are flagged in ``kinks`` and left out of ``max_rel_error``.
    """
    if h <= 0:
        raise ValueError("h must be positive")
    x = np.array(x, dtype=np.float64)
    _, grad = value_and_grad(f, x)
    dtype = np.longdouble if extended else np.float64
    flat = x.ravel().astype(dtype)
    _, base_sig = _eval_with_branches(f, flat.reshape(x.shape))
    idx = np.arange(flat.size) if indices is None else np.asarray(indices, dtype=int)
    numeric = np.empty(len(idx))
    kinks = np.zeros(len(idx), dtype=bool)
    for j, i in enumerate(idx):
        step = dtype(h * max(1.0, abs(float(flat[i]))) if relative_step else h)
        xp = flat.copy()
        xp[i] += step
        xm = flat.copy()
        xm[i] -= step
        fp, sp = _eval_with_branches(f, xp.reshape(x.shape))
        fm, sm = _eval_with_branches(f, xm.reshape(x.shape))
        kinks[j] = sp != base_sig or sm != base_sig
        # the actual perturbation after rounding x_i +/- step
        numeric[j] = float((fp - fm) / (xp[i] - xm[i]))
    analytic = grad.ravel()[idx]
    err = np.abs(analytic - numeric) / np.maximum(np.abs(numeric), 1e-8)
    smooth = err[~kinks]
    worst = float(smooth.max()) if smooth.size else 0.0
    return GradientReport(analytic, numeric, worst, idx, err, kinks)
