"""Tape-based reverse-mode differentiation over a small registry of array primitives.

Graph building is explicit: every differentiable operation is a registered
:class:`Primitive` with a forward function and a vector-Jacobian product.
The module-level helpers (``relu``, ``conv2d``, ...) look up the tape from
their first :class:`Var` argument and record one step on it.

Typical use::

    loss, tape = forward(lambda t: sum_(mul(t.param(w), t.param(w))), [w])
    grads = backward(tape)
"""
from __future__ import annotations

from dataclasses import dataclass, field
from functools import lru_cache
from typing import Callable

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import ShapeMismatchError, UnregisteredPrimitiveError, ZeroVectorError
from .gtensor import bilinear_stencil, resize_matrix, sample_planes


@dataclass
class Parameter:
    """A learnable array with a gradient buffer of identical shape."""

    name: str
    value: np.ndarray
    grad: np.ndarray | None = None

    def __post_init__(self):
        self.value = np.asarray(self.value, dtype=np.float32)
        if self.grad is None:
            self.grad = np.zeros_like(self.value)

    @property
    def shape(self):
        return self.value.shape

    @property
    def size(self) -> int:
        return int(self.value.size)


class Var:
    """A node value on a tape."""

    __slots__ = ("tape", "index", "value", "requires_grad")

    def __init__(self, tape: "Tape", index: int, value: np.ndarray, requires_grad: bool):
        self.tape = tape
        self.index = index
        self.value = value
        self.requires_grad = requires_grad

    @property
    def shape(self):
        return self.value.shape

    def __repr__(self):
        return f"Var(#{self.index}, shape={self.value.shape})"


@dataclass(frozen=True)
class Primitive:
    name: str
    forward: Callable
    vjp: Callable


PRIMITIVES: dict[str, Primitive] = {}


def register(name: str, fwd: Callable, vjp: Callable) -> Primitive:
    prim = Primitive(name, fwd, vjp)
    PRIMITIVES[name] = prim
    return prim


@dataclass
class _Record:
    prim: Primitive
    inputs: list
    output: Var
    ctx: object


class Tape:
    """Ordered record of primitive applications.

    ``record=False`` evaluates values only, for inference. ``corrupt`` names a
    primitive whose adjoint is deliberately scaled during backward; it exists
    as a negative control for the gradient checker.
    """

    def __init__(self, dtype=np.float32, record: bool = True, corrupt: str | None = None):
        self.dtype = np.dtype(dtype)
        self.record = record
        self.corrupt = corrupt
        self.records: list[_Record] = []
        self.params: dict[str, tuple[Parameter, Var]] = {}
        self.output: Var | None = None
        self._count = 0

    def _new(self, value, requires_grad: bool) -> Var:
        var = Var(self, self._count, value, requires_grad)
        self._count += 1
        return var

    def constant(self, value) -> Var:
        return self._new(np.asarray(value, dtype=self.dtype), False)

    def param(self, p: Parameter) -> Var:
        if p.name in self.params:
            known, var = self.params[p.name]
            if known is not p:
                raise ValueError(f"two parameters share the name {p.name!r}")
            return var
        var = self._new(np.asarray(p.value, dtype=self.dtype), self.record)
        self.params[p.name] = (p, var)
        return var

    def apply(self, name: str, *inputs, **attrs) -> Var:
        prim = PRIMITIVES.get(name)
        if prim is None:
            raise UnregisteredPrimitiveError(name)
        ins = [x if isinstance(x, Var) else self.constant(x) for x in inputs]
        for x in ins:
            if x.tape is not self:
                raise ValueError("inputs belong to a different tape")
        value, ctx = prim.forward(*(x.value for x in ins), **attrs)
        needs = self.record and any(x.requires_grad for x in ins)
        out = self._new(value, needs)
        if needs:
            self.records.append(_Record(prim, ins, out, ctx))
        return out


def _tape_of(*args) -> Tape:
    for a in args:
        if isinstance(a, Var):
            return a.tape
    raise TypeError("at least one argument must be a Var")


def forward(closure: Callable[[Tape], Var], params=(), dtype=np.float32, corrupt: str | None = None):
    """Run ``closure`` on a fresh tape; return ``(loss value, tape)``."""
    tape = Tape(dtype=dtype, corrupt=corrupt)
    for p in params:
        tape.param(p)
    loss = closure(tape)
    if not isinstance(loss, Var) or loss.value.size != 1:
        raise ShapeMismatchError("closure must return a scalar Var")
    tape.output = loss
    return float(loss.value.reshape(())), tape


def backward(tape: Tape, output: Var | None = None) -> dict[str, np.ndarray]:
    """Reverse accumulation; fills ``Parameter.grad`` and returns grads by name."""
    out = output if output is not None else tape.output
    if out is None:
        raise ValueError("tape has no output; run forward first")
    adj: dict[int, np.ndarray] = {out.index: np.ones_like(out.value)}
    for rec in reversed(tape.records):
        g = adj.pop(rec.output.index, None)
        if g is None:
            continue
        needs = [x.requires_grad for x in rec.inputs]
        grads = rec.prim.vjp(g, rec.ctx, needs)
        if tape.corrupt == rec.prim.name:
            grads = tuple(None if gi is None else gi * 1.5 for gi in grads)
        for x, gi, need in zip(rec.inputs, grads, needs):
            if not need or gi is None:
                continue
            if x.index in adj:
                adj[x.index] = adj[x.index] + gi
            else:
                adj[x.index] = gi
    result = {}
    for name, (p, var) in tape.params.items():
        g = adj.get(var.index)
        g = np.zeros(p.shape, dtype=p.value.dtype) if g is None else np.asarray(g, dtype=p.value.dtype)
        p.grad = g
        result[name] = g
    return result


# ---------------------------------------------------------------- primitives


def _unbroadcast(g: np.ndarray, shape) -> np.ndarray:
    if g.shape == tuple(shape):
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


def _add_fwd(a, b):
    return a + b, (a.shape, b.shape)


def _add_vjp(g, ctx, needs):
    sa, sb = ctx
    return _unbroadcast(g, sa), _unbroadcast(g, sb)


def _mul_fwd(a, b):
    return a * b, (a, b)


def _mul_vjp(g, ctx, needs):
    a, b = ctx
    return (_unbroadcast(g * b, a.shape) if needs[0] else None,
            _unbroadcast(g * a, b.shape) if needs[1] else None)


def _sum_fwd(a, axis=None, keepdims=False):
    return np.sum(a, axis=axis, keepdims=keepdims), (a.shape, axis, keepdims)


def _sum_vjp(g, ctx, needs):
    shape, axis, keepdims = ctx
    if axis is not None and not keepdims:
        g = np.expand_dims(g, axis)
    return (np.broadcast_to(g, shape).copy(),)


def _matmul_fwd(a, b):
    return a @ b, (a, b)


def _matmul_vjp(g, ctx, needs):
    a, b = ctx
    return (g @ b.T if needs[0] else None, a.T @ g if needs[1] else None)


def _relu_fwd(a):
    mask = a > 0
    return a * mask, mask


def _relu_vjp(g, mask, needs):
    return (g * mask,)


def _exp_fwd(a):
    out = np.exp(a)
    return out, out


def _exp_vjp(g, out, needs):
    return (g * out,)


def _log_fwd(a):
    return np.log(a), a


def _log_vjp(g, a, needs):
    return (g / a,)


def _softmax_fwd(a, axis=-1):
    z = a - a.max(axis=axis, keepdims=True)
    e = np.exp(z)
    s = e / e.sum(axis=axis, keepdims=True)
    return s, (s, axis)


def _softmax_vjp(g, ctx, needs):
    s, axis = ctx
    return (s * (g - np.sum(g * s, axis=axis, keepdims=True)),)


def _log_softmax_fwd(a, axis=-1):
    z = a - a.max(axis=axis, keepdims=True)
    ls = z - np.log(np.exp(z).sum(axis=axis, keepdims=True))
    return ls, (np.exp(ls), axis)


def _log_softmax_vjp(g, ctx, needs):
    s, axis = ctx
    return (g - s * np.sum(g, axis=axis, keepdims=True),)


def _reshape_fwd(a, shape):
    return a.reshape(shape), a.shape


def _reshape_vjp(g, shape, needs):
    return (g.reshape(shape),)


def _transpose_fwd(a):
    return a.T.copy(), None


def _transpose_vjp(g, ctx, needs):
    return (g.T.copy(),)


def _index_fwd(a, key):
    return a[key].copy(), (a.shape, key)


def _index_vjp(g, ctx, needs):
    shape, key = ctx
    out = np.zeros(shape, dtype=g.dtype)
    np.add.at(out, key, g)
    return (out,)


def _concat_fwd(*arrays, axis=0):
    sizes = [a.shape[axis] for a in arrays]
    return np.concatenate(arrays, axis=axis), (sizes, axis)


def _concat_vjp(g, ctx, needs):
    sizes, axis = ctx
    return tuple(np.split(g, np.cumsum(sizes)[:-1], axis=axis))


def _shift_fwd(a, delta, axis):
    return np.roll(a, -int(delta), axis=axis), (int(delta), axis)


def _shift_vjp(g, ctx, needs):
    delta, axis = ctx
    return (np.roll(g, delta, axis=axis),)


def _rot90_fwd(a, q, axes=(-2, -1)):
    return np.rot90(a, q, axes=axes).copy(), (q, axes)


def _rot90_vjp(g, ctx, needs):
    q, axes = ctx
    return (np.rot90(g, -q, axes=axes).copy(),)


def _conv2d_fwd(x, w):
    cin, h, wd = x.shape
    co, ci, k, k2 = w.shape
    if ci != cin or k != k2 or k % 2 == 0:
        raise ShapeMismatchError(f"conv2d input {x.shape} incompatible with kernel {w.shape}")
    p = k // 2
    xp = np.pad(x, ((0, 0), (p, p), (p, p)))
    win = sliding_window_view(xp, (k, k), axis=(1, 2))
    cols = win.transpose(0, 3, 4, 1, 2).reshape(cin * k * k, h * wd)
    out = (w.reshape(co, -1) @ cols).reshape(co, h, wd)
    return out, (cols, w, x.shape)


def _conv2d_vjp(g, ctx, needs):
    cols, w, xshape = ctx
    co, cin, k, _ = w.shape
    _, h, wd = xshape
    gm = g.reshape(co, h * wd)
    gw = (gm @ cols.T).reshape(w.shape) if needs[1] else None
    gx = None
    if needs[0]:
        p = k // 2
        dcols = (w.reshape(co, -1).T @ gm).reshape(cin, k, k, h, wd)
        dxp = np.zeros((cin, h + 2 * p, wd + 2 * p), dtype=g.dtype)
        for i in range(k):
            for j in range(k):
                dxp[:, i:i + h, j:j + wd] += dcols[:, i, j]
        gx = dxp[:, p:p + h, p:p + wd].copy()
    return gx, gw


def _avgpool_fwd(x, size):
    c, h, w = x.shape
    if h % size or w % size:
        raise ShapeMismatchError(f"avgpool size {size} does not divide {h}x{w}")
    out = x.reshape(c, h // size, size, w // size, size).mean(axis=(2, 4))
    return out, size


def _avgpool_vjp(g, size, needs):
    up = np.repeat(np.repeat(g, size, axis=-2), size, axis=-1)
    return (up / (size * size),)


def _resize_fwd(x, out_h, out_w):
    ry = resize_matrix(x.shape[-2], out_h).astype(x.dtype)
    rx = resize_matrix(x.shape[-1], out_w).astype(x.dtype)
    return ry @ x @ rx.T, (ry, rx)


def _resize_vjp(g, ctx, needs):
    ry, rx = ctx
    return (ry.T @ g @ rx,)


def _repeat_fwd(a, repeats, axis=0):
    return np.repeat(a, repeats, axis=axis), (a.shape, repeats, axis)


def _repeat_vjp(g, ctx, needs):
    shape, repeats, axis = ctx
    axis = axis % len(shape)
    split = g.shape[:axis] + (shape[axis], repeats) + g.shape[axis + 1:]
    return (g.reshape(split).sum(axis=axis + 1),)


def _bilinear_fwd(planes, points):
    pts = np.asarray(points, dtype=np.float64)
    out = sample_planes(planes, pts[:, 0], pts[:, 1])
    return out, (planes.shape, pts)


def _bilinear_vjp(g, ctx, needs):
    shape, pts = ctx
    p, h, w = shape
    weights, idx = bilinear_stencil(pts[:, 0], pts[:, 1], h, w)
    acc = np.zeros((h * w, p), dtype=g.dtype)
    for wgt, ind in zip(weights, idx):
        np.add.at(acc, ind, wgt[:, None].astype(g.dtype) * g)
    return (acc.T.reshape(shape),)


def _l2n_fwd(a, axis=-1):
    n = np.sqrt(np.sum(a * a, axis=axis, keepdims=True))
    if np.any(n == 0):
        raise ZeroVectorError("cannot L2-normalize a zero vector")
    out = a / n
    return out, (out, n, axis)


def _l2n_vjp(g, ctx, needs):
    out, n, axis = ctx
    return ((g - out * np.sum(g * out, axis=axis, keepdims=True)) / n,)


@lru_cache(maxsize=None)
def _filter_bank(k: int, order: int) -> np.ndarray:
    # (order, k*k, k*k) linear maps vec(psi) -> vec(rotate_angle(psi, g*360/order))
    from .eqnn import rotation_operator

    return np.stack([rotation_operator(k, g * 360.0 / order) for g in range(order)])


def _expand_lift_fwd(psi, order):
    co, ci, k, _ = psi.shape
    mats = _filter_bank(k, order).astype(psi.dtype)
    flat = psi.reshape(co, ci, k * k)
    out = np.einsum("gpq,ciq->cgip", mats, flat)
    return out.reshape(co * order, ci, k, k), (mats, psi.shape)


def _expand_lift_vjp(g, ctx, needs):
    mats, shape = ctx
    co, ci, k, _ = shape
    order = mats.shape[0]
    gg = g.reshape(co, order, ci, k * k)
    return (np.einsum("gpq,cgip->ciq", mats, gg).reshape(shape),)


def _expand_group_fwd(psi, order):
    co, ci, n, k, _ = psi.shape
    if n != order:
        raise ShapeMismatchError(f"kernel group axis {n} != group order {order}")
    mats = _filter_bank(k, order).astype(psi.dtype)
    flat = psi.reshape(co, ci, n, k * k)
    out = np.empty((co, order, ci, n, k * k), dtype=psi.dtype)
    for g in range(order):
        # input group h reads base slice (h - g) mod N
        rolled = np.roll(flat, g, axis=2)
        out[:, g] = rolled @ mats[g].T
    return out.reshape(co * order, ci * n, k, k), (mats, psi.shape)


def _expand_group_vjp(gout, ctx, needs):
    mats, shape = ctx
    co, ci, n, k, _ = shape
    gg = gout.reshape(co, n, ci, n, k * k)
    acc = np.zeros((co, ci, n, k * k), dtype=gout.dtype)
    for g in range(n):
        acc += np.roll(gg[:, g] @ mats[g], -g, axis=2)
    return (acc.reshape(shape),)


register("add", _add_fwd, _add_vjp)
register("mul", _mul_fwd, _mul_vjp)
register("sum", _sum_fwd, _sum_vjp)
register("matmul", _matmul_fwd, _matmul_vjp)
register("relu", _relu_fwd, _relu_vjp)
register("exp", _exp_fwd, _exp_vjp)
register("log", _log_fwd, _log_vjp)
register("softmax", _softmax_fwd, _softmax_vjp)
register("log_softmax", _log_softmax_fwd, _log_softmax_vjp)
register("reshape", _reshape_fwd, _reshape_vjp)
register("transpose", _transpose_fwd, _transpose_vjp)
register("index", _index_fwd, _index_vjp)
register("concat", _concat_fwd, _concat_vjp)
register("shift", _shift_fwd, _shift_vjp)
register("rot90", _rot90_fwd, _rot90_vjp)
register("conv2d", _conv2d_fwd, _conv2d_vjp)
register("avgpool", _avgpool_fwd, _avgpool_vjp)
register("resize", _resize_fwd, _resize_vjp)
register("repeat", _repeat_fwd, _repeat_vjp)
register("bilinear_sample", _bilinear_fwd, _bilinear_vjp)
register("l2_normalize", _l2n_fwd, _l2n_vjp)
register("expand_lift", _expand_lift_fwd, _expand_lift_vjp)
register("expand_group", _expand_group_fwd, _expand_group_vjp)


def add(a, b):
    return _tape_of(a, b).apply("add", a, b)


def mul(a, b):
    return _tape_of(a, b).apply("mul", a, b)


def sum_(a, axis=None, keepdims=False):
    return a.tape.apply("sum", a, axis=axis, keepdims=keepdims)


def matmul(a, b):
    return _tape_of(a, b).apply("matmul", a, b)


def relu(a):
    return a.tape.apply("relu", a)


def exp(a):
    return a.tape.apply("exp", a)


def log(a):
    return a.tape.apply("log", a)


def softmax(a, axis=-1):
    return a.tape.apply("softmax", a, axis=axis)


def log_softmax(a, axis=-1):
    return a.tape.apply("log_softmax", a, axis=axis)


def reshape(a, shape):
    return a.tape.apply("reshape", a, shape=tuple(shape))


def transpose(a):
    return a.tape.apply("transpose", a)


def index(a, key):
    return a.tape.apply("index", a, key=key)


def concat(arrays, axis=0):
    return _tape_of(*arrays).apply("concat", *arrays, axis=axis)


def shift(a, delta, axis):
    return a.tape.apply("shift", a, delta=delta, axis=axis)


def rot90(a, q, axes=(-2, -1)):
    return a.tape.apply("rot90", a, q=q, axes=axes)


def conv2d(x, w):
    return _tape_of(x, w).apply("conv2d", x, w)


def avgpool(x, size):
    return x.tape.apply("avgpool", x, size=size)


def resize(x, out_h, out_w):
    return x.tape.apply("resize", x, out_h=out_h, out_w=out_w)


def repeat(a, repeats, axis=0):
    return a.tape.apply("repeat", a, repeats=repeats, axis=axis)


def bilinear_sample(planes, points):
    return planes.tape.apply("bilinear_sample", planes, points=np.asarray(points, dtype=np.float64))


def l2_normalize(a, axis=-1):
    return a.tape.apply("l2_normalize", a, axis=axis)


def expand_lift(psi, order):
    return psi.tape.apply("expand_lift", psi, order=order)


def expand_group(psi, order):
    return psi.tape.apply("expand_group", psi, order=order)


# ---------------------------------------------------------------- checking


@dataclass
class GradCheckReport:
    errors: dict[str, float]
    tol: float
    eps: float
    coords_checked: dict[str, int] = field(default_factory=dict)

    @property
    def max_error(self) -> float:
        return max(self.errors.values(), default=0.0)

    @property
    def passed(self) -> bool:
        return self.max_error <= self.tol

    def lines(self) -> list[str]:
        out = [f"{name}: rel err {err:.3e} over {self.coords_checked.get(name, 0)} coords"
               for name, err in self.errors.items()]
        out.append(f"max rel err {self.max_error:.3e} (tol {self.tol:g}) -> {'PASS' if self.passed else 'FAIL'}")
        return out


def check_gradients(loss_fn: Callable[[Tape], Var], params, eps: float = 1e-3, tol: float = 1e-3,
                    max_coords: int | None = None, seed: int = 0, dtype=np.float64,
                    corrupt: str | None = None) -> GradCheckReport:
    """Compare reverse-mode gradients with central differences.

    Runs in ``dtype`` (float64 by default) so that the finite-difference
    truncation error, not float32 rounding, dominates the comparison. With
    ``max_coords`` set, each parameter is probed at that many random entries.
    The per-parameter error is ``max|a - n| / max(max|a|, max|n|)``.
    """
    if eps <= 0:
        raise ValueError("eps must be positive")
    params = list(params)
    saved = [p.value for p in params]
    rng = np.random.default_rng(seed)
    errors, counts = {}, {}
    try:
        for p in params:
            p.value = np.asarray(p.value, dtype=dtype).copy()
        _, tape = forward(loss_fn, params, dtype=dtype, corrupt=corrupt)
        analytic = {k: v.astype(np.float64) for k, v in backward(tape).items()}
        for p in params:
            flat = p.value.reshape(-1)
            coords = np.arange(flat.size)
            if max_coords is not None and flat.size > max_coords:
                coords = rng.choice(flat.size, size=max_coords, replace=False)
            numeric = np.empty(len(coords))
            for n, i in enumerate(coords):
                orig = flat[i]
                flat[i] = orig + eps
                up, _ = forward(loss_fn, params, dtype=dtype)
                flat[i] = orig - eps
                down, _ = forward(loss_fn, params, dtype=dtype)
                flat[i] = orig
                numeric[n] = (up - down) / (2 * eps)
            a = analytic[p.name].reshape(-1)[coords]
            scale = max(np.abs(a).max(initial=0.0), np.abs(numeric).max(initial=0.0), 1e-8)
            errors[p.name] = float(np.abs(a - numeric).max(initial=0.0) / scale)
            counts[p.name] = len(coords)
    finally:
        for p, v in zip(params, saved):
            p.value = v
            p.grad = np.asarray(p.grad, dtype=np.float32)
    return GradCheckReport(errors, tol, eps, counts)
