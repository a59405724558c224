"""Tape-based reverse-mode automatic differentiation over numpy arrays.

A :class:`Tape` records one forward computation as a flat list of nodes in
construction order, which is already a topological order of the (acyclic)
graph.  ``backward`` replays the list in reverse, accumulating adjoints, and
deposits leaf adjoints into the :class:`ParamStore` gradient buffers.  The
tape is cleared afterwards so the training loop can reuse it.

All math helpers in this module are polymorphic: given a :class:`Tensor`
they record tape nodes, given a plain ndarray/float they evaluate eagerly.
Code like the field forward pass is therefore written once and used both
for training (with gradients) and for plain rendering.

Everything is float64.  The Student-t likelihood subtracts log-gamma terms
of similar magnitude, which is hostile to float32.
"""

from __future__ import annotations

import math
from typing import Callable, Iterable

import numpy as np
from scipy.special import expit as _expit

from .config import EXP_CLAMP, SOFTPLUS_LINEAR_ABOVE


class AutodiffError(Exception):
    pass


# ---------------------------------------------------------------------------
# special functions on plain arrays (also used outside the tape)
# ---------------------------------------------------------------------------

# Lanczos approximation, g=7 with 9 coefficients.  Well-conditioned on the
# whole positive axis and dependency-free.
_LANCZOS_G = 7.0
_LANCZOS_COEF = (
    0.99999999999980993,
    676.5203681218851,
    -1259.1392167224028,
    771.32342877765313,
    -176.61502916214059,
    12.507343278686905,
    -0.13857109526572012,
    9.9843695780195716e-6,
    1.5056327351493116e-7,
)
_HALF_LOG_TWO_PI = 0.5 * math.log(2.0 * math.pi)


def lgamma_val(x):
    """log Gamma(x) for x > 0, elementwise."""
    x = np.asarray(x, dtype=np.float64)
    if np.any(x <= 0.0):
        raise AutodiffError("lgamma requires x > 0")
    # Reflection is never needed for x > 0, but the series is written for
    # arguments >= 0.5; shift smaller ones up by one via Gamma(x) = Gamma(x+1)/x.
    small = x < 0.5
    xs = np.where(small, x + 1.0, x)
    acc = np.full_like(xs, _LANCZOS_COEF[0])
    for i in range(1, 9):
        acc = acc + _LANCZOS_COEF[i] / (xs - 1.0 + i)
    t = xs + _LANCZOS_G - 0.5
    out = _HALF_LOG_TWO_PI + (xs - 0.5) * np.log(t) - t + np.log(acc)
    out = np.where(small, out - np.log(np.where(small, x, 1.0)), out)
    return out if out.ndim else float(out)


def digamma_val(x):
    """psi(x) = d/dx log Gamma(x) for x > 0, elementwise.

    Recurrence psi(x) = psi(x+1) - 1/x is applied until the argument is
    >= 6, then the asymptotic series takes over.
    """
    x = np.asarray(x, dtype=np.float64)
    if np.any(x <= 0.0):
        raise AutodiffError("digamma requires x > 0")
    x = x.astype(np.float64, copy=True)
    shift = np.zeros_like(x)
    for _ in range(6):
        low = x < 6.0
        if not np.any(low):
            break
        shift = shift - np.where(low, 1.0 / np.where(low, x, 1.0), 0.0)
        x = np.where(low, x + 1.0, x)
    inv = 1.0 / x
    inv2 = inv * inv
    # Bernoulli-number series through x^-14; at x >= 6 the truncation error
    # is below 1e-12.
    series = (
        np.log(x)
        - 0.5 * inv
        - inv2 * (1.0 / 12.0
                  - inv2 * (1.0 / 120.0
                            - inv2 * (1.0 / 252.0
                                      - inv2 * (1.0 / 240.0
                                                - inv2 * (1.0 / 132.0
                                                          - inv2 * 691.0 / 32760.0)))))
    )
    out = series + shift
    return out if out.ndim else float(out)


def softplus_val(x):
    """ln(1 + e^x), switching to the identity above 30 to avoid overflow."""
    x = np.asarray(x, dtype=np.float64)
    out = np.where(x > SOFTPLUS_LINEAR_ABOVE, x,
                   np.log1p(np.exp(np.minimum(x, SOFTPLUS_LINEAR_ABOVE))))
    return out if out.ndim else float(out)


def sigmoid_val(x):
    """1 / (1 + e^-x), overflow-safe for large |x|."""
    out = _expit(np.asarray(x, dtype=np.float64))
    return out if out.ndim else float(out)


def exp_val(x):
    x = np.asarray(x, dtype=np.float64)
    out = np.exp(np.clip(x, -EXP_CLAMP, EXP_CLAMP))
    return out if out.ndim else float(out)


# ---------------------------------------------------------------------------
# parameter store
# ---------------------------------------------------------------------------


class ParamStore:
    """Named float64 parameter arrays with matching gradient arrays."""

    def __init__(self):
        self.values: dict[str, np.ndarray] = {}
        self.grads: dict[str, np.ndarray] = {}

    def add(self, name: str, value: np.ndarray) -> None:
        if name in self.values:
            raise AutodiffError(f"duplicate parameter {name!r}")
        arr = np.asarray(value, dtype=np.float64)
        if not np.all(np.isfinite(arr)):
            raise AutodiffError(f"non-finite initial value for {name!r}")
        self.values[name] = arr
        self.grads[name] = np.zeros_like(arr)

    def names(self) -> list[str]:
        return list(self.values)

    def zero_grads(self) -> None:
        for g in self.grads.values():
            g.fill(0.0)

    def n_params(self) -> int:
        return sum(v.size for v in self.values.values())

    def copy(self) -> "ParamStore":
        out = ParamStore()
        for name, value in self.values.items():
            out.add(name, value.copy())
        return out

    def __contains__(self, name: str) -> bool:
        return name in self.values

    def __getitem__(self, name: str) -> np.ndarray:
        return self.values[name]


# ---------------------------------------------------------------------------
# tape and tensors
# ---------------------------------------------------------------------------


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum an adjoint back down to the shape of the operand it belongs to."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


class Tensor:
    """One node of the tape: a value plus how to push adjoints to parents."""

    __slots__ = ("value", "tape", "slot", "parents", "vjp", "op", "param_name")

    # Keep numpy from trying elementwise ufuncs on Tensor operands; binary
    # ops then fall through to our reflected operators.
    __array_ufunc__ = None

    def __init__(self, value, tape, parents, vjp, op, param_name=None):
        self.value = value
        self.tape = tape
        self.parents = parents
        self.vjp = vjp
        self.op = op
        self.param_name = param_name
        self.slot = tape._register(self)

    @property
    def shape(self):
        return np.shape(self.value)

    @property
    def size(self):
        return np.size(self.value)

    # -- operator sugar ----------------------------------------------------
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __rmatmul__(self, other):
        return matmul(other, self)

    def __repr__(self):
        return f"Tensor(op={self.op!r}, shape={self.shape})"


class Tape:
    """Recorder for one forward pass."""

    def __init__(self):
        self._nodes: list[Tensor] = []

    def _register(self, node: Tensor) -> int:
        self._nodes.append(node)
        return len(self._nodes) - 1

    def __len__(self):
        return len(self._nodes)

    def leaf(self, value, name: str | None = None) -> Tensor:
        return Tensor(np.asarray(value, dtype=np.float64), self, (), None,
                      "leaf", param_name=name)

    def param(self, store: ParamStore, name: str) -> Tensor:
        return self.leaf(store.values[name], name=name)

    def clear(self) -> None:
        self._nodes.clear()

    def backward(self, root: Tensor, store: ParamStore | None = None,
                 free: bool = True, check_finite: bool = True) -> dict[str, np.ndarray]:
        """Reverse sweep from a scalar root.

        Returns leaf gradients by parameter name; when ``store`` is given
        they are also summed into its gradient buffers.  The tape is freed
        afterwards unless ``free=False``.  ``check_finite=False`` skips the
        per-node NaN scan (the training loop validates the final loss and
        gradients instead, saving a full array pass per node).
        """
        if root.tape is not self:
            raise AutodiffError("root does not belong to this tape")
        if np.size(root.value) != 1:
            raise AutodiffError("backward requires a scalar root")

        adjoints: list = [None] * len(self._nodes)
        adjoints[root.slot] = np.ones_like(np.asarray(root.value, dtype=np.float64))
        grads: dict[str, np.ndarray] = {}

        for slot in range(root.slot, -1, -1):
            adj = adjoints[slot]
            if adj is None:
                continue
            node = self._nodes[slot]
            if node.vjp is not None:
                for parent, contrib in zip(node.parents, node.vjp(adj)):
                    if contrib is None:
                        continue
                    if check_finite and not np.all(np.isfinite(contrib)):
                        raise AutodiffError(
                            f"NaN/inf adjoint produced by op {node.op!r}")
                    p = parent.slot
                    if adjoints[p] is None:
                        adjoints[p] = contrib
                    else:
                        adjoints[p] = adjoints[p] + contrib
            elif node.param_name is not None:
                name = node.param_name
                if name in grads:
                    grads[name] = grads[name] + adj
                else:
                    grads[name] = adj

        if store is not None:
            for name, g in grads.items():
                store.grads[name] += np.reshape(g, store.grads[name].shape)
        if free:
            self.clear()
        return grads


def _is_tensor(x) -> bool:
    return isinstance(x, Tensor)


def _tape_of(*args) -> Tape:
    for a in args:
        if _is_tensor(a):
            return a.tape
    raise AutodiffError("no tensor operand")


def _val(x):
    return x.value if _is_tensor(x) else np.asarray(x, dtype=np.float64)


# ---------------------------------------------------------------------------
# primitive ops (polymorphic: eager on plain arrays, recorded on tensors)
# ---------------------------------------------------------------------------


def add(a, b):
    if not (_is_tensor(a) or _is_tensor(b)):
        return np.add(a, b)
    va, vb = _val(a), _val(b)
    out = va + vb
    tape = _tape_of(a, b)
    if _is_tensor(a) and _is_tensor(b):
        def vjp(g):
            return _unbroadcast(g, va.shape), _unbroadcast(g, vb.shape)
        return Tensor(out, tape, (a, b), vjp, "add")
    t, tv, cv = (a, va, vb) if _is_tensor(a) else (b, vb, va)
    return Tensor(out, tape, (t,), lambda g: (_unbroadcast(g, tv.shape),), "add")


def sub(a, b):
    if not (_is_tensor(a) or _is_tensor(b)):
        return np.subtract(a, b)
    va, vb = _val(a), _val(b)
    out = va - vb
    tape = _tape_of(a, b)
    if _is_tensor(a) and _is_tensor(b):
        def vjp(g):
            return _unbroadcast(g, va.shape), _unbroadcast(-g, vb.shape)
        return Tensor(out, tape, (a, b), vjp, "sub")
    if _is_tensor(a):
        return Tensor(out, tape, (a,), lambda g: (_unbroadcast(g, va.shape),), "sub")
    return Tensor(out, tape, (b,), lambda g: (_unbroadcast(-g, vb.shape),), "sub")


def mul(a, b):
    if not (_is_tensor(a) or _is_tensor(b)):
        return np.multiply(a, b)
    va, vb = _val(a), _val(b)
    out = va * vb
    tape = _tape_of(a, b)
    if _is_tensor(a) and _is_tensor(b):
        def vjp(g):
            return _unbroadcast(g * vb, va.shape), _unbroadcast(g * va, vb.shape)
        return Tensor(out, tape, (a, b), vjp, "mul")
    t, tv, cv = (a, va, vb) if _is_tensor(a) else (b, vb, va)
    return Tensor(out, tape, (t,), lambda g: (_unbroadcast(g * cv, tv.shape),), "mul")


def div(a, b):
    if not (_is_tensor(a) or _is_tensor(b)):
        return np.divide(a, b)
    va, vb = _val(a), _val(b)
    out = va / vb
    tape = _tape_of(a, b)
    if _is_tensor(a) and _is_tensor(b):
        def vjp(g):
            ga = _unbroadcast(g / vb, va.shape)
            gb = _unbroadcast(-g * va / (vb * vb), vb.shape)
            return ga, gb
        return Tensor(out, tape, (a, b), vjp, "div")
    if _is_tensor(a):
        return Tensor(out, tape, (a,), lambda g: (_unbroadcast(g / vb, va.shape),), "div")
    return Tensor(out, tape, (b,),
                  lambda g: (_unbroadcast(-g * va / (vb * vb), vb.shape),), "div")


def matmul(a, b):
    if not (_is_tensor(a) or _is_tensor(b)):
        return np.matmul(a, b)
    va, vb = _val(a), _val(b)
    if va.ndim != 2 or vb.ndim != 2:
        raise AutodiffError("matmul on the tape supports 2-D operands only")
    out = va @ vb
    tape = _tape_of(a, b)
    if _is_tensor(a) and _is_tensor(b):
        def vjp(g):
            return g @ vb.T, va.T @ g
        return Tensor(out, tape, (a, b), vjp, "matmul")
    if _is_tensor(a):
        return Tensor(out, tape, (a,), lambda g: (g @ vb.T,), "matmul")
    return Tensor(out, tape, (b,), lambda g: (va.T @ g,), "matmul")


def _unary(x, f, df, op):
    """Helper: y = f(x) with local derivative df(x, y)."""
    if not _is_tensor(x):
        return f(np.asarray(x, dtype=np.float64))
    v = x.value
    out = f(v)
    return Tensor(out, x.tape, (x,), lambda g: (g * df(v, out),), op)


def exp(x):
    return _unary(x, exp_val, lambda v, y: y, "exp")


def log(x):
    return _unary(x, np.log, lambda v, y: 1.0 / v, "log")


def sqrt(x):
    return _unary(x, np.sqrt, lambda v, y: 0.5 / y, "sqrt")


def square(x):
    return _unary(x, np.square, lambda v, y: 2.0 * v, "square")


def tanh(x):
    return _unary(x, np.tanh, lambda v, y: 1.0 - y * y, "tanh")


def sigmoid(x):
    return _unary(x, sigmoid_val, lambda v, y: y * (1.0 - y), "sigmoid")


def softplus(x):
    if not _is_tensor(x):
        return softplus_val(x)
    v = x.value
    # Reuse exp(x) from the forward pass: d softplus/dx = e/(1+e), so the
    # backward needs no further transcendental evaluation.
    e = np.exp(np.minimum(v, SOFTPLUS_LINEAR_ABOVE))
    out = np.where(v > SOFTPLUS_LINEAR_ABOVE, v, np.log1p(e))
    return Tensor(out, x.tape, (x,), lambda g: (g * (e / (1.0 + e)),), "softplus")


def lgamma(x):
    return _unary(x, lgamma_val, lambda v, y: digamma_val(v), "lgamma")


def absolute(x):
    # Subgradient sign(0) = 0; the regularizer never sits exactly at zero
    # error for random batches.
    return _unary(x, np.abs, lambda v, y: np.sign(v), "abs")


def maximum(x, floor: float):
    """max(x, floor) against a scalar constant; gradient passes where x wins."""
    if not _is_tensor(x):
        return np.maximum(x, floor)
    v = x.value
    out = np.maximum(v, floor)
    return Tensor(out, x.tape, (x,), lambda g: (g * (v > floor),), "maximum")


def asum(x, axis=None, keepdims=False):
    """Sum, mirroring np.sum semantics."""
    if not _is_tensor(x):
        return np.sum(x, axis=axis, keepdims=keepdims)
    v = x.value
    out = np.sum(v, axis=axis, keepdims=keepdims)

    def vjp(g):
        if axis is None:
            return (np.broadcast_to(g, v.shape).copy(),)
        gg = g if keepdims else np.expand_dims(g, axis)
        return (np.broadcast_to(gg, v.shape).copy(),)

    return Tensor(out, x.tape, (x,), vjp, "sum")


def mean(x, axis=None, keepdims=False):
    v = _val(x)
    if axis is None:
        n = v.size
    else:
        n = v.shape[axis]
    return asum(x, axis=axis, keepdims=keepdims) / float(n)


def reshape(x, shape):
    if not _is_tensor(x):
        return np.reshape(x, shape)
    v = x.value
    out = np.reshape(v, shape)
    return Tensor(out, x.tape, (x,), lambda g: (np.reshape(g, v.shape),), "reshape")


def exclusive_cumsum(x, axis: int = -1):
    """y_i = sum_{j<i} x_j along an axis (y_0 = 0)."""
    if not _is_tensor(x):
        return _exclusive_cumsum_val(np.asarray(x, dtype=np.float64), axis)
    v = x.value
    out = _exclusive_cumsum_val(v, axis)

    def vjp(g):
        # dL/dx_i = sum_{j>i} g_j: reversed exclusive cumsum.
        rev = np.flip(g, axis=axis)
        acc = _exclusive_cumsum_val(rev, axis)
        return (np.flip(acc, axis=axis),)

    return Tensor(out, x.tape, (x,), vjp, "exclusive_cumsum")


def _exclusive_cumsum_val(v: np.ndarray, axis: int) -> np.ndarray:
    out = np.zeros_like(v)
    src = [slice(None)] * v.ndim
    dst = [slice(None)] * v.ndim
    src[axis] = slice(None, -1)
    dst[axis] = slice(1, None)
    out[tuple(dst)] = np.cumsum(v[tuple(src)], axis=axis)
    return out


def value(x) -> np.ndarray:
    """Underlying ndarray of a Tensor, or the input coerced to float64."""
    return _val(x)


# ---------------------------------------------------------------------------
# finite-difference gradient checker
# ---------------------------------------------------------------------------


def check_gradients(fn: Callable[[ParamStore], float], store: ParamStore,
                    h: float = 1e-5,
                    names: Iterable[str] | None = None) -> float:
    """Max relative error between analytic and central-difference gradients.

    ``fn`` must build a scalar loss on a fresh tape from ``store`` and run
    backward into it (i.e. calling it populates ``store.grads``).  The
    finite-difference probes only read the returned value.
    """
    if not 1e-7 <= h <= 1e-3:
        raise AutodiffError("step h must lie in [1e-7, 1e-3]")
    store.zero_grads()
    base = float(fn(store))
    if not math.isfinite(base):
        raise AutodiffError("non-finite function value at base point")
    analytic = {name: store.grads[name].copy() for name in store.names()}

    worst = 0.0
    for name in (names if names is not None else store.names()):
        values = store.values[name]
        grad = analytic[name]
        flat = values.reshape(-1)
        gflat = grad.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            store.zero_grads()
            fp = float(fn(store))
            flat[i] = orig - h
            store.zero_grads()
            fm = float(fn(store))
            flat[i] = orig
            if not (math.isfinite(fp) and math.isfinite(fm)):
                raise AutodiffError(f"non-finite probe at {name}[{i}]")
            numeric = (fp - fm) / (2.0 * h)
            err = abs(gflat[i] - numeric) / (abs(gflat[i]) + abs(numeric) + 1e-12)
            worst = max(worst, err)
    # Restore the analytic gradients for the caller.
    store.zero_grads()
    for name in store.names():
        store.grads[name][...] = analytic[name]
    return worst
