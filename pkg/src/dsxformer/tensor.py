"""Dense tensors with reverse-mode automatic differentiation.

Every tensor wraps a row-major numpy array.  Operations on tensors that
require gradients record themselves on an implicit tape: each result keeps
references to its inputs, a backward rule and a global sequence number.
``Tensor.backward`` replays the recorded ops in exact reverse execution
order (descending sequence number), accumulates gradients into leaves and
then frees the graph.

Broadcasting follows numpy.  Gradients flowing into a broadcast operand are
summed back down to its shape.
"""

from __future__ import annotations

import contextlib
import itertools
import math
from dataclasses import dataclass

import numpy as np
from scipy.special import ndtr

from .errors import ConfigError, DimensionError, NumericError

_SEQ = itertools.count()
_GRAD_ENABLED = True


@contextlib.contextmanager
def no_grad():
    """Disable tape recording inside the block (evaluation, optimizer steps)."""
    global _GRAD_ENABLED
    prev = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


def _as_array(value, dtype=None):
    arr = np.asarray(value)
    if dtype is not None:
        return arr.astype(dtype, copy=False)
    if not np.issubdtype(arr.dtype, np.floating):
        arr = arr.astype(np.float64)
    return arr


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "op", "_parents", "_backward", "_seq")

    def __init__(self, data, requires_grad=False, dtype=None):
        self.data = _as_array(data, dtype)
        self.requires_grad = bool(requires_grad)
        self.grad = np.zeros_like(self.data) if requires_grad else None
        self.op = "leaf"
        self._parents = ()
        self._backward = None
        self._seq = next(_SEQ)

    # -- basic protocol -------------------------------------------------
    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self):
        return self.data.size

    def numpy(self):
        return self.data

    def item(self):
        return self.data.item()

    def detach(self):
        return Tensor(self.data)

    def zero_grad(self):
        if self.requires_grad:
            self.grad = np.zeros_like(self.data)

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}, op={self.op}{flag})"

    def __len__(self):
        return len(self.data)

    # -- backward -------------------------------------------------------
    def backward(self, grad=None):
        """Propagate d(self)/d(leaf) into every reachable leaf's ``grad``."""
        if grad is None:
            if self.data.size != 1:
                raise DimensionError(
                    f"backward() without a seed gradient needs a scalar, got shape {self.shape}"
                )
            grad = np.ones_like(self.data)
        grad = np.asarray(grad, dtype=self.dtype)
        if grad.shape != self.shape:
            raise DimensionError(f"seed gradient shape {grad.shape} != tensor shape {self.shape}")

        tape = build_tape(self)
        grads = {id(self): grad}
        for node in reversed(tape):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node._backward is None:
                node.grad = g.copy() if node.grad is None else node.grad + g
                continue
            parent_grads = node._backward(g)
            for parent, pg in zip(node._parents, parent_grads):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                if key in grads:
                    grads[key] = grads[key] + pg
                else:
                    grads[key] = pg
        for node in tape:
            if node._backward is not None:
                node._parents = ()
                node._backward = None

    # -- operator sugar -------------------------------------------------
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

    def __pow__(self, exponent):
        return power(self, exponent)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return getitem(self, index)

    @property
    def T(self):
        return swapaxes(self, -1, -2)

    def sum(self, axis=None, keepdims=False):
        return sum_(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)

    def max(self, axis=None, keepdims=False):
        return max_(self, axis, keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes or None)


def build_tape(root):
    """Ops reachable from ``root`` that need gradients, in execution order."""
    seen = set()
    nodes = []
    stack = [root]
    while stack:
        t = stack.pop()
        if id(t) in seen or not t.requires_grad:
            continue
        seen.add(id(t))
        nodes.append(t)
        stack.extend(t._parents)
    nodes.sort(key=lambda t: t._seq)
    return nodes


def tensor(data, requires_grad=False, dtype=None):
    return Tensor(data, requires_grad=requires_grad, dtype=dtype)


def _lift(value, like=None):
    if isinstance(value, Tensor):
        return value
    dtype = like.dtype if like is not None else None
    return Tensor(_as_array(value, dtype))


def _check_finite(arr, op):
    if not np.all(np.isfinite(arr)):
        raise NumericError(f"non-finite values produced by {op}")


def _result(data, parents, backward, op):
    _check_finite(data, op)
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out.op = op
    out._seq = next(_SEQ)
    needs = _GRAD_ENABLED and any(p.requires_grad for p in parents)
    out.requires_grad = needs
    if needs:
        out._parents = tuple(parents)
        out._backward = backward
    else:
        out._parents = ()
        out._backward = None
    return out


def unbroadcast(grad, shape):
    """Sum ``grad`` down to ``shape`` (reverse of numpy broadcasting)."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


# ---------------------------------------------------------------------------
# elementwise arithmetic
# ---------------------------------------------------------------------------

def add(a, b):
    a = _lift(a, b if isinstance(b, Tensor) else None)
    b = _lift(b, a)

    def backward(g):
        return unbroadcast(g, a.shape), unbroadcast(g, b.shape)

    return _result(a.data + b.data, (a, b), backward, "add")


def sub(a, b):
    a = _lift(a, b if isinstance(b, Tensor) else None)
    b = _lift(b, a)

    def backward(g):
        return unbroadcast(g, a.shape), unbroadcast(-g, b.shape)

    return _result(a.data - b.data, (a, b), backward, "sub")


def mul(a, b):
    a = _lift(a, b if isinstance(b, Tensor) else None)
    b = _lift(b, a)

    def backward(g):
        ga = unbroadcast(g * b.data, a.shape) if a.requires_grad else None
        gb = unbroadcast(g * a.data, b.shape) if b.requires_grad else None
        return ga, gb

    return _result(a.data * b.data, (a, b), backward, "mul")


def div(a, b):
    a = _lift(a, b if isinstance(b, Tensor) else None)
    b = _lift(b, a)
    if np.any(b.data == 0):
        raise NumericError("division by zero")

    def backward(g):
        ga = unbroadcast(g / b.data, a.shape) if a.requires_grad else None
        gb = unbroadcast(-g * a.data / (b.data * b.data), b.shape) if b.requires_grad else None
        return ga, gb

    return _result(a.data / b.data, (a, b), backward, "div")


def neg(a):
    return _result(-a.data, (a,), lambda g: (-g,), "neg")


def power(a, exponent):
    if isinstance(exponent, Tensor):
        raise ConfigError("only scalar exponents are supported")
    p = float(exponent)
    out = a.data ** p

    def backward(g):
        return (g * p * a.data ** (p - 1),)

    return _result(out, (a,), backward, "pow")


def absolute(a):
    sign = np.sign(a.data)
    return _result(np.abs(a.data), (a,), lambda g: (g * sign,), "abs")


def exp(a):
    with np.errstate(over="ignore"):  # overflow is reported by the finite check
        out = np.exp(a.data)
    return _result(out, (a,), lambda g: (g * out,), "exp")


def log(a):
    if np.any(a.data <= 0):
        raise NumericError("log of non-positive value")
    return _result(np.log(a.data), (a,), lambda g: (g / a.data,), "log")


def sqrt(a):
    if np.any(a.data < 0):
        raise NumericError("sqrt of negative value")
    out = np.sqrt(a.data)
    return _result(out, (a,), lambda g: (g * 0.5 / out,), "sqrt")


def tanh(a):
    out = np.tanh(a.data)
    return _result(out, (a,), lambda g: (g * (1.0 - out * out),), "tanh")


# ---------------------------------------------------------------------------
# activations
# ---------------------------------------------------------------------------

def relu(a):
    mask = a.data > 0
    return _result(a.data * mask, (a,), lambda g: (g * mask,), "relu")


def sigmoid(a):
    x = a.data
    # split by sign so exp never overflows
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return _result(out, (a,), lambda g: (g * out * (1.0 - out),), "sigmoid")


_SQRT_2_OVER_PI = math.sqrt(2.0 / math.pi)
_INV_SQRT_2PI = 1.0 / math.sqrt(2.0 * math.pi)


def gelu(a, approximate=False):
    """GELU.  Exact form ``x * Phi(x)``; ``approximate=True`` uses the tanh fit."""
    x = a.data
    if approximate:
        inner = _SQRT_2_OVER_PI * (x + 0.044715 * x ** 3)
        t = np.tanh(inner)
        out = 0.5 * x * (1.0 + t)

        def backward(g):
            dinner = _SQRT_2_OVER_PI * (1.0 + 3 * 0.044715 * x * x)
            return (g * (0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * dinner),)

        return _result(out, (a,), backward, "gelu_tanh")

    cdf = ndtr(x).astype(x.dtype, copy=False)
    out = x * cdf

    def backward(g):
        pdf = _INV_SQRT_2PI * np.exp(-0.5 * x * x)
        return (g * (cdf + x * pdf),)

    return _result(out, (a,), backward, "gelu")


ACTIVATIONS = ("relu", "sigmoid", "gelu")


def activation(x, kind, approximate=False):
    if kind == "relu":
        return relu(x)
    if kind == "sigmoid":
        return sigmoid(x)
    if kind == "gelu":
        return gelu(x, approximate=approximate)
    raise ConfigError(f"unknown activation {kind!r}; expected one of {ACTIVATIONS}")


# ---------------------------------------------------------------------------
# linear algebra and reductions
# ---------------------------------------------------------------------------

def matmul(a, b):
    a = _lift(a, b if isinstance(b, Tensor) else None)
    b = _lift(b, a)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul shape mismatch: {a.shape} @ {b.shape}")

    def backward(g):
        ga = gb = None
        if a.requires_grad:
            ga = unbroadcast(g @ np.swapaxes(b.data, -1, -2), a.shape)
        if b.requires_grad:
            if b.ndim == 2 and a.ndim > 2:
                # one GEMM over all leading axes instead of a batched product + sum
                k, n = b.shape
                gb = a.data.reshape(-1, k).T @ g.reshape(-1, n)
            else:
                gb = unbroadcast(np.swapaxes(a.data, -1, -2) @ g, b.shape)
        return ga, gb

    return _result(a.data @ b.data, (a, b), backward, "matmul")


def _norm_axes(axis, ndim):
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(ax % ndim for ax in axis)


def _expand(g, shape, axes, keepdims):
    if not keepdims:
        g = np.expand_dims(g, axes)
    return np.broadcast_to(g, shape)


def sum_(a, axis=None, keepdims=False):
    axes = _norm_axes(axis, a.ndim)
    out = np.sum(a.data, axis=axes, keepdims=keepdims)

    def backward(g):
        return (np.array(_expand(g, a.shape, axes, keepdims)),)

    return _result(np.asarray(out), (a,), backward, "sum")


def mean(a, axis=None, keepdims=False):
    axes = _norm_axes(axis, a.ndim)
    count = math.prod(a.shape[ax] for ax in axes)
    out = np.mean(a.data, axis=axes, keepdims=keepdims)

    def backward(g):
        return (_expand(g, a.shape, axes, keepdims) / count,)

    return _result(np.asarray(out), (a,), backward, "mean")


def max_(a, axis=None, keepdims=False):
    """Maximum; ties share the incoming gradient equally."""
    axes = _norm_axes(axis, a.ndim)
    kept = np.max(a.data, axis=axes, keepdims=True)
    out = kept if keepdims else np.squeeze(kept, axis=axes)

    def backward(g):
        mask = a.data == kept
        count = mask.sum(axis=axes, keepdims=True)
        gk = g if keepdims else np.expand_dims(g, axes)
        return (mask * (gk / count),)

    return _result(np.asarray(out), (a,), backward, "max")


def softmax(a, axis=-1):
    if np.any(np.isnan(a.data)):
        raise NumericError("NaN in softmax input")
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=axis, keepdims=True)

    def backward(g):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)

    return _result(out, (a,), backward, "softmax")


def softmax_rows(a):
    """Row-wise softmax of a matrix (last axis), max-subtracted."""
    return softmax(a, axis=-1)


def log_softmax(a, axis=-1):
    if np.any(np.isnan(a.data)):
        raise NumericError("NaN in log_softmax input")
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=axis, keepdims=True))
    out = shifted - lse

    def backward(g):
        p = np.exp(out)
        return (g - p * g.sum(axis=axis, keepdims=True),)

    return _result(out, (a,), backward, "log_softmax")


def layer_norm(x, gamma, beta, eps=1e-5):
    """Normalize over the last axis, then scale by ``gamma`` and shift by ``beta``."""
    if eps <= 0:
        raise ConfigError("layer_norm eps must be positive")
    d = x.shape[-1]
    if gamma.shape != (d,) or beta.shape != (d,):
        raise DimensionError(
            f"layer_norm channel mismatch: x {x.shape}, gamma {gamma.shape}, beta {beta.shape}"
        )
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    rstd = 1.0 / np.sqrt(var + eps)
    xhat = xc * rstd
    out = xhat * gamma.data + beta.data

    def backward(g):
        gx = gg = gb = None
        if x.requires_grad:
            dxhat = g * gamma.data
            gx = rstd * (
                dxhat
                - dxhat.mean(axis=-1, keepdims=True)
                - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True)
            )
        lead = tuple(range(g.ndim - 1))
        if gamma.requires_grad:
            gg = (g * xhat).sum(axis=lead)
        if beta.requires_grad:
            gb = g.sum(axis=lead)
        return gx, gg, gb

    return _result(out, (x, gamma, beta), backward, "layer_norm")


# ---------------------------------------------------------------------------
# shape manipulation
# ---------------------------------------------------------------------------

def reshape(a, shape):
    shape = tuple(shape)
    try:
        out = a.data.reshape(shape)
    except ValueError as exc:
        raise DimensionError(f"cannot reshape {a.shape} to {shape}") from exc
    return _result(out, (a,), lambda g: (g.reshape(a.shape),), "reshape")


def transpose(a, axes=None):
    if axes is None:
        axes = tuple(reversed(range(a.ndim)))
    axes = tuple(ax % a.ndim for ax in axes)
    inverse = tuple(np.argsort(axes))
    out = np.transpose(a.data, axes)
    return _result(out, (a,), lambda g: (np.transpose(g, inverse),), "transpose")


def swapaxes(a, ax1, ax2):
    out = np.swapaxes(a.data, ax1, ax2)
    return _result(out, (a,), lambda g: (np.swapaxes(g, ax1, ax2),), "swapaxes")


def _is_basic_index(index):
    items = index if isinstance(index, tuple) else (index,)
    return all(isinstance(i, (int, slice, type(None))) or i is Ellipsis for i in items)


def getitem(a, index):
    out = a.data[index]
    basic = _is_basic_index(index)

    def backward(g):
        full = np.zeros_like(a.data)
        if basic:
            full[index] += g
        else:
            np.add.at(full, index, g)
        return (full,)

    return _result(np.array(out), (a,), backward, "getitem")


def take(table, indices):
    """Row lookup ``table[indices]`` along axis 0 (embedding gather)."""
    indices = np.asarray(indices)
    out = table.data[indices]

    def backward(g):
        full = np.zeros_like(table.data)
        np.add.at(full, indices, g)
        return (full,)

    return _result(out, (table,), backward, "take")


def pad(a, widths):
    """Zero padding; ``widths`` is a per-axis list of (before, after)."""
    widths = tuple(tuple(w) for w in widths)
    if len(widths) != a.ndim:
        raise DimensionError(f"pad widths {widths} do not match rank {a.ndim}")
    if all(b == 0 and e == 0 for b, e in widths):
        return a
    out = np.pad(a.data, widths)
    crop = tuple(slice(b, b + n) for (b, _), n in zip(widths, a.shape))
    return _result(out, (a,), lambda g: (g[crop],), "pad")


def roll(a, shifts, axes):
    shifts = tuple(shifts)
    axes = tuple(axes)
    out = np.roll(a.data, shifts, axis=axes)
    back = tuple(-s for s in shifts)
    return _result(out, (a,), lambda g: (np.roll(g, back, axis=axes),), "roll")


def concat(tensors, axis=-1):
    tensors = [_lift(t) for t in tensors]
    out = np.concatenate([t.data for t in tensors], axis=axis)
    sizes = np.cumsum([t.shape[axis] for t in tensors])[:-1]

    def backward(g):
        return tuple(np.split(g, sizes, axis=axis))

    return _result(out, tuple(tensors), backward, "concat")


def dropout(a, rate, rng):
    """Inverted dropout; ``rate >= 1`` zeroes everything."""
    if rate <= 0:
        return a
    if rate >= 1:
        return a * np.zeros((), dtype=a.dtype)
    keep = (rng.random(a.shape) >= rate).astype(a.dtype) / np.asarray(1.0 - rate, dtype=a.dtype)
    return a * keep


# ---------------------------------------------------------------------------
# finite-difference gradient checking
# ---------------------------------------------------------------------------

@dataclass
class GradCheckReport:
    max_rel_error: float
    max_abs_error: float
    n_checked: int
    tol: float

    @property
    def passed(self):
        return self.max_rel_error < self.tol

    def __bool__(self):
        return self.passed


def grad_check(f, inputs, tol=1e-4, max_coords=None, rng=None, floor=1e-6):
    """Compare autodiff gradients of scalar ``f`` with central differences.

    ``inputs`` is a tensor or a list of tensors that ``f`` closes over (they
    are perturbed in place and restored).  The step for coordinate ``i`` is
    ``cbrt(eps) * max(1, |x_i|)``.  Relative error per coordinate is
    ``|a - n| / (max(|a|, |n|) + floor)``.  ``max_coords`` limits the number
    of randomly sampled coordinates checked per tensor.
    """
    if isinstance(inputs, Tensor):
        inputs = [inputs]
    for t in inputs:
        t.data = np.ascontiguousarray(t.data)
        t.requires_grad = True
        t.grad = np.zeros_like(t.data)

    out = f()
    if out.size != 1:
        raise DimensionError(f"grad_check needs a scalar function, got shape {out.shape}")
    if not np.isfinite(out.data).all():
        raise NumericError("grad_check: f(x) is not finite")
    out.backward()
    analytic = [t.grad.copy() for t in inputs]

    rng = rng if rng is not None else np.random.default_rng(0)
    eps = np.finfo(np.float64).eps
    worst_rel = worst_abs = 0.0
    n_checked = 0
    with no_grad():
        for t, ga in zip(inputs, analytic):
            flat = t.data.reshape(-1)
            coords = np.arange(flat.size)
            if max_coords is not None and flat.size > max_coords:
                coords = rng.choice(flat.size, size=max_coords, replace=False)
            for i in coords:
                orig = flat[i]
                h = np.cbrt(eps) * max(1.0, abs(orig))
                flat[i] = orig + h
                fp = float(f().data)
                flat[i] = orig - h
                fm = float(f().data)
                flat[i] = orig
                num = (fp - fm) / (2 * h)
                ana = float(ga.reshape(-1)[i])
                abs_err = abs(ana - num)
                rel_err = abs_err / (max(abs(ana), abs(num)) + floor)
                worst_rel = max(worst_rel, rel_err)
                worst_abs = max(worst_abs, abs_err)
                n_checked += 1
    return GradCheckReport(worst_rel, worst_abs, n_checked, tol)
