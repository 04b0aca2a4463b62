"""Dense float64 tensors with tape-based reverse-mode differentiation.

Every value is a numpy array of 64-bit floats.  Operations executed while a
Tape is active record a backward rule; Tape.backward replays the rules in
reverse topological order (which is simply reverse recording order).  NaN or
Inf anywhere is a hard error raised at the op boundary that produced it.
"""

from __future__ import annotations

import numpy as np

from .errors import ContractViolation, NonFiniteError, TapeConsumedError

__all__ = [
    "Tensor", "Tape", "tensor", "add", "sub", "mul", "div", "neg", "matmul",
    "concat", "reshape", "gather_rows", "sum_", "mean_", "max_", "sqrt",
    "leaky_relu", "softmax", "where_mask", "cross_entropy", "zero_grads",
    "batch_norm_train", "custom_op", "weighted_sum_neighbors",
]

_TAPES: list["Tape"] = []


def _check_finite(data, op):
    # a single-pass reduction: any NaN/Inf makes the sum non-finite
    if not np.isfinite(np.sum(data)):
        raise NonFiniteError(f"non-finite value produced by {op}")


class Tensor:
    """A dense array plus an optional gradient buffer."""

    __slots__ = ("data", "grad", "requires_grad")

    def __init__(self, data, requires_grad=False):
        arr = np.asarray(data, dtype=np.float64)
        _check_finite(arr, "tensor construction")
        self.data = arr
        self.grad = None
        self.requires_grad = bool(requires_grad)

    @property
    def shape(self):
        return self.data.shape

    def accumulate_grad(self, g):
        if self.grad is None:
            self.grad = np.array(g, dtype=np.float64, copy=True)
            if self.grad.shape != self.data.shape:
                self.grad = np.broadcast_to(g, self.data.shape).copy()
        else:
            self.grad += g

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad})"

    # convenience operators
    def __add__(self, other):
        return add(self, _as_tensor(other))

    def __radd__(self, other):
        return add(_as_tensor(other), self)

    def __sub__(self, other):
        return sub(self, _as_tensor(other))

    def __rsub__(self, other):
        return sub(_as_tensor(other), self)

    def __mul__(self, other):
        return mul(self, _as_tensor(other))

    def __rmul__(self, other):
        return mul(_as_tensor(other), self)

    def __truediv__(self, other):
        return div(self, _as_tensor(other))

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)


def tensor(data, requires_grad=False):
    return Tensor(data, requires_grad)


def _as_tensor(x):
    return x if isinstance(x, Tensor) else Tensor(x)


class Tape:
    """Ordered record of differentiable operations."""

    def __init__(self):
        self._ops = []
        self._consumed = False

    def __enter__(self):
        _TAPES.append(self)
        return self

    def __exit__(self, *exc):
        popped = _TAPES.pop()
        assert popped is self
        return False

    def record(self, backward_fn):
        self._ops.append(backward_fn)

    def __len__(self):
        return len(self._ops)

    def backward(self, loss: Tensor):
        """Populate .grad on every requires_grad tensor reachable from loss."""
        if self._consumed:
            raise TapeConsumedError("tape already consumed by a backward pass")
        if loss.data.ndim != 0:
            raise ContractViolation(
                f"backward needs a scalar loss, got shape {loss.data.shape}"
            )
        self._consumed = True
        loss.grad = np.ones_like(loss.data)
        for fn in reversed(self._ops):
            fn()


def _active_tape():
    return _TAPES[-1] if _TAPES else None


def _make(data, op, *inputs, check=True):
    """Wrap an op result; caller supplies the backward rule afterwards."""
    if check:
        _check_finite(data, op)
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out.requires_grad = any(t.requires_grad for t in inputs)
    return out


def _record(out, inputs, backward_fn):
    tape = _active_tape()
    if tape is not None and out.requires_grad:

        def run():
            if out.grad is None:
                return
            backward_fn(out.grad)
            # every consumer already ran in the reverse sweep, so this
            # intermediate's gradient buffer can be released
            out.grad = None

        tape.record(run)


def _unbroadcast(g, shape):
    """Sum gradient g down to `shape` (inverse of numpy broadcasting)."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


def add(a, b):
    out = _make(a.data + b.data, "add", a, b)

    def bwd(g):
        if a.requires_grad:
            a.accumulate_grad(_unbroadcast(g, a.data.shape))
        if b.requires_grad:
            b.accumulate_grad(_unbroadcast(g, b.data.shape))

    _record(out, (a, b), bwd)
    return out


def sub(a, b):
    out = _make(a.data - b.data, "sub", a, b)

    def bwd(g):
        if a.requires_grad:
            a.accumulate_grad(_unbroadcast(g, a.data.shape))
        if b.requires_grad:
            b.accumulate_grad(_unbroadcast(-g, b.data.shape))

    _record(out, (a, b), bwd)
    return out


def mul(a, b):
    out = _make(a.data * b.data, "mul", a, b)

    def bwd(g):
        if a.requires_grad:
            a.accumulate_grad(_unbroadcast(g * b.data, a.data.shape))
        if b.requires_grad:
            b.accumulate_grad(_unbroadcast(g * a.data, b.data.shape))

    _record(out, (a, b), bwd)
    return out


def div(a, b):
    with np.errstate(divide="ignore", invalid="ignore"):
        quotient = a.data / b.data
    out = _make(quotient, "div", a, b)

    def bwd(g):
        if a.requires_grad:
            a.accumulate_grad(_unbroadcast(g / b.data, a.data.shape))
        if b.requires_grad:
            b.accumulate_grad(_unbroadcast(-g * a.data / (b.data * b.data),
                                           b.data.shape))

    _record(out, (a, b), bwd)
    return out


def neg(a):
    out = _make(-a.data, "neg", a)

    def bwd(g):
        a.accumulate_grad(-g)

    _record(out, (a,), bwd)
    return out


def matmul(a, b):
    if a.data.ndim != 2 or b.data.ndim != 2:
        raise ContractViolation("matmul expects 2-D operands")
    if a.data.shape[1] != b.data.shape[0]:
        raise ContractViolation(
            f"matmul shape mismatch {a.data.shape} @ {b.data.shape}"
        )
    out = _make(a.data @ b.data, "matmul", a, b)

    def bwd(g):
        if a.requires_grad:
            a.accumulate_grad(g @ b.data.T)
        if b.requires_grad:
            b.accumulate_grad(a.data.T @ g)

    _record(out, (a, b), bwd)
    return out


def concat(tensors, axis=-1):
    datas = [t.data for t in tensors]
    out = _make(np.concatenate(datas, axis=axis), "concat", *tensors)
    sizes = [d.shape[axis] for d in datas]
    offsets = np.cumsum([0] + sizes)

    def bwd(g):
        for t, lo, hi in zip(tensors, offsets[:-1], offsets[1:]):
            if t.requires_grad:
                idx = [slice(None)] * g.ndim
                idx[axis if axis >= 0 else g.ndim + axis] = slice(lo, hi)
                t.accumulate_grad(g[tuple(idx)])

    _record(out, tuple(tensors), bwd)
    return out


def reshape(a, shape):
    # a view of already-checked data; skip the finiteness pass
    out = _make(a.data.reshape(shape), "reshape", a, check=False)

    def bwd(g):
        a.accumulate_grad(g.reshape(a.data.shape))

    _record(out, (a,), bwd)
    return out


def gather_rows(a, indices):
    """a: (M, d), indices: int array (M, K) -> (M, K, d); scatter-add backward."""
    idx = np.asarray(indices)
    out = _make(a.data[idx], "gather_rows", a)

    def bwd(g):
        ga = np.zeros_like(a.data)
        np.add.at(ga, idx.ravel(), g.reshape(-1, a.data.shape[1]))
        a.accumulate_grad(ga)

    _record(out, (a,), bwd)
    return out


def sum_(a, axis=None, keepdims=False):
    out = _make(a.data.sum(axis=axis, keepdims=keepdims), "sum", a)

    def bwd(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        a.accumulate_grad(np.broadcast_to(g, a.data.shape).copy())

    _record(out, (a,), bwd)
    return out


def mean_(a, axis=None, keepdims=False):
    out = _make(a.data.mean(axis=axis, keepdims=keepdims), "mean", a)
    n = a.data.size if axis is None else a.data.shape[axis]

    def bwd(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        a.accumulate_grad(np.broadcast_to(g, a.data.shape) / n)

    _record(out, (a,), bwd)
    return out


def max_(a, axis):
    """Max over one axis; gradient routes to the first argmax on ties."""
    am = np.argmax(a.data, axis=axis)
    out = _make(np.take_along_axis(a.data, np.expand_dims(am, axis),
                                   axis=axis).squeeze(axis), "max", a)

    def bwd(g):
        ga = np.zeros_like(a.data)
        np.put_along_axis(ga, np.expand_dims(am, axis),
                          np.expand_dims(g, axis), axis=axis)
        a.accumulate_grad(ga)

    _record(out, (a,), bwd)
    return out


def sqrt(a):
    with np.errstate(invalid="ignore"):
        r = np.sqrt(a.data)
    out = _make(r, "sqrt", a)

    def bwd(g):
        # derivative at 0 taken as 0 so masked-off degenerate rows stay finite
        ga = np.where(r > 0.0, g / (2.0 * np.where(r > 0.0, r, 1.0)), 0.0)
        a.accumulate_grad(ga)

    _record(out, (a,), bwd)
    return out


def leaky_relu(a, slope=0.01):
    mask = a.data >= 0.0
    out = _make(np.where(mask, a.data, slope * a.data), "leaky_relu", a)

    def bwd(g):
        a.accumulate_grad(np.where(mask, g, slope * g))

    _record(out, (a,), bwd)
    return out


def softmax(a, axis):
    """Numerically stabilized softmax along one axis."""
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    y = e / e.sum(axis=axis, keepdims=True)
    out = _make(y, "softmax", a)

    def bwd(g):
        dot = (g * y).sum(axis=axis, keepdims=True)
        a.accumulate_grad(y * (g - dot))

    _record(out, (a,), bwd)
    return out


def where_mask(cond, a, b):
    """Select a where cond else b; cond is a constant boolean array.

    Gradient flows only into the selected branch, so the unselected branch may
    hold values whose own gradient would be undefined.
    """
    c = np.asarray(cond, dtype=bool)
    out = _make(np.where(c, a.data, b.data), "where_mask", a, b)

    def bwd(g):
        if a.requires_grad:
            a.accumulate_grad(_unbroadcast(np.where(c, g, 0.0), a.data.shape))
        if b.requires_grad:
            b.accumulate_grad(_unbroadcast(np.where(c, 0.0, g), b.data.shape))

    _record(out, (a, b), bwd)
    return out


def batch_norm_train(x, gamma, beta, eps):
    """Fused per-channel standardization over rows (biased variance).

    Returns (out, batch_mean, batch_var); the latter two are plain arrays for
    the caller's running-statistics update.  Fused so the tape retains only
    the standardized values instead of a chain of elementwise temporaries.
    """
    mu = x.data.mean(axis=0)
    xc = x.data - mu
    var = np.mean(xc * xc, axis=0)
    inv_std = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv_std
    del xc
    out = _make(xhat * gamma.data + beta.data, "batch_norm", x, gamma, beta)

    def bwd(g):
        if gamma.requires_grad:
            gamma.accumulate_grad((g * xhat).sum(axis=0))
        if beta.requires_grad:
            beta.accumulate_grad(g.sum(axis=0))
        if x.requires_grad:
            dxhat = g * gamma.data
            x.accumulate_grad(inv_std * (dxhat - dxhat.mean(axis=0)
                                         - xhat * (dxhat * xhat).mean(axis=0)))

    _record(out, (x, gamma, beta), bwd)
    return out, mu, var


def custom_op(data, inputs, backward_fn, name="custom"):
    """Record an externally computed op; backward_fn(g) must accumulate
    gradients into the inputs itself."""
    out = _make(np.asarray(data, dtype=np.float64), name, *inputs)
    _record(out, tuple(inputs), backward_fn)
    return out


def weighted_sum_neighbors(alpha, values):
    """sum over axis 1 of alpha * values for (M, K, k) operands."""
    if alpha.data.shape != values.data.shape:
        raise ContractViolation("weight/value shape mismatch")
    out = _make(np.einsum("mkc,mkc->mc", alpha.data, values.data),
                "weighted_sum_neighbors", alpha, values)

    def bwd(g):
        if alpha.requires_grad:
            alpha.accumulate_grad(g[:, None, :] * values.data)
        if values.requires_grad:
            values.accumulate_grad(g[:, None, :] * alpha.data)

    _record(out, (alpha, values), bwd)
    return out


PROB_FLOOR = 1e-12


def cross_entropy(probs, labels):
    """Mean negative log-probability of the true class.

    probs: (M, C) rows summing to 1 (checked to 1e-6); labels: (M,) ints.
    Probabilities are clamped at 1e-12 before the log.
    """
    labels = np.asarray(labels)
    m, c = probs.data.shape
    if labels.shape != (m,):
        raise ContractViolation(f"labels shape {labels.shape} != ({m},)")
    if labels.min(initial=0) < 0 or labels.max(initial=0) >= c:
        raise ContractViolation("label out of range [0, C)")
    row_sums = probs.data.sum(axis=1)
    if np.max(np.abs(row_sums - 1.0)) > 1e-6:
        raise ContractViolation("probability rows must sum to 1 +- 1e-6")
    picked = probs.data[np.arange(m), labels]
    clamped = np.maximum(picked, PROB_FLOOR)
    out = _make(np.asarray(-np.mean(np.log(clamped))), "cross_entropy", probs)

    def bwd(g):
        gp = np.zeros_like(probs.data)
        live = picked > PROB_FLOOR
        gp[np.arange(m), labels] = np.where(live, -g / (m * clamped), 0.0)
        probs.accumulate_grad(gp)

    _record(out, (probs,), bwd)
    return out


def zero_grads(tensors):
    for t in tensors:
        t.grad = None
