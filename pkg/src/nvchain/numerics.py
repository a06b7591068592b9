"""Small reverse-mode differentiation kernel for the model's dense ops.

Every primitive accepts plain float64 arrays or :class:`Var` handles.  With
plain arrays it just computes; when any argument is a ``Var`` the forward
result is appended to that variable's :class:`Tape`, and
:meth:`Tape.backward` later walks the tape in exact reverse order applying
the per-op rules in ``_BACKWARD``.
"""

import numpy as np

from .errors import InputError

DTYPE = np.float64


class Var:
    """Handle to one value recorded on a tape."""

    __slots__ = ("tape", "index", "value")

    def __init__(self, tape, index, value):
        self.tape = tape
        self.index = index
        self.value = value

    @property
    def shape(self):
        return self.value.shape

    def __repr__(self):
        return f"Var(#{self.index}, shape={self.value.shape})"


class Tape:
    """Ordered record of primitive ops from one forward pass."""

    def __init__(self):
        self.values = []
        # (op name, input indices or None for constants, output index, ctx)
        self.records = []

    def leaf(self, value):
        value = np.asarray(value, dtype=DTYPE)
        self.values.append(value)
        return Var(self, len(self.values) - 1, value)

    def _push(self, op, inputs, value, ctx):
        out = self.leaf(value)
        ids = tuple(a.index if isinstance(a, Var) else None for a in inputs)
        self.records.append((op, ids, out.index, ctx))
        return out

    def backward(self, out, seed=None):
        """Return a list of gradients, one per tape value, of ``out``.

        ``seed`` defaults to ones (1.0 for a scalar output).  Values that
        ``out`` does not depend on receive exact zeros.
        """
        if out.tape is not self:
            raise InputError("output variable belongs to a different tape")
        grads = [None] * len(self.values)
        grads[out.index] = (np.ones_like(out.value) if seed is None
                            else np.asarray(seed, dtype=DTYPE))
        for op, ids, out_id, ctx in reversed(self.records):
            g = grads[out_id]
            if g is None:
                continue
            parts = _BACKWARD[op](ctx, g)
            for i, part in zip(ids, parts):
                if i is None or part is None:
                    continue
                if grads[i] is None:
                    grads[i] = part
                else:
                    grads[i] = grads[i] + part
        return [np.zeros_like(v) if g is None else g
                for v, g in zip(self.values, grads)]


def _tape_of(*args):
    for a in args:
        if isinstance(a, Var):
            return a.tape
        if isinstance(a, (list, tuple)):
            t = _tape_of(*a)
            if t is not None:
                return t
    return None


def value_of(a):
    return a.value if isinstance(a, Var) else np.asarray(a, dtype=DTYPE)


# forward primitives ---------------------------------------------------------

def linear(x, W, b=None):
    """``x @ W.T + b`` for a vector ``x[D]`` or a row batch ``x[N, D]``."""
    xv, Wv = value_of(x), value_of(W)
    if Wv.ndim != 2 or xv.ndim not in (1, 2) or xv.shape[-1] != Wv.shape[1]:
        raise InputError(f"linear: cannot apply W{Wv.shape} to x{xv.shape}")
    out = xv @ Wv.T
    if b is not None:
        bv = value_of(b)
        if bv.shape != (Wv.shape[0],):
            raise InputError(f"linear: bias shape {bv.shape} != ({Wv.shape[0]},)")
        out = out + bv
    tape = _tape_of(x, W, b)
    if tape is None:
        return out
    return tape._push("linear", (x, W, b), out, (xv, Wv, b is not None))


def sigmoid(x):
    """Logistic function, evaluated without overflow for any finite input."""
    xv = value_of(x)
    e = np.exp(-np.abs(xv))
    out = np.where(xv >= 0, 1.0 / (1.0 + e), e / (1.0 + e))
    if np.ndim(x) == 0 and not isinstance(x, Var):
        return float(out)
    tape = _tape_of(x)
    if tape is None:
        return out
    return tape._push("sigmoid", (x,), out, out)


def tanh_elem(v):
    vv = value_of(v)
    out = np.tanh(vv)
    tape = _tape_of(v)
    if tape is None:
        return out
    return tape._push("tanh", (v,), out, out)


def softmax(v):
    vv = value_of(v)
    if vv.ndim != 1 or vv.size == 0:
        raise InputError("softmax needs a non-empty vector")
    e = np.exp(vv - vv.max())
    out = e / e.sum()
    tape = _tape_of(v)
    if tape is None:
        return out
    return tape._push("softmax", (v,), out, out)


def weighted_sum(alpha, H):
    """Convex combination of the rows of ``H[T, K]`` with weights ``alpha[T]``."""
    av, Hv = value_of(alpha), value_of(H)
    if av.ndim != 1 or Hv.ndim != 2 or av.shape[0] != Hv.shape[0]:
        raise InputError(f"weighted_sum: alpha{av.shape} vs H{Hv.shape}")
    out = av @ Hv
    tape = _tape_of(alpha, H)
    if tape is None:
        return out
    return tape._push("weighted_sum", (alpha, H), out, (av, Hv))


def concat(parts, axis=-1):
    vals = [value_of(p) for p in parts]
    out = np.concatenate(vals, axis=axis)
    tape = _tape_of(parts)
    if tape is None:
        return out
    sizes = [v.shape[axis] for v in vals]
    return tape._push("concat", tuple(parts), out, (axis, np.cumsum(sizes)[:-1]))


def stack(parts, axis=0):
    vals = [value_of(p) for p in parts]
    out = np.stack(vals, axis=axis)
    tape = _tape_of(parts)
    if tape is None:
        return out
    return tape._push("stack", tuple(parts), out, (axis, len(vals)))


def reshape(x, shape):
    xv = value_of(x)
    out = xv.reshape(shape)
    tape = _tape_of(x)
    if tape is None:
        return out
    return tape._push("reshape", (x,), out, xv.shape)


def attach_scalar(value, x, grad):
    """Record a scalar ``value`` whose gradient w.r.t. ``x`` is ``grad``.

    Used for losses whose gradient is computed in closed form elsewhere.
    """
    tape = _tape_of(x)
    if tape is None:
        return float(value)
    return tape._push("scalar", (x,), np.asarray(value, dtype=DTYPE), grad)


# reverse rules ---------------------------------------------------------------

def _linear_bw(ctx, g):
    xv, Wv, has_b = ctx
    gx = g @ Wv
    if xv.ndim == 1:
        gW = np.outer(g, xv)
        gb = g
    else:
        gW = g.T @ xv
        gb = g.sum(axis=0)
    return gx, gW, (gb if has_b else None)


def _sigmoid_bw(out, g):
    return (g * out * (1.0 - out),)


def _tanh_bw(out, g):
    return (g * (1.0 - out * out),)


def _softmax_bw(out, g):
    return (out * (g - np.dot(g, out)),)


def _weighted_sum_bw(ctx, g):
    av, Hv = ctx
    return Hv @ g, np.outer(av, g)


def _concat_bw(ctx, g):
    axis, cuts = ctx
    return tuple(np.split(g, cuts, axis=axis))


def _stack_bw(ctx, g):
    axis, n = ctx
    return tuple(np.take(g, i, axis=axis) for i in range(n))


def _reshape_bw(shape, g):
    return (g.reshape(shape),)


def _scalar_bw(grad, g):
    return (g * grad,)


_BACKWARD = {
    "linear": _linear_bw,
    "sigmoid": _sigmoid_bw,
    "tanh": _tanh_bw,
    "softmax": _softmax_bw,
    "weighted_sum": _weighted_sum_bw,
    "concat": _concat_bw,
    "stack": _stack_bw,
    "reshape": _reshape_bw,
    "scalar": _scalar_bw,
}


def grad_check(f, params, eps=1e-6):
    """Max relative error between analytic and central-difference gradients.

    ``f(params)`` must return ``(value, grads)`` where ``grads`` has the same
    keys and shapes as ``params`` (a dict of arrays).  The error per
    coordinate is ``|analytic - numeric| / max(1, |analytic|)``.
    """
    if not 1e-7 <= eps <= 1e-4:
        raise InputError(f"eps must lie in [1e-7, 1e-4], got {eps}")
    params = {k: np.array(v, dtype=DTYPE) for k, v in params.items()}
    value, analytic = f(params)
    if not np.isfinite(value):
        raise InputError("function value is not finite")
    worst = 0.0
    for name, p in params.items():
        flat = p.reshape(-1)
        a = np.asarray(analytic[name], dtype=DTYPE).reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + eps
            fp = f(params)[0]
            flat[i] = orig - eps
            fm = f(params)[0]
            flat[i] = orig
            if not (np.isfinite(fp) and np.isfinite(fm)):
                raise InputError(f"non-finite value perturbing {name}[{i}]")
            num = (fp - fm) / (2.0 * eps)
            worst = max(worst, abs(a[i] - num) / max(1.0, abs(a[i])))
    return worst
