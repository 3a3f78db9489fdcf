"""Dense float64 tensors with reverse-mode automatic differentiation.

Every operation is eager NumPy underneath. When a :class:`Tape` is active,
operations append a node (parents + local vjp closure) to it; nodes are
appended in creation order, so the tape is topologically sorted by
construction and the backward pass is a single reverse sweep with no
recursion. Tensors created while no tape is active are plain constants.

Forward results are checked for NaN/Inf and rejected immediately rather
than letting them propagate.
"""

from __future__ import annotations

import numpy as np

__all__ = [
    "Tensor",
    "Tape",
    "DimensionError",
    "DomainError",
    "ContractError",
    "NumericalError",
    "as_tensor",
    "matmul",
    "exp",
    "sqrt",
    "tanh",
    "sigmoid",
    "softplus",
    "silu",
    "row_softmax",
    "layer_norm",
    "stack",
    "concat",
]


class DimensionError(ValueError):
    """Operand shapes are incompatible for the requested operation."""


class DomainError(ValueError):
    """A numeric argument is outside the operation's domain."""


class ContractError(ValueError):
    """A documented precondition or invariant was violated."""


class NumericalError(ArithmeticError):
    """A forward operation produced NaN or Inf."""


_active_tape = None


def _check_finite(name, arr):
    # a non-finite entry always makes the sum non-finite, so one reduction
    # suffices (inf - inf and overflow both land on nan/inf and still trip)
    if not np.isfinite(arr.sum()):
        raise NumericalError(f"{name} produced non-finite values")


class Tape:
    """Append-only record of operations for one differentiation pass.

    Use as a context manager; ops executed inside record themselves.
    ``watch`` registers trainable leaves so that even leaves disconnected
    from the loss receive (zero) gradients. ``backward`` may run once per
    tape unless ``allow_repeat`` is passed, in which case gradients
    accumulate into ``.grad``.
    """

    def __init__(self):
        self.nodes = []  # (out, parents, vjp)
        self.parameters = []
        self._watched_ids = set()
        self._backward_done = False

    def __enter__(self):
        global _active_tape
        if _active_tape is not None:
            raise ContractError("a tape is already active; tapes do not nest")
        _active_tape = self
        return self

    def __exit__(self, exc_type, exc, tb):
        global _active_tape
        _active_tape = None
        return False

    def watch(self, tensor):
        if id(tensor) not in self._watched_ids:
            self._watched_ids.add(id(tensor))
            self.parameters.append(tensor)

    def _record(self, out, parents, vjp):
        out.tape = self
        out.tape_id = len(self.nodes)
        self.nodes.append((out, parents, vjp))

    def backward(self, loss, allow_repeat=False):
        """Reverse sweep from a scalar loss; returns {tensor: grad array}.

        Sets ``.grad`` on every watched parameter (zeros if the parameter
        does not participate in the loss).
        """
        if loss.data.size != 1:
            raise ContractError(
                f"backward requires a scalar loss, got shape {loss.shape}"
            )
        if loss.tape is not self:
            raise ContractError("loss was not recorded on this tape")
        if self._backward_done and not allow_repeat:
            raise ContractError(
                "tape already differentiated; pass allow_repeat=True to accumulate"
            )
        self._backward_done = True

        grads = {id(loss): np.ones_like(loss.data)}
        for out, parents, vjp in reversed(self.nodes):
            g = grads.pop(id(out), None)
            if g is None:
                continue
            pgrads = vjp(g)
            for p, pg in zip(parents, pgrads):
                if pg is None:
                    continue
                acc = grads.get(id(p))
                grads[id(p)] = pg if acc is None else acc + pg

        result = {}
        for p in self.parameters:
            g = grads.get(id(p))
            if g is None:
                g = np.zeros_like(p.data)
            if p.grad is None or not allow_repeat:
                p.grad = g
            else:
                p.grad = p.grad + g
            result[p] = p.grad
        return result


class Tensor:
    """A contiguous row-major float64 array, optionally on the active tape."""

    __slots__ = ("data", "grad", "trainable", "tape", "tape_id", "_row_stochastic")

    def __init__(self, data, trainable=False):
        arr = np.asarray(data, dtype=np.float64)
        if arr.ndim and not arr.flags["C_CONTIGUOUS"]:
            arr = np.ascontiguousarray(arr)
        _check_finite("tensor construction", arr)
        self.data = arr
        self.grad = None
        self.trainable = trainable
        self.tape = None
        self.tape_id = None

    @classmethod
    def _wrap(cls, arr):
        """Internal: wrap an op result already validated by its op."""
        out = cls.__new__(cls)
        out.data = arr
        out.grad = None
        out.trainable = False
        out.tape = None
        out.tape_id = None
        return out

    @property
    def row_stochastic_hint(self):
        """True when construction guarantees rows summing to one (e.g.
        row_softmax output); consumers may then skip re-validation."""
        try:
            return self._row_stochastic
        except AttributeError:
            return False

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    def item(self):
        if self.data.size != 1:
            raise ContractError(f"item() requires a single element, got shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def numpy(self):
        return self.data

    def __repr__(self):
        return f"Tensor(shape={self.shape}, trainable={self.trainable})"

    # arithmetic ---------------------------------------------------------

    def __add__(self, other):
        return _elementwise_binary("add", self, as_tensor(other), np.add,
                                   lambda g, a, b: (g, g))

    __radd__ = __add__

    def __sub__(self, other):
        return _elementwise_binary("sub", self, as_tensor(other), np.subtract,
                                   lambda g, a, b: (g, -g))

    def __rsub__(self, other):
        return as_tensor(other) - self

    def __mul__(self, other):
        return _elementwise_binary("mul", self, as_tensor(other), np.multiply,
                                   lambda g, a, b: (g * b, g * a))

    __rmul__ = __mul__

    def __truediv__(self, other):
        return _elementwise_binary("div", self, as_tensor(other), np.divide,
                                   lambda g, a, b: (g / b, -g * a / (b * b)))

    def __neg__(self):
        return _unary("neg", self, lambda a: -a, lambda g, a, out: -g)

    def __matmul__(self, other):
        return matmul(self, as_tensor(other))

    def __getitem__(self, idx):
        src = self
        out_data = src.data[idx]
        if np.isscalar(out_data) or out_data.ndim == 0:
            out_data = np.asarray(out_data)
        out = Tensor._wrap(out_data.copy())  # slices copy; no aliased views
        parts = idx if isinstance(idx, tuple) else (idx,)
        basic = all(isinstance(p, (int, np.integer, slice)) or p is None
                    or p is Ellipsis for p in parts)

        def vjp(g):
            full = np.zeros_like(src.data)
            if basic:
                full[idx] += g  # basic indexing never repeats elements
            else:
                np.add.at(full, idx, g)
            return (full,)

        _maybe_record(out, (src,), vjp)
        return out

    def sum(self, axis=None, keepdims=False):
        src = self
        out_data = np.sum(src.data, axis=axis, keepdims=keepdims)
        _check_finite("sum", np.asarray(out_data))
        out = Tensor._wrap(np.asarray(out_data))

        def vjp(g):
            if axis is not None and not keepdims:
                g = np.expand_dims(g, axis)
            return (np.broadcast_to(g, src.data.shape).copy(),)

        _maybe_record(out, (src,), vjp)
        return out

    def mean(self, axis=None, keepdims=False):
        n = self.data.size if axis is None else self.data.shape[axis]
        return self.sum(axis=axis, keepdims=keepdims) * (1.0 / n)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        src = self
        out = Tensor._wrap(src.data.reshape(shape))
        _maybe_record(out, (src,), lambda g: (g.reshape(src.data.shape),))
        return out

    def transpose(self, axes=None):
        src = self
        out = Tensor._wrap(np.transpose(src.data, axes))
        inv = None if axes is None else np.argsort(axes)
        _maybe_record(out, (src,), lambda g: (np.transpose(g, inv),))
        return out


def as_tensor(x):
    return x if isinstance(x, Tensor) else Tensor(x)


def _maybe_record(out, parents, vjp):
    if _active_tape is not None:
        _active_tape._record(out, parents, vjp)


def _unbroadcast(g, shape):
    """Sum gradient g down to `shape` (inverse of NumPy broadcasting)."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


def _elementwise_binary(name, a, b, fwd, local):
    try:
        out_data = fwd(a.data, b.data)
    except ValueError as e:
        raise DimensionError(f"{name}: shapes {a.shape} and {b.shape}: {e}") from None
    _check_finite(name, out_data)
    out = Tensor._wrap(out_data)

    def vjp(g):
        ga, gb = local(g, a.data, b.data)
        return (_unbroadcast(ga, a.data.shape), _unbroadcast(gb, b.data.shape))

    _maybe_record(out, (a, b), vjp)
    return out


def _unary(name, a, fwd, local):
    out_data = fwd(a.data)
    _check_finite(name, out_data)
    out = Tensor._wrap(out_data)
    _maybe_record(out, (a,), lambda g: (local(g, a.data, out.data),))
    return out


def matmul(a, b):
    """Matrix product with NumPy semantics (leading batch dims broadcast)."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2:
        raise DimensionError(
            f"matmul requires rank >= 2 operands, got {a.shape} and {b.shape}"
        )
    if a.shape[-1] != b.shape[-2]:
        raise DimensionError(
            f"matmul inner extents differ: {a.shape} x {b.shape}"
        )
    out_data = np.matmul(a.data, b.data)
    _check_finite("matmul", out_data)
    out = Tensor._wrap(out_data)

    def vjp(g):
        ga = np.matmul(g, np.swapaxes(b.data, -1, -2))
        gb = np.matmul(np.swapaxes(a.data, -1, -2), g)
        return (_unbroadcast(ga, a.data.shape), _unbroadcast(gb, b.data.shape))

    _maybe_record(out, (a, b), vjp)
    return out


def exp(x):
    return _unary("exp", as_tensor(x), np.exp, lambda g, a, out: g * out)


def sqrt(x):
    return _unary("sqrt", as_tensor(x), np.sqrt, lambda g, a, out: g * 0.5 / out)


def tanh(x):
    return _unary("tanh", as_tensor(x), np.tanh, lambda g, a, out: g * (1.0 - out * out))


def _sigmoid(a):
    # exp may overflow for very negative a; 1/(1+inf) is exactly the right 0.
    # negation is bound first: ufuncs on an unreferenced temporary reuse its
    # buffer, and the overlapping in/out forces a slow scalar loop
    neg = -a
    with np.errstate(over="ignore"):
        e = np.exp(neg)
        return 1.0 / (1.0 + e)


def sigmoid(x):
    return _unary("sigmoid", as_tensor(x), _sigmoid,
                  lambda g, a, out: g * out * (1.0 - out))


def softplus(x):
    # log(1 + e^a) written to stay finite for large |a|
    def _softplus_fwd(a):
        na = -np.abs(a)
        e = np.exp(na)
        return np.maximum(a, 0.0) + np.log1p(e)

    return _unary("softplus", as_tensor(x), _softplus_fwd,
                  lambda g, a, out: g * _sigmoid(a))


def silu(x):
    """Elementwise x * sigmoid(x)."""
    x = as_tensor(x)
    s = _sigmoid(x.data)
    out = Tensor._wrap(x.data * s)  # |x·σ(x)| <= |x|, stays finite
    _maybe_record(out, (x,), lambda g: (g * (s + x.data * s * (1.0 - s)),))
    return out


def row_softmax(x):
    """Softmax over the last axis with per-row max subtraction.

    Rows of the result sum to 1 with all entries strictly inside (0, 1).
    """
    x = as_tensor(x)
    shifted = x.data - np.max(x.data, axis=-1, keepdims=True)
    e = np.exp(shifted)
    out_data = e / np.sum(e, axis=-1, keepdims=True)
    out = Tensor._wrap(out_data)  # entries in (0, 1]
    out._row_stochastic = True

    def vjp(g):
        dot = np.sum(g * out_data, axis=-1, keepdims=True)
        return (out_data * (g - dot),)

    _maybe_record(out, (x,), vjp)
    return out


def layer_norm(x, gamma, beta, eps=1e-5):
    """Standardize the last axis, then apply the affine pair (gamma, beta)."""
    x, gamma, beta = as_tensor(x), as_tensor(gamma), as_tensor(beta)
    if eps <= 0:
        raise DomainError(f"layer_norm eps must be positive, got {eps}")
    d = x.shape[-1] if x.ndim else 0
    if d == 0:
        raise DimensionError("layer_norm over an empty last axis")
    if gamma.shape != (d,) or beta.shape != (d,):
        raise DimensionError(
            f"layer_norm affine params must have shape ({d},), "
            f"got {gamma.shape} and {beta.shape}"
        )
    from . import kernels  # deferred: kernels has no tensor dependency
    shape = x.data.shape
    if kernels.ln_forward is not None:
        rows = x.data.reshape(-1, d)
        y, xhat2, inv2 = kernels.ln_forward(rows, gamma.data, beta.data, eps)
        out_data = y.reshape(shape)
        _check_finite("layer_norm", out_data)
        out = Tensor._wrap(out_data)

        def vjp(g):
            gx, ggamma, gbeta = kernels.ln_backward(
                np.ascontiguousarray(g).reshape(-1, d), xhat2, inv2, gamma.data)
            return (gx.reshape(shape), ggamma, gbeta)

        _maybe_record(out, (x, gamma, beta), vjp)
        return out

    scale = 1.0 / d
    mu = x.data.sum(axis=-1, keepdims=True) * scale
    centered = x.data - mu
    var = (centered * centered).sum(axis=-1, keepdims=True) * scale
    inv = 1.0 / np.sqrt(var + eps)
    xhat = centered * inv
    out_data = xhat * gamma.data + beta.data
    _check_finite("layer_norm", out_data)
    out = Tensor._wrap(out_data)

    def vjp(g):
        gxhat = g * gamma.data
        gx = inv * (
            gxhat
            - gxhat.sum(axis=-1, keepdims=True) * scale
            - xhat * ((gxhat * xhat).sum(axis=-1, keepdims=True) * scale)
        )
        axes = tuple(range(g.ndim - 1))
        return (gx, np.sum(g * xhat, axis=axes), np.sum(g, axis=axes))

    _maybe_record(out, (x, gamma, beta), vjp)
    return out


def stack(tensors, axis=0):
    tensors = [as_tensor(t) for t in tensors]
    out = Tensor._wrap(np.stack([t.data for t in tensors], axis=axis))

    def vjp(g):
        return tuple(np.take(g, i, axis=axis) for i in range(len(tensors)))

    _maybe_record(out, tuple(tensors), vjp)
    return out


def concat(tensors, axis=-1):
    tensors = [as_tensor(t) for t in tensors]
    out = Tensor._wrap(np.concatenate([t.data for t in tensors], axis=axis))
    sizes = [t.data.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]

    def vjp(g):
        return tuple(np.ascontiguousarray(p) for p in np.split(g, splits, axis=axis))

    _maybe_record(out, tuple(tensors), vjp)
    return out
