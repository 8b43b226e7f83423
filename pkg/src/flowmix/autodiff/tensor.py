"""Dense float64 tensors with tape-based reverse-mode differentiation.

Every operation whose inputs require gradients appends one node to the
active :class:`Tape`.  :func:`backward` replays the tape in reverse order and
then clears it, so each recorded graph can be differentiated once.
"""
from __future__ import annotations

import contextlib
import threading

import numpy as np
from scipy.special import expit

from ..exceptions import ContractError, DimensionError, TapeError

__all__ = [
    "Tensor",
    "Tape",
    "backward",
    "no_grad",
    "is_grad_enabled",
    "get_tape",
    "reset_tape",
    "as_tensor",
    "matmul",
    "exp",
    "log",
    "tanh",
    "sigmoid",
    "relu",
    "swish",
    "logsumexp",
    "log_softmax",
    "softmax",
    "concat",
    "where",
    "batchnorm1d",
]


class _Node:
    __slots__ = ("out", "parents", "backward")

    def __init__(self, out, parents, backward):
        self.out = out
        self.parents = parents
        self.backward = backward


class Tape:
    """Ordered record of executed operations.

    Nodes keep references to their inputs, outputs and whatever the
    backward closure saved.  ``clear`` drops all of them; a cleared tape
    refuses a second backward pass.
    """

    def __init__(self):
        self._nodes = []
        self.cleared = False

    def record(self, out, parents, backward):
        if self.cleared:
            raise TapeError("cannot record on a cleared tape")
        self._nodes.append(_Node(out, parents, backward))

    def clear(self):
        self._nodes = []
        self.cleared = True

    def __len__(self):
        return len(self._nodes)

    def __repr__(self):
        state = "cleared" if self.cleared else f"{len(self._nodes)} nodes"
        return f"Tape({state})"


class _State(threading.local):
    def __init__(self):
        self.tape = Tape()
        self.grad_enabled = True


_state = _State()


def get_tape() -> Tape:
    """Return the tape new operations are recorded on (one per thread)."""
    if _state.tape.cleared:
        _state.tape = Tape()
    return _state.tape


def reset_tape() -> None:
    """Discard everything recorded so far on this thread."""
    _state.tape.clear()
    _state.tape = Tape()


def is_grad_enabled() -> bool:
    return _state.grad_enabled


@contextlib.contextmanager
def no_grad():
    """Context manager disabling recording, for evaluation and sampling."""
    prev = _state.grad_enabled
    _state.grad_enabled = False
    try:
        yield
    finally:
        _state.grad_enabled = prev


def _unbroadcast(grad, shape):
    if grad.shape == shape:
        return grad
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


class Tensor:
    """A float64 n-dimensional array that can take part in differentiation.

    Args:
        data: Anything ``numpy.asarray`` accepts.
        requires_grad: Whether gradients should be accumulated into ``grad``.
        name: Optional label, used by parameter listings and error messages.
    """

    __array_priority__ = 100

    def __init__(self, data, requires_grad=False, name=None):
        arr = np.asarray(data, dtype=np.float64)
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self.name = name
        self._tape = None
        self._is_leaf = True

    @classmethod
    def _from_op(cls, data, parents, backward):
        out = cls.__new__(Tensor)
        out.data = data
        out.grad = None
        out.name = None
        out._tape = None
        out._is_leaf = True
        need = _state.grad_enabled and any(p.requires_grad for p in parents)
        out.requires_grad = need
        if need:
            tape = get_tape()
            tape.record(out, parents, backward)
            out._tape = tape
            out._is_leaf = False
        return out

    # -- basic properties -------------------------------------------------
    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    @property
    def T(self):
        return self.transpose()

    def numpy(self):
        return self.data

    def item(self):
        return float(self.data)

    def detach(self):
        return Tensor(self.data)

    def zero_grad(self):
        self.grad = None

    def __len__(self):
        return len(self.data)

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor({np.array2string(self.data, precision=6)}{flag})"

    # -- arithmetic ---------------------------------------------------------
    def __add__(self, other):
        other = as_tensor(other)
        a_shape, b_shape = self.shape, other.shape
        return Tensor._from_op(
            self.data + other.data,
            (self, other),
            lambda g: (_unbroadcast(g, a_shape), _unbroadcast(g, b_shape)),
        )

    __radd__ = __add__

    def __sub__(self, other):
        other = as_tensor(other)
        a_shape, b_shape = self.shape, other.shape
        return Tensor._from_op(
            self.data - other.data,
            (self, other),
            lambda g: (_unbroadcast(g, a_shape), -_unbroadcast(g, b_shape)),
        )

    def __rsub__(self, other):
        return as_tensor(other) - self

    def __neg__(self):
        return Tensor._from_op(-self.data, (self,), lambda g: (-g,))

    def __mul__(self, other):
        other = as_tensor(other)
        a, b = self.data, other.data
        return Tensor._from_op(
            a * b,
            (self, other),
            lambda g: (_unbroadcast(g * b, a.shape), _unbroadcast(g * a, b.shape)),
        )

    __rmul__ = __mul__

    def __truediv__(self, other):
        other = as_tensor(other)
        a, b = self.data, other.data
        out = a / b
        return Tensor._from_op(
            out,
            (self, other),
            lambda g: (_unbroadcast(g / b, a.shape), _unbroadcast(-g * out / b, b.shape)),
        )

    def __rtruediv__(self, other):
        return as_tensor(other) / self

    def __pow__(self, exponent):
        if isinstance(exponent, Tensor):
            raise ContractError("only scalar exponents are supported")
        p = float(exponent)
        a = self.data
        return Tensor._from_op(a**p, (self,), lambda g: (g * p * a ** (p - 1.0),))

    def __matmul__(self, other):
        return matmul(self, other)

    # -- reductions ---------------------------------------------------------
    def sum(self, axis=None, keepdims=False):
        shape = self.shape
        out = self.data.sum(axis=axis, keepdims=keepdims)

        def bw(g):
            if axis is not None and not keepdims:
                g = np.expand_dims(g, axis)
            return (np.broadcast_to(g, shape).copy(),)

        return Tensor._from_op(np.asarray(out), (self,), bw)

    def mean(self, axis=None, keepdims=False):
        if axis is None:
            count = self.size
        else:
            axes = (axis,) if isinstance(axis, int) else axis
            count = int(np.prod([self.shape[a] for a in axes]))
        return self.sum(axis=axis, keepdims=keepdims) * (1.0 / count)

    def max(self, axis, keepdims=False):
        """Maximum along one axis; ties send the gradient to the first index."""
        a = self.data
        idx = np.argmax(a, axis=axis)
        out = np.take_along_axis(a, np.expand_dims(idx, axis), axis=axis)
        if not keepdims:
            out = np.squeeze(out, axis=axis)

        def bw(g):
            if not keepdims:
                g = np.expand_dims(g, axis)
            grad = np.zeros_like(a)
            np.put_along_axis(grad, np.expand_dims(idx, axis), g, axis=axis)
            return (grad,)

        return Tensor._from_op(out, (self,), bw)

    # -- shape manipulation -------------------------------------------------
    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        old = self.shape
        return Tensor._from_op(self.data.reshape(shape), (self,), lambda g: (g.reshape(old),))

    def transpose(self, *axes):
        axes = axes or None
        if axes is None:
            inv = None
        else:
            inv = tuple(np.argsort(axes))
        return Tensor._from_op(
            np.transpose(self.data, axes), (self,), lambda g: (np.transpose(g, inv),)
        )

    def __getitem__(self, index):
        if isinstance(index, Tensor):
            raise ContractError("index with numpy arrays, not tensors")
        shape = self.shape

        def bw(g):
            grad = np.zeros(shape)
            np.add.at(grad, index, g)
            return (grad,)

        return Tensor._from_op(np.asarray(self.data[index]), (self,), bw)

    def expand_dims(self, axis):
        old = self.shape
        return Tensor._from_op(
            np.expand_dims(self.data, axis), (self,), lambda g: (g.reshape(old),)
        )

    # -- elementwise functions as methods ----------------------------------
    def exp(self):
        return exp(self)

    def log(self):
        return log(self)

    def tanh(self):
        return tanh(self)


def as_tensor(x) -> Tensor:
    """Wrap constants; tensors pass through untouched."""
    if isinstance(x, Tensor):
        return x
    return Tensor(x)


def backward(loss: Tensor) -> None:
    """Populate ``grad`` on every tensor that requires it and feeds ``loss``.

    The tape that recorded ``loss`` is cleared afterwards.

    Raises:
        ContractError: ``loss`` is not a scalar or does not depend on any
            tensor requiring gradients.
        TapeError: the tape holding ``loss`` was already consumed.
    """
    if loss.data.size != 1:
        raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        raise ContractError("loss does not depend on any tensor requiring grad")
    tape = loss._tape
    if tape is None:
        # leaf scalar: d(loss)/d(loss) = 1
        loss.grad = np.ones_like(loss.data) if loss.grad is None else loss.grad + 1.0
        return
    if tape.cleared:
        raise TapeError("tape already consumed by a previous backward pass")

    pending = {id(loss): np.ones_like(loss.data)}
    for node in reversed(tape._nodes):
        g = pending.pop(id(node.out), None)
        if g is None:
            continue
        node.out.grad = g
        parent_grads = node.backward(g)
        for parent, pg in zip(node.parents, parent_grads):
            if pg is None or not parent.requires_grad:
                continue
            if parent._is_leaf:
                parent.grad = pg.copy() if parent.grad is None else parent.grad + pg
            else:
                key = id(parent)
                prev = pending.get(key)
                pending[key] = pg if prev is None else prev + pg
    tape.clear()
    if _state.tape is tape:
        _state.tape = Tape()


# -- free functions ---------------------------------------------------------


def matmul(a, b) -> Tensor:
    """Matrix product of ``a[..., K]`` with a 2-D ``b[K, N]`` (or 2-D @ 2-D).

    Raises:
        DimensionError: inner dimensions differ or ``b`` is not 2-D.
    """
    a, b = as_tensor(a), as_tensor(b)
    A, B = a.data, b.data
    if B.ndim != 2 or A.ndim < 1:
        raise DimensionError(f"matmul expects a[...,K] @ b[K,N], got {A.shape} @ {B.shape}")
    if A.shape[-1] != B.shape[0]:
        raise DimensionError(f"inner dimensions disagree: {A.shape} @ {B.shape}")

    def bw(g):
        dA = g @ B.T
        # explicit row count: K may be 0 (a coupling net with no inputs)
        rows = int(np.prod(A.shape[:-1]))
        dB = A.reshape(rows, A.shape[-1]).T @ g.reshape(rows, g.shape[-1])
        return dA, dB

    return Tensor._from_op(A @ B, (a, b), bw)


def exp(x) -> Tensor:
    x = as_tensor(x)
    out = np.exp(x.data)
    return Tensor._from_op(out, (x,), lambda g: (g * out,))


def log(x) -> Tensor:
    x = as_tensor(x)
    a = x.data
    with np.errstate(divide="ignore"):
        out = np.log(a)
    return Tensor._from_op(out, (x,), lambda g: (g / a,))


def tanh(x) -> Tensor:
    x = as_tensor(x)
    out = np.tanh(x.data)
    return Tensor._from_op(out, (x,), lambda g: (g * (1.0 - out * out),))


def sigmoid(x) -> Tensor:
    x = as_tensor(x)
    out = expit(x.data)
    return Tensor._from_op(out, (x,), lambda g: (g * out * (1.0 - out),))


def relu(x) -> Tensor:
    x = as_tensor(x)
    mask = x.data > 0
    return Tensor._from_op(np.where(mask, x.data, 0.0), (x,), lambda g: (g * mask,))


def swish(x) -> Tensor:
    """Elementwise ``x * sigmoid(x)``."""
    x = as_tensor(x)
    a = x.data
    sig = expit(a)
    return Tensor._from_op(
        a * sig, (x,), lambda g: (g * sig * (1.0 + a * (1.0 - sig)),)
    )


def _lse(a, axis):
    m = np.max(a, axis=axis, keepdims=True)
    m = np.where(np.isfinite(m), m, 0.0)
    with np.errstate(divide="ignore"):
        out = np.log(np.sum(np.exp(a - m), axis=axis, keepdims=True)) + m
    return out


def logsumexp(x, axis=-1, keepdims=False) -> Tensor:
    """Stable ``log(sum(exp(x)))`` along ``axis``.

    ``-inf`` entries are zero-probability terms; an all ``-inf`` slice gives
    ``-inf`` and contributes no gradient.
    """
    x = as_tensor(x)
    a = x.data
    out_k = _lse(a, axis)

    def bw(g):
        if not keepdims:
            g = np.expand_dims(g, axis)
        with np.errstate(invalid="ignore"):
            w = np.exp(a - out_k)
        w = np.where(np.isfinite(out_k), w, 0.0)
        return (g * w,)

    out = out_k if keepdims else np.squeeze(out_k, axis=axis)
    return Tensor._from_op(out, (x,), bw)


def log_softmax(x, axis=-1) -> Tensor:
    x = as_tensor(x)
    return x - logsumexp(x, axis=axis, keepdims=True)


def softmax(x, axis=-1) -> Tensor:
    return exp(log_softmax(x, axis=axis))


def concat(tensors, axis=-1) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    sizes = [t.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]

    def bw(g):
        return tuple(np.split(g, splits, axis=axis))

    return Tensor._from_op(
        np.concatenate([t.data for t in tensors], axis=axis), tuple(tensors), bw
    )


def where(cond, a, b) -> Tensor:
    cond = np.asarray(cond, dtype=bool)
    a, b = as_tensor(a), as_tensor(b)
    sa, sb = a.shape, b.shape
    return Tensor._from_op(
        np.where(cond, a.data, b.data),
        (a, b),
        lambda g: (_unbroadcast(np.where(cond, g, 0.0), sa), _unbroadcast(np.where(cond, 0.0, g), sb)),
    )


def batchnorm1d(x, gamma, beta, mean=None, var=None, eps=1e-5):
    """Normalize the last axis of ``x`` over all leading axes.

    With ``mean``/``var`` omitted the batch statistics are used (biased
    variance) and returned alongside the output so a caller can update its
    running estimates; otherwise the given statistics are treated as
    constants.

    Returns:
        ``(out, batch_mean, batch_var)``; the statistics are ``None`` when
        fixed statistics were supplied.
    """
    x, gamma, beta = as_tensor(x), as_tensor(gamma), as_tensor(beta)
    a = x.data
    F = a.shape[-1]
    a2 = a.reshape(-1, F)
    if mean is None:
        n = a2.shape[0]
        mu = a2.mean(axis=0)
        xc = a2 - mu
        v = np.mean(xc * xc, axis=0)
        inv = 1.0 / np.sqrt(v + eps)
        xhat = xc * inv
        G = gamma.data

        def bw(g):
            g2 = g.reshape(-1, F)
            dgamma = np.sum(g2 * xhat, axis=0)
            dbeta = np.sum(g2, axis=0)
            dxhat = g2 * G
            dx = inv / n * (n * dxhat - dxhat.sum(axis=0) - xhat * np.sum(dxhat * xhat, axis=0))
            return dx.reshape(a.shape), dgamma, dbeta

        out = (xhat * G + beta.data).reshape(a.shape)
        return Tensor._from_op(out, (x, gamma, beta), bw), mu, v

    inv = 1.0 / np.sqrt(np.asarray(var) + eps)
    xhat = (a - mean) * inv
    G = gamma.data

    def bw_fixed(g):
        g2 = g.reshape(-1, F)
        return g * (G * inv), np.sum(g2 * xhat.reshape(-1, F), axis=0), np.sum(g2, axis=0)

    out = xhat * G + beta.data
    return Tensor._from_op(out, (x, gamma, beta), bw_fixed), None, None
