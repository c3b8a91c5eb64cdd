"""Tensor value carrier and the tape used for reverse-mode differentiation."""

import threading

import numpy as np


class NonFiniteError(FloatingPointError):
    """Raised when an operation produces NaN or Inf."""


class TapeError(RuntimeError):
    """Raised on misuse of a tape (non-scalar loss, reused tape, ...)."""


class Tensor:
    """Dense float64 array with an optional gradient slot.

    Tensors are treated as immutable; only an optimizer owning a parameter
    writes to ``data`` in place.
    """

    __slots__ = ("data", "requires_grad", "grad", "name", "__weakref__")

    def __init__(self, data, requires_grad=False, name=None):
        arr = np.array(data, dtype=np.float64, copy=True)
        if not np.all(np.isfinite(arr)):
            raise NonFiniteError(f"non-finite values in tensor {name or ''}".strip())
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self.name = name

    @classmethod
    def _wrap(cls, arr, requires_grad=False):
        # internal fast path, caller guarantees float64 and finiteness
        t = cls.__new__(cls)
        t.data = arr
        t.requires_grad = requires_grad
        t.grad = None
        t.name = None
        return t

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    def numpy(self):
        return self.data.copy()

    def item(self):
        if self.data.size != 1:
            raise ValueError(f"item() needs a single-element tensor, got shape {self.shape}")
        return float(self.data.reshape(()))

    def zero_grad(self):
        self.grad = None

    def detach(self):
        return Tensor._wrap(self.data, False)

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"

    # arithmetic sugar, implemented in functional
    def __add__(self, other):
        from . import functional as F
        return F.add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        from . import functional as F
        return F.sub(self, other)

    def __rsub__(self, other):
        from . import functional as F
        return F.sub(other, self)

    def __mul__(self, other):
        from . import functional as F
        return F.mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        from . import functional as F
        return F.mul(self, -1.0)

    def __truediv__(self, scalar):
        if isinstance(scalar, Tensor):
            raise TypeError("division by a tensor is not supported")
        from . import functional as F
        return F.mul(self, 1.0 / float(scalar))


class _Node:
    __slots__ = ("out", "inputs", "vjp")

    def __init__(self, out, inputs, vjp):
        self.out = out
        self.inputs = inputs
        self.vjp = vjp


_local = threading.local()


def _stack():
    if not hasattr(_local, "stack"):
        _local.stack = []
    return _local.stack


def current_tape():
    """Innermost active tape on this thread, or None."""
    stack = _stack()
    return stack[-1] if stack else None


class Tape:
    """Ordered record of differentiable operations.

    Use as a context manager; operations executed inside the ``with`` block
    whose inputs require gradients are appended in execution order.  Outside
    any tape, operations run without recording (inference mode).
    A tape can be consumed by exactly one backward pass.
    """

    def __init__(self):
        self.nodes = []
        self.consumed = False

    def __enter__(self):
        _stack().append(self)
        return self

    def __exit__(self, *exc):
        _stack().remove(self)
        return False

    def record(self, out, inputs, vjp):
        if self.consumed:
            raise TapeError("cannot record on a consumed tape")
        self.nodes.append(_Node(out, inputs, vjp))

    def backward(self, loss, params=None):
        """Propagate d(loss) back through the recorded nodes.

        Every requires-grad leaf reached gets its ``grad`` set.  Tensors in
        ``params`` that did not take part get a zero gradient.  Returns the
        gradients of ``params`` in order (or of all reached leaves when
        ``params`` is None, as a dict keyed by tensor id).
        """
        if self.consumed:
            raise TapeError("tape already consumed")
        if loss.data.size != 1:
            raise TapeError(f"loss must be a scalar, got shape {loss.shape}")
        self.consumed = True

        grads = {id(loss): np.ones_like(loss.data)}
        produced = set()
        leaves = {}
        for node in reversed(self.nodes):
            produced.add(id(node.out))
            g = grads.pop(id(node.out), None)
            if g is None:
                continue
            in_grads = node.vjp(g)
            for inp, ig in zip(node.inputs, in_grads):
                if ig is None or not isinstance(inp, Tensor) or not inp.requires_grad:
                    continue
                key = id(inp)
                if key in grads:
                    grads[key] = grads[key] + ig
                else:
                    grads[key] = ig
                leaves[key] = inp
        if id(loss) not in produced:
            raise TapeError("loss was not produced on this tape")
        self.nodes = []

        result = {}
        for key, t in leaves.items():
            if key in produced:
                continue
            g = grads.get(key)
            if g is None:
                continue
            t.grad = g
            result[key] = g
        if params is None:
            return result
        out = []
        for p in params:
            g = result.get(id(p))
            if g is None:
                g = np.zeros_like(p.data)
                p.grad = g
            out.append(g)
        return out


def backward(loss, tape, params=None):
    """Functional form of :meth:`Tape.backward`."""
    return tape.backward(loss, params)
