"""Dense tensors with define-by-run reverse-mode differentiation.

Every differentiable operation returns a :class:`Tensor` holding references
to its parents and a closure that maps the output gradient to one gradient
per parent. :func:`backward` orders the reachable nodes topologically (the
tape) and runs the closures in reverse.
"""

from __future__ import annotations

import contextlib
import threading

import numpy as np

_state = threading.local()


def default_dtype():
    return getattr(_state, "dtype", np.float64)


@contextlib.contextmanager
def precision(dtype):
    """Temporarily change the dtype used for newly created floating tensors."""
    prev = default_dtype()
    _state.dtype = np.dtype(dtype).type
    try:
        yield
    finally:
        _state.dtype = prev


def grad_enabled():
    return getattr(_state, "grad_enabled", True)


@contextlib.contextmanager
def no_grad():
    """Run operations without recording them for differentiation."""
    prev = grad_enabled()
    _state.grad_enabled = False
    try:
        yield
    finally:
        _state.grad_enabled = prev


class Tensor:
    """An n-d array that may take part in gradient computation.

    Activations are NCHW; parameters may be lower rank (per-channel vectors,
    conv weights). ``requires_grad`` leaves accumulate into ``grad``.
    """

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "op", "name")

    def __init__(self, data, requires_grad=False, name=None, dtype=None):
        arr = np.asarray(data)
        if dtype is not None:
            arr = arr.astype(dtype, copy=False)
        elif not np.issubdtype(arr.dtype, np.floating):
            arr = arr.astype(default_dtype())
        if arr.ndim == 0:
            arr = arr.reshape(1, 1, 1, 1)
        if any(d < 1 for d in arr.shape):
            raise ValueError(f"tensor dimensions must be >= 1, got {arr.shape}")
        self.data = arr
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self._parents = ()
        self._backward = None
        self.op = "leaf"
        self.name = name

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self):
        return self.data.size

    @property
    def is_leaf(self):
        return self._backward is None

    def numpy(self):
        return self.data

    def item(self):
        if self.data.size != 1:
            raise ValueError(f"item() needs a single element, shape is {self.shape}")
        return float(self.data.reshape(()))

    def detach(self):
        return Tensor(self.data, requires_grad=False)

    def zero_grad(self):
        self.grad = None

    def backward(self):
        return backward(self)

    def __add__(self, other):
        return add(self, other)

    def __mul__(self, other):
        return mul(self, other)

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        label = f" {self.name!r}" if self.name else ""
        return f"Tensor{label}(shape={self.shape}, dtype={self.dtype}{flag})"


def as_tensor(x):
    return x if isinstance(x, Tensor) else Tensor(x)


def make_result(data, parents, backward_fn, op):
    """Wrap ``data`` as the output of an operation.

    ``backward_fn(grad)`` must return one gradient (or None) per parent.
    Nothing is recorded when no parent needs a gradient or recording is off.
    """
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out._parents = ()
    out._backward = None
    out.op = op
    out.name = None
    needs = grad_enabled() and any(p.requires_grad for p in parents)
    out.requires_grad = needs
    if needs:
        out._parents = tuple(parents)
        out._backward = backward_fn
    return out


class Tape:
    """Topologically ordered record of the operations that produced a tensor."""

    def __init__(self, nodes):
        self.nodes = nodes

    @classmethod
    def from_output(cls, out):
        order, seen = [], set()
        stack = [(out, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                order.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if p.requires_grad and id(p) not in seen:
                    stack.append((p, False))
        return cls(order)

    def __len__(self):
        return len(self.nodes)

    def backward(self, loss):
        if self.nodes[-1] is not loss:
            raise ValueError("tape was not recorded from this loss")
        grads = {id(loss): np.ones_like(loss.data)}
        leaves = []
        for node in reversed(self.nodes):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node.is_leaf:
                node.grad = g if node.grad is None else node.grad + g
                leaves.append(node)
                continue
            for parent, pg in zip(node._parents, node._backward(g)):
                if pg is None or not parent.requires_grad:
                    continue
                if pg.shape != parent.data.shape:
                    raise RuntimeError(
                        f"{node.op}: gradient shape {pg.shape} != input shape {parent.data.shape}"
                    )
                key = id(parent)
                grads[key] = pg if key not in grads else grads[key] + pg
        return {id(leaf): leaf.grad for leaf in leaves}


def backward(loss):
    """Back-propagate from a scalar ``loss`` into every ``requires_grad`` leaf.

    Gradients are accumulated into ``leaf.grad``; the return value maps
    ``id(leaf)`` to that gradient.
    """
    if loss.data.size != 1:
        raise ValueError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        raise ValueError("loss is detached: it was not produced by recorded operations")
    if loss.is_leaf:
        loss.grad = np.ones_like(loss.data) if loss.grad is None else loss.grad + 1
        return {id(loss): loss.grad}
    return Tape.from_output(loss).backward(loss)


def _check_same_shape(a, b, what):
    if a.shape != b.shape:
        raise ValueError(f"{what}: shape mismatch {a.shape} vs {b.shape}")


def add(a, b):
    a, b = as_tensor(a), as_tensor(b)
    _check_same_shape(a, b, "add")
    return make_result(a.data + b.data, (a, b), lambda g: (g, g), "add")


def mul(a, b):
    a, b = as_tensor(a), as_tensor(b)
    _check_same_shape(a, b, "mul")
    ad, bd = a.data, b.data
    return make_result(ad * bd, (a, b), lambda g: (g * bd, g * ad), "mul")


def sum_all(x):
    x = as_tensor(x)
    shape = x.shape
    total = np.sum(x.data, dtype=np.float64).astype(x.dtype).reshape(1, 1, 1, 1)
    return make_result(total, (x,), lambda g: (np.full(shape, g.reshape(()), dtype=x.dtype),), "sum")


def scale(x, factor):
    x = as_tensor(x)
    return make_result(x.data * factor, (x,), lambda g: (g * factor,), "scale")


def parameter(data, name=None, dtype=None):
    return Tensor(np.array(data, dtype=dtype or default_dtype()), requires_grad=True, name=name)
