"""
Reverse-mode automatic differentiation over dense float64 arrays.

A Tensor wraps a numpy array. Tensors produced by an op keep a reference to
the Function node that created them; the nodes form the tape that
`backward` walks in reverse topological order. Leaves that require
gradients are Parameters, which own a persistent `.grad` buffer that
gradients are accumulated (+=) into.
"""

import numpy as np
from django.conf import settings

from koopman.exceptions import NonFiniteGradient, NonFiniteValue


class Tensor:
    """Dense float64 array that records the op that produced it."""

    def __init__(self, data, requires_grad=False, _ctx=None):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = requires_grad
        self._ctx = _ctx

    def __repr__(self):
        return f"<Tensor shape={self.shape} requires_grad={self.requires_grad}>"

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
        from koopman.autodiff import ops
        return ops.transpose(self)

    def numpy(self):
        return self.data

    def item(self):
        return float(self.data)

    def detach(self):
        return Tensor(self.data.copy())

    def backward(self):
        backward(self)

    # Operator sugar maps onto the functional ops.
    def __add__(self, other):
        from koopman.autodiff import ops
        return ops.add(self, other)

    def __radd__(self, other):
        from koopman.autodiff import ops
        return ops.add(other, self)

    def __sub__(self, other):
        from koopman.autodiff import ops
        return ops.sub(self, other)

    def __rsub__(self, other):
        from koopman.autodiff import ops
        return ops.sub(other, self)

    def __mul__(self, other):
        from koopman.autodiff import ops
        if np.isscalar(other):
            return ops.scale(self, other)
        return ops.mul(self, other)

    def __rmul__(self, other):
        return self.__mul__(other)

    def __neg__(self):
        from koopman.autodiff import ops
        return ops.scale(self, -1.0)

    def __matmul__(self, other):
        from koopman.autodiff import ops
        return ops.matmul(self, other)

    def __rmatmul__(self, other):
        from koopman.autodiff import ops
        return ops.matmul(other, self)

    def __getitem__(self, index):
        from koopman.autodiff import ops
        return ops.slice(self, index)


class Parameter(Tensor):
    """Named trainable leaf with an accumulating gradient buffer."""

    def __init__(self, name, data):
        super().__init__(np.array(data, dtype=np.float64), requires_grad=True)
        self.name = name
        self.grad = np.zeros_like(self.data)

    def __repr__(self):
        return f"<Parameter {self.name} shape={self.shape}>"

    def zero_grad(self):
        self.grad = np.zeros_like(self.data)

    def assign(self, value):
        value = np.asarray(value, dtype=np.float64)
        if value.shape != self.data.shape:
            raise ValueError(
                f"Shape mismatch for parameter '{self.name}': "
                f"expected {self.data.shape}, got {value.shape}"
            )
        self.data = value.copy()
        self.grad = np.zeros_like(self.data)


def as_tensor(value):
    """Wrap arrays and scalars as constant tensors; pass tensors through."""
    if isinstance(value, Tensor):
        return value
    return Tensor(value)


class Function:
    """
    A node on the tape.

    Subclasses implement `forward` on raw arrays (saving whatever the
    backward rule needs on `self`) and `backward`, which maps the gradient
    of the output to one gradient per parent (None where not needed).
    """

    def __init__(self, *parents):
        self.parents = parents

    @classmethod
    def apply(cls, *inputs, **kwargs):
        tensors = [as_tensor(value) for value in inputs]
        ctx = cls(*tensors)
        out = ctx.forward(*[t.data for t in tensors], **kwargs)
        requires_grad = any(t.requires_grad for t in tensors)
        result = Tensor(out, requires_grad=requires_grad, _ctx=ctx if requires_grad else None)
        if settings.KALIKO_AUTODIFF_DEBUG and not np.all(np.isfinite(result.data)):
            raise NonFiniteValue(f"{cls.__name__} produced a non-finite value")
        return result

    def forward(self, *args, **kwargs):
        raise NotImplementedError

    def backward(self, grad):
        raise NotImplementedError


def _topological_order(root):
    """Nodes reachable from root that require grad, parents before children."""
    order = []
    visited = set()
    stack = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in visited:
            continue
        visited.add(id(node))
        stack.append((node, True))
        if node._ctx is not None:
            for parent in node._ctx.parents:
                if parent.requires_grad and id(parent) not in visited:
                    stack.append((parent, False))
    return order


def backward(loss):
    """
    Accumulate d(loss)/d(parameter) into every Parameter reachable from loss.

    Intermediate gradients live only for the duration of the call, so the
    same tape can be replayed. Parameters not reachable keep their current
    (normally zeroed) gradient.
    """
    if loss.size != 1:
        raise ValueError(f"backward() needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        return

    order = _topological_order(loss)
    grads = {id(loss): np.ones_like(loss.data)}
    reached = []

    for node in reversed(order):
        grad = grads.pop(id(node), None)
        if grad is None:
            continue
        if node._ctx is None:
            if isinstance(node, Parameter):
                node.grad += grad
                reached.append(node)
            continue
        parent_grads = node._ctx.backward(grad)
        for parent, parent_grad in zip(node._ctx.parents, parent_grads):
            if parent_grad is None or not parent.requires_grad:
                continue
            key = id(parent)
            if key in grads:
                grads[key] = grads[key] + parent_grad
            else:
                grads[key] = parent_grad

    for parameter in reached:
        if not np.all(np.isfinite(parameter.grad)):
            raise NonFiniteGradient(parameter.name)
