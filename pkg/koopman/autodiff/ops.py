"""
Differentiable ops.

Each op is a Function subclass plus a lowercase functional wrapper. Only the
broadcasting the filter, smoother and decoder need is supported: leading
batch axes for matmul and numpy-style broadcasting for the elementwise ops.
"""

import numpy as np
from scipy.linalg import cho_factor, cho_solve, LinAlgError
from scipy.special import erf

from koopman.autodiff.tensor import Function, Tensor, as_tensor
from koopman.exceptions import SingularMatrix

_SQRT_2 = np.sqrt(2.0)
_INV_SQRT_2PI = 1.0 / np.sqrt(2.0 * np.pi)

# linear_solve refuses pivots smaller than this fraction of the largest diagonal entry
PIVOT_TOLERANCE = 1e-12


def _unbroadcast(grad, shape):
    """Sum a broadcast gradient back down to `shape`."""
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad.reshape(shape)


def _std_normal_pdf(x):
    return _INV_SQRT_2PI * np.exp(-0.5 * x * x)


def _std_normal_cdf(x):
    return 0.5 * (1.0 + erf(x / _SQRT_2))


class Add(Function):
    def forward(self, a, b):
        self.shapes = (a.shape, b.shape)
        return a + b

    def backward(self, grad):
        return _unbroadcast(grad, self.shapes[0]), _unbroadcast(grad, self.shapes[1])


class Sub(Function):
    def forward(self, a, b):
        self.shapes = (a.shape, b.shape)
        return a - b

    def backward(self, grad):
        return _unbroadcast(grad, self.shapes[0]), _unbroadcast(-grad, self.shapes[1])


class Mul(Function):
    def forward(self, a, b):
        self.a, self.b = a, b
        return a * b

    def backward(self, grad):
        return _unbroadcast(grad * self.b, self.a.shape), _unbroadcast(grad * self.a, self.b.shape)


class Scale(Function):
    def forward(self, a, factor):
        self.factor = float(factor)
        return a * self.factor

    def backward(self, grad):
        return (grad * self.factor,)


class MatMul(Function):
    def forward(self, a, b):
        self.a, self.b = a, b
        return a @ b

    def backward(self, grad):
        a, b = self.a, self.b
        a2 = a[None, :] if a.ndim == 1 else a
        b2 = b[:, None] if b.ndim == 1 else b
        g2 = grad
        if a.ndim == 1:
            g2 = np.expand_dims(g2, -2)
        if b.ndim == 1:
            g2 = np.expand_dims(g2, -1)
        grad_a = _unbroadcast(g2 @ np.swapaxes(b2, -1, -2), a2.shape).reshape(a.shape)
        grad_b = _unbroadcast(np.swapaxes(a2, -1, -2) @ g2, b2.shape).reshape(b.shape)
        return grad_a, grad_b


class Transpose(Function):
    def forward(self, a, axes=None):
        self.axes = axes
        return np.transpose(a, axes)

    def backward(self, grad):
        if self.axes is None:
            return (np.transpose(grad),)
        return (np.transpose(grad, np.argsort(self.axes)),)


class Reshape(Function):
    def forward(self, a, shape):
        self.in_shape = a.shape
        return a.reshape(shape)

    def backward(self, grad):
        return (grad.reshape(self.in_shape),)


class Concat(Function):
    def forward(self, *arrays, axis=0):
        self.axis = axis
        self.sizes = [array.shape[axis] for array in arrays]
        return np.concatenate(arrays, axis=axis)

    def backward(self, grad):
        cuts = np.cumsum(self.sizes)[:-1]
        return tuple(np.split(grad, cuts, axis=self.axis))


class Slice(Function):
    def forward(self, a, index):
        self.in_shape = a.shape
        self.index = index
        return a[index]

    def backward(self, grad):
        out = np.zeros(self.in_shape)
        np.add.at(out, self.index, grad)
        return (out,)


class Sum(Function):
    def forward(self, a):
        self.in_shape = a.shape
        return np.sum(a)

    def backward(self, grad):
        return (np.full(self.in_shape, grad),)


class Exp(Function):
    def forward(self, a):
        self.out = np.exp(a)
        return self.out

    def backward(self, grad):
        return (grad * self.out,)


class Diag(Function):
    """Vector to diagonal matrix."""

    def forward(self, v):
        return np.diag(v)

    def backward(self, grad):
        return (np.diagonal(grad).copy(),)


class Gelu(Function):
    """Exact GELU, x * Phi(x)."""

    def forward(self, x):
        self.x = x
        return x * _std_normal_cdf(x)

    def backward(self, grad):
        x = self.x
        return (grad * (_std_normal_cdf(x) + x * _std_normal_pdf(x)),)


class GeluGrad(Function):
    """Derivative of the exact GELU; differentiable so Jacobians can be trained through."""

    def forward(self, x):
        self.x = x
        return _std_normal_cdf(x) + x * _std_normal_pdf(x)

    def backward(self, grad):
        x = self.x
        return (grad * _std_normal_pdf(x) * (2.0 - x * x),)


class Depthwise(Function):
    """
    Per-channel mixing across the slot axis.

    x has shape (..., slots, channels) and weight (channels, slots, slots);
    out[..., i, k] = sum_j weight[k, i, j] * x[..., j, k].
    """

    def forward(self, x, weight):
        self.x, self.weight = x, weight
        return np.einsum('kij,...jk->...ik', weight, x)

    def backward(self, grad):
        grad_x = np.einsum('kij,...ik->...jk', self.weight, grad)
        grad_w = np.einsum('...ik,...jk->kij', grad, self.x, optimize=True)
        return grad_x, grad_w


class LinearSolve(Function):
    """Solve A X = B for symmetric positive-definite A via Cholesky."""

    def forward(self, a, b):
        diag = np.diagonal(a)
        scale = np.max(np.abs(diag)) if diag.size else 0.0
        try:
            factor = cho_factor(a, lower=True, check_finite=False)
        except LinAlgError as exc:
            raise SingularMatrix(f"Cholesky factorization failed: {exc}") from exc
        pivots = np.diagonal(factor[0]) ** 2
        if scale <= 0.0 or np.min(pivots) < PIVOT_TOLERANCE * scale:
            raise SingularMatrix(
                f"Pivot {np.min(pivots):.3e} below {PIVOT_TOLERANCE:g} of largest diagonal {scale:.3e}"
            )
        self.factor = factor
        self.x = cho_solve(factor, b, check_finite=False)
        return self.x

    def backward(self, grad):
        grad_b = cho_solve(self.factor, grad, check_finite=False)
        if self.x.ndim == 1:
            grad_a = -np.outer(grad_b, self.x)
        else:
            grad_a = -grad_b @ self.x.T
        return 0.5 * (grad_a + grad_a.T), grad_b


class Mse(Function):
    def forward(self, a, b):
        self.diff = a - b
        return np.mean(self.diff ** 2)

    def backward(self, grad):
        grad_a = grad * 2.0 * self.diff / self.diff.size
        return _unbroadcast(grad_a, self.diff.shape), _unbroadcast(-grad_a, self.diff.shape)


def add(a, b):
    return Add.apply(a, b)


def sub(a, b):
    return Sub.apply(a, b)


def mul(a, b):
    return Mul.apply(a, b)


def scale(a, factor):
    return Scale.apply(a, factor=factor)


def matmul(a, b):
    return MatMul.apply(a, b)


def transpose(a, axes=None):
    return Transpose.apply(a, axes=axes)


def reshape(a, shape):
    return Reshape.apply(a, shape=shape)


def concat(tensors, axis=0):
    return Concat.apply(*tensors, axis=axis)


def slice(a, index):
    return Slice.apply(a, index=index)


def sum(a):
    return Sum.apply(a)


def exp(a):
    return Exp.apply(a)


def diag(v):
    return Diag.apply(v)


def gelu(x):
    return Gelu.apply(x)


def gelu_grad(x):
    return GeluGrad.apply(x)


def depthwise(x, weight):
    return Depthwise.apply(x, weight)


def linear_solve(a, b):
    return LinearSolve.apply(a, b)


def mse(a, b):
    return Mse.apply(a, b)


def symmetrize(m):
    """(M + M^T) / 2 for a square matrix tensor."""
    return scale(add(m, transpose(m)), 0.5)


def constant(value):
    return Tensor(value)


def eye(n):
    return Tensor(np.eye(n))


__all__ = [
    'add', 'sub', 'mul', 'scale', 'matmul', 'transpose', 'reshape', 'concat', 'slice',
    'sum', 'exp', 'diag', 'gelu', 'gelu_grad', 'depthwise', 'linear_solve', 'mse',
    'symmetrize', 'constant', 'eye', 'as_tensor',
]
