"""Dense float64 kernels used by the PCR reduction and the Newton loop.

Matrices and vectors are plain ``numpy`` arrays. Every kernel accepts
leading batch axes (``(..., m, k)`` for matrices, ``(..., k)`` for vectors)
so that all rows of a reduction step can be processed in one call.

Products are accumulated in a fixed order (``k = 0, 1, ...``) with separate
multiply and add, which makes them bit-for-bit equal to a naive triple loop
and independent of BLAS threading, FMA usage, or how the batch is split
between workers.
"""

import numpy as np

__all__ = [
    "ShapeError",
    "as_matrix",
    "as_vector",
    "matmul",
    "matvec",
    "outer",
    "norm_inf",
    "norm_l2",
    "axpy",
    "diag_from",
]


class ShapeError(ValueError):
    """Raised when operand dimensions do not conform."""


def as_matrix(a):
    a = np.asarray(a, dtype=np.float64)
    if a.ndim < 2 or a.shape[-1] < 1 or a.shape[-2] < 1:
        raise ShapeError(f"expected a non-empty matrix, got shape {a.shape}")
    return a


def as_vector(x):
    x = np.asarray(x, dtype=np.float64)
    if x.ndim < 1:
        raise ShapeError(f"expected a vector, got shape {x.shape}")
    return x


def matmul(a, b, out=None):
    """Matrix product ``a @ b`` with batch broadcasting."""
    a = as_matrix(a)
    b = as_matrix(b)
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: {a.shape} x {b.shape}")
    shape = np.broadcast_shapes(a.shape[:-2], b.shape[:-2]) + (a.shape[-2], b.shape[-1])
    if out is None:
        out = np.zeros(shape)
    else:
        out[...] = 0.0
    for p in range(a.shape[-1]):
        out += a[..., :, p, None] * b[..., None, p, :]
    return out


def matvec(a, x, out=None):
    """Matrix-vector product with batch broadcasting."""
    a = as_matrix(a)
    x = as_vector(x)
    if a.shape[-1] != x.shape[-1]:
        raise ShapeError(f"matvec: {a.shape} x {x.shape}")
    shape = np.broadcast_shapes(a.shape[:-2], x.shape[:-1]) + (a.shape[-2],)
    if out is None:
        out = np.zeros(shape)
    else:
        out[...] = 0.0
    for p in range(a.shape[-1]):
        out += a[..., :, p] * x[..., p, None]
    return out


def outer(u, v):
    u = as_vector(u)
    v = as_vector(v)
    return u[..., :, None] * v[..., None, :]


def norm_inf(x):
    x = np.asarray(x, dtype=np.float64)
    if x.size == 0:
        return 0.0
    return float(np.max(np.abs(x)))


def norm_l2(x):
    x = np.asarray(x, dtype=np.float64)
    return float(np.sqrt(np.sum(x * x)))


def axpy(alpha, x, y):
    """Return ``alpha * x + y``."""
    x = as_vector(x)
    y = as_vector(y)
    if x.shape != y.shape:
        raise ShapeError(f"axpy: {x.shape} vs {y.shape}")
    return alpha * x + y


def diag_from(values):
    values = as_vector(values)
    n = values.shape[-1]
    out = np.zeros(values.shape + (n,))
    idx = np.arange(n)
    out[..., idx, idx] = values
    return out
