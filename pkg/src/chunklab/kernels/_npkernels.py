"""Pure-numpy kernel backend.

Reference implementations of the fused kernels provided by the optional
Cython extension. Both backends share signatures and formulas; reductions
are over the last axis. Matrix multiplication is delegated to BLAS through
``numpy.matmul`` in both backends and therefore has no kernel here.
"""

import numpy as np

SQRT_2_OVER_PI = 0.7978845608028654
GELU_CUBIC = 0.044715
LN_EPS = 1e-5


def layer_norm_fwd(x):
    """Normalize over the last axis (no affine). Returns (y, rstd).

    rstd is kept for the backward pass; y doubles as xhat.
    """
    mean = x.mean(axis=-1, keepdims=True)
    xc = x - mean
    var = np.mean(xc * xc, axis=-1, keepdims=True)
    rstd = 1.0 / np.sqrt(var + LN_EPS)
    return xc * rstd, rstd


def layer_norm_bwd(dy, y, rstd):
    n = y.shape[-1]
    s1 = dy.sum(axis=-1, keepdims=True) / n
    s2 = (dy * y).sum(axis=-1, keepdims=True) / n
    return rstd * (dy - s1 - y * s2)


def gelu_fwd(x):
    """tanh-approximation GELU (smooth everywhere)."""
    inner = SQRT_2_OVER_PI * (x + GELU_CUBIC * x * x * x)
    return 0.5 * x * (1.0 + np.tanh(inner))


def gelu_bwd(x, dy):
    x2 = x * x
    inner = SQRT_2_OVER_PI * (x + GELU_CUBIC * x * x2)
    t = np.tanh(inner)
    dinner = SQRT_2_OVER_PI * (1.0 + 3.0 * GELU_CUBIC * x2)
    return dy * (0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * dinner)


def tanh_fwd(x):
    return np.tanh(x)


def tanh_bwd(y, dy):
    return dy * (1.0 - y * y)


def softmax_fwd(x):
    z = x - x.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def softmax_bwd(p, dy):
    s = (p * dy).sum(axis=-1, keepdims=True)
    return p * (dy - s)


def log_softmax_fwd(x):
    z = x - x.max(axis=-1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=-1, keepdims=True))
    return z - lse


def log_softmax_bwd(lp, dy):
    s = dy.sum(axis=-1, keepdims=True)
    return dy - np.exp(lp) * s
