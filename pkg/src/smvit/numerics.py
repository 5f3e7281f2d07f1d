"""Dense float64 primitives with hand-derived backward passes.

Every forward op works on the last axis (or last two axes for matmul), so the
same code serves single matrices and batched ``(..., rows, cols)`` stacks.
Backward functions take the cache returned by the matching forward call.
"""

from __future__ import annotations

import numpy as np
from scipy.special import erf

_SQRT2 = np.sqrt(2.0)
_INV_SQRT_2PI = 1.0 / np.sqrt(2.0 * np.pi)


class DimensionError(ValueError):
    """Operand shapes are incompatible."""


class BackwardStateError(RuntimeError):
    """A backward pass was requested without a recorded forward pass."""


def _require(cache, op):
    if cache is None:
        raise BackwardStateError(f"{op} backward called before forward")
    return cache


def matmul(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul shape mismatch: {a.shape} x {b.shape}")
    return np.matmul(a, b)


def matmul_backward(dout, a, b):
    """Gradients of ``a @ b``; batch axes broadcast onto ``b`` are summed out."""
    da = np.matmul(dout, np.swapaxes(b, -1, -2))
    db = np.matmul(np.swapaxes(a, -1, -2), dout)
    if db.ndim > b.ndim:
        db = db.reshape(-1, *b.shape).sum(axis=0)
    return da, db


def softmax_rows(x: np.ndarray) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    e = x - x.max(axis=-1, keepdims=True)
    np.exp(e, out=e)
    e /= e.sum(axis=-1, keepdims=True)
    return e


def softmax_rows_backward(dy, y):
    _require(y, "softmax_rows")
    dy_y = dy * y
    dx = dy - dy_y.sum(axis=-1, keepdims=True)
    dx *= y
    return dx


def layer_norm(x, gamma, beta, eps=1e-6):
    """Row standardization followed by an affine map.

    Returns ``(out, cache)``.
    """
    x = np.asarray(x, dtype=np.float64)
    if gamma.shape[-1] != x.shape[-1] or beta.shape[-1] != x.shape[-1]:
        raise DimensionError(
            f"layer_norm: gamma {gamma.shape} / beta {beta.shape} vs input {x.shape}"
        )
    mu = x.mean(axis=-1, keepdims=True)
    xc = x - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    rstd = 1.0 / np.sqrt(var + eps)
    xhat = xc * rstd
    return xhat * gamma + beta, (xhat, rstd, gamma)


def layer_norm_backward(dout, cache):
    """Returns ``(dx, dgamma, dbeta)``."""
    xhat, rstd, gamma = _require(cache, "layer_norm")
    d = xhat.shape[-1]
    flat = (-1, d)
    dgamma = (dout * xhat).reshape(flat).sum(axis=0)
    dbeta = dout.reshape(flat).sum(axis=0)
    g = dout * gamma
    dx = rstd * (
        g
        - g.mean(axis=-1, keepdims=True)
        - xhat * (g * xhat).mean(axis=-1, keepdims=True)
    )
    return dx, dgamma, dbeta


def gelu(x: np.ndarray) -> np.ndarray:
    """Exact GELU, ``x * Phi(x)``."""
    x = np.asarray(x, dtype=np.float64)
    return 0.5 * x * (1.0 + erf(x / _SQRT2))


def gelu_backward(dout, x):
    _require(x, "gelu")
    cdf = 0.5 * (1.0 + erf(x / _SQRT2))
    pdf = _INV_SQRT_2PI * np.exp(-0.5 * x * x)
    return dout * (cdf + x * pdf)


def cross_entropy(logits: np.ndarray, labels) -> float:
    """Mean negative log-likelihood of ``labels`` under ``softmax(logits)``."""
    logits = np.asarray(logits, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64)
    n, k = logits.shape
    if labels.shape != (n,):
        raise DimensionError(f"cross_entropy: {labels.shape} labels for {n} rows")
    if labels.size and (labels.min() < 0 or labels.max() >= k):
        raise IndexError(f"label out of range [0, {k})")
    m = logits.max(axis=1, keepdims=True)
    lse = m[:, 0] + np.log(np.exp(logits - m).sum(axis=1))
    return float(np.mean(lse - logits[np.arange(n), labels]))


def cross_entropy_backward(logits, labels):
    """Gradient of the mean cross-entropy with respect to the logits."""
    _require(logits, "cross_entropy")
    n = logits.shape[0]
    g = softmax_rows(logits)
    g[np.arange(n), labels] -= 1.0
    return g / n


def linear(x, w, b=None):
    out = matmul(x, w)
    if b is not None:
        out = out + b
    return out


def linear_backward(dout, x, w, with_bias=True):
    """Returns ``(dx, dw, db)``; ``db`` is None when ``with_bias`` is false."""
    _require(x, "linear")
    dx, dw = matmul_backward(dout, x, w)
    db = dout.reshape(-1, dout.shape[-1]).sum(axis=0) if with_bias else None
    return dx, dw, db
