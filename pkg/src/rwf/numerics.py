"""Dense numerical building blocks shared by every other module.

Matrices are plain ``numpy.ndarray`` objects. Row-wise kernels accept arrays
with any number of leading batch axes and act on the last axis.
"""

import math
from dataclasses import dataclass, field

import numpy as np

from . import kernels


class NonFiniteError(FloatingPointError):
    """Raised when an operation would produce or consume NaN/Inf."""


def check_finite(x, what="value"):
    if not np.all(np.isfinite(x)):
        raise NonFiniteError(f"non-finite entries in {what}")
    return x


def matmul(a, b):
    a = np.asarray(a)
    b = np.asarray(b)
    if a.shape[-1] != b.shape[-2 if b.ndim > 1 else 0]:
        raise ValueError(f"matmul dimension mismatch: {a.shape} x {b.shape}")
    return check_finite(a @ b, "matmul result")


def _rows(x):
    x = np.ascontiguousarray(x)
    return x.reshape(-1, x.shape[-1])


def row_softmax(scores, scale=1.0):
    """Softmax of ``scale * scores`` along the last axis (max-shifted)."""
    if not scale > 0:
        raise ValueError("softmax scale must be positive")
    scores = np.asarray(scores)
    check_finite(scores, "softmax input")
    if scores.shape[-1] == 0:
        return np.zeros_like(scores)
    out = kernels.softmax_rows(_rows(scale * scores))
    return out.reshape(scores.shape)


def layer_norm(x, gain, bias, eps=1e-5, return_cache=False):
    x = np.asarray(x)
    d = x.shape[-1]
    if gain.shape != (d,) or bias.shape != (d,):
        raise ValueError(f"layer_norm expects gain/bias of length {d}")
    if not eps > 0:
        raise ValueError("eps must be positive")
    y, xhat, inv_std = kernels.layer_norm_rows(_rows(x), gain, bias, eps)
    y = y.reshape(x.shape)
    if return_cache:
        return y, (xhat, inv_std, gain)
    return y


def layer_norm_backward(dy, cache):
    """Returns (dx, dgain, dbias) for a :func:`layer_norm` call."""
    xhat, inv_std, gain = cache
    dy2 = _rows(dy)
    dx = kernels.layer_norm_backward_rows(dy2, xhat, inv_std, gain)
    return dx.reshape(dy.shape), (dy2 * xhat).sum(axis=0), dy2.sum(axis=0)


def _as_mask(mask, n_classes):
    if mask is None:
        return np.ones(n_classes, dtype=bool)
    mask = np.asarray(mask)
    if mask.dtype == bool:
        if mask.shape != (n_classes,):
            raise ValueError("class mask length does not match logits")
        return mask
    out = np.zeros(n_classes, dtype=bool)
    out[mask.astype(np.int64)] = True
    return out


def masked_logits(logits, mask):
    """Masked-out classes become -inf."""
    keep = _as_mask(mask, logits.shape[-1])
    return np.where(keep, logits, -np.inf)


def cross_entropy_with_grad(logits, labels, mask=None):
    """Mean NLL over the batch and its gradient w.r.t. ``logits``.

    ``mask`` is a boolean vector over classes or a list of allowed class ids.
    Masked classes get zero probability and zero gradient.
    """
    logits = check_finite(np.asarray(logits), "logits")
    labels = np.asarray(labels, dtype=np.int64)
    if logits.ndim != 2 or labels.shape != (logits.shape[0],):
        raise ValueError("need one label per logits row")
    keep = _as_mask(mask, logits.shape[1])
    if np.any(labels < 0) or np.any(labels >= logits.shape[1]) or not np.all(keep[labels]):
        raise ValueError("label outside the unmasked class set")
    z = np.where(keep, logits, -np.inf)
    zmax = z.max(axis=1, keepdims=True)
    e = np.where(keep, np.exp(z - zmax), 0.0)
    s = e.sum(axis=1, keepdims=True)
    log_z = zmax[:, 0] + np.log(s[:, 0])
    n = logits.shape[0]
    rows = np.arange(n)
    loss = float(np.mean(log_z - logits[rows, labels]))
    grad = e / s
    grad[rows, labels] -= 1.0
    grad /= n
    return loss, grad


def cross_entropy(logits, labels, mask=None):
    return cross_entropy_with_grad(logits, labels, mask)[0]


def logsumexp(x):
    x = np.asarray(x, dtype=np.float64)
    mx = x.max()
    return float(mx + np.log(np.exp(x - mx).sum()))


def gelu(x):
    c = math.sqrt(2.0 / math.pi)
    return 0.5 * x * (1.0 + np.tanh(c * (x + 0.044715 * x**3)))


def gelu_grad(x):
    c = math.sqrt(2.0 / math.pi)
    t = np.tanh(c * (x + 0.044715 * x**3))
    return 0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * c * (1.0 + 3 * 0.044715 * x * x)


@dataclass
class AdamMoments:
    m: np.ndarray
    v: np.ndarray
    t: int = 0

    @classmethod
    def zeros_like(cls, param):
        return cls(np.zeros_like(param), np.zeros_like(param), 0)


def adam_step(param, grad, moments, lr=1e-3, beta1=0.9, beta2=0.999, eps=1e-8):
    """Bias-corrected Adam update, in place on ``param`` and ``moments``."""
    if param.shape != grad.shape or moments.m.shape != param.shape:
        raise ValueError(f"adam shape mismatch: {param.shape} vs {grad.shape}")
    moments.t += 1
    moments.m *= beta1
    moments.m += (1.0 - beta1) * grad
    moments.v *= beta2
    moments.v += (1.0 - beta2) * grad * grad
    m_hat = moments.m / (1.0 - beta1**moments.t)
    v_hat = moments.v / (1.0 - beta2**moments.t)
    param -= lr * m_hat / (np.sqrt(v_hat) + eps)
    return param


def finite_diff_grad(f, x, eps=1e-5):
    """Central-difference gradient of scalar ``f`` at vector ``x`` (64-bit)."""
    x = np.array(x, dtype=np.float64).ravel()
    g = np.empty_like(x)
    for i in range(x.size):
        old = x[i]
        x[i] = old + eps
        fp = f(x)
        x[i] = old - eps
        fm = f(x)
        x[i] = old
        if not (np.isfinite(fp) and np.isfinite(fm)):
            raise NonFiniteError(f"f is non-finite near coordinate {i}")
        g[i] = (fp - fm) / (2.0 * eps)
    return g


@dataclass
class RngStream:
    """Seeded Philox (counter-based) generator with named child streams."""

    seed: int
    key: tuple = ()
    generator: np.random.Generator = field(init=False, repr=False)

    def __post_init__(self):
        ss = np.random.SeedSequence(int(self.seed) & (2**64 - 1), spawn_key=self.key)
        self.generator = np.random.Generator(np.random.Philox(ss))

    def child(self, *key):
        """Independent stream keyed by small non-negative integers."""
        return RngStream(self.seed, self.key + tuple(int(k) for k in key))

    def normal(self, shape, std=1.0):
        if std < 0:
            raise ValueError("std must be non-negative")
        draw = self.generator.standard_normal(shape)
        return np.zeros(shape) if std == 0 else draw * std

    def permutation(self, n):
        return self.generator.permutation(n)


def rng_normal(rng, rows, cols, std=1.0):
    """rows x cols i.i.d. N(0, std^2) draws from ``rng``."""
    return rng.normal((rows, cols), std)
