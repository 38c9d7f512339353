"""The constrained normalized convolution layer.

Raw weights are mapped through softplus to a strictly positive applicability,
the data channel is a confidence-weighted local average and the confidence
channel reuses the same denominator.  ``nc_oracle`` and ``conf_oracle`` solve
the general basis-projection problem for a single patch and serve as
independent references in tests.
"""

from dataclasses import dataclass, field

import numpy as np
from scipy.special import expit

from nconv.tensor import (
    as_tensor4,
    correlate2d,
    correlate2d_grad_input,
    correlate2d_grad_weight,
    seeded_rng,
)

GAMMA_FLOOR = 1e-30
DEFAULT_EPS = 1e-8


class InsufficientSupport(ValueError):
    """Raised when the confidence-weighted Grammian is (numerically) singular."""


def gamma(x):
    """Softplus ``ln(1 + e^x)``, floored at 1e-30 so it stays strictly positive."""
    return np.maximum(np.logaddexp(0.0, x), GAMMA_FLOOR)


def gamma_prime(x):
    return expit(x)


@dataclass
class NConvLayer:
    weights: np.ndarray  # raw, unconstrained; (out_ch, in_ch, kh, kw)
    bias: np.ndarray  # (out_ch,), data path only
    epsilon: float = DEFAULT_EPS

    def __post_init__(self):
        self.weights = np.array(self.weights, dtype=np.float64)
        self.bias = np.array(self.bias, dtype=np.float64).reshape(-1)
        if self.weights.ndim != 4:
            raise ValueError(f"weights must be (out, in, kh, kw), got {self.weights.shape}")
        kh, kw = self.weights.shape[2:]
        if kh % 2 == 0 or kw % 2 == 0:
            raise ValueError(f"kernel dims must be odd, got {kh}x{kw}")
        if self.bias.shape != (self.out_ch,):
            raise ValueError(f"bias must have {self.out_ch} entries, got {self.bias.shape}")
        if self.epsilon < 0:
            raise ValueError("epsilon must be >= 0")

    @classmethod
    def init(cls, in_ch, out_ch, kernel, rng, epsilon=DEFAULT_EPS):
        """Raw weights uniform in [-1, 1], zero bias."""
        kh, kw = (kernel, kernel) if np.isscalar(kernel) else kernel
        w = rng.uniform(-1.0, 1.0, size=(out_ch, in_ch, kh, kw))
        return cls(w, np.zeros(out_ch), epsilon)

    @property
    def in_ch(self):
        return self.weights.shape[1]

    @property
    def out_ch(self):
        return self.weights.shape[0]

    @property
    def kernel(self):
        return self.weights.shape[2:]

    @property
    def applicability(self):
        return gamma(self.weights)

    def n_params(self):
        return self.weights.size + self.bias.size


@dataclass
class LayerCache:
    z_prev: np.ndarray
    c_prev: np.ndarray
    applicability: np.ndarray
    numerator: np.ndarray
    denominator: np.ndarray  # includes epsilon
    total_weight: np.ndarray = field(repr=False)  # per output channel sum of applicability


def nconv_forward(z_prev, c_prev, layer):
    """Normalized convolution of a (data, confidence) pair.

    Returns ``(z, c, cache)``.  Where the denominator is exactly zero (only
    possible with ``epsilon == 0`` and no confident support) the data output
    is the bias alone and the confidence is zero.
    """
    z_prev = as_tensor4(z_prev, "z_prev")
    c_prev = as_tensor4(c_prev, "c_prev")
    if z_prev.shape != c_prev.shape:
        raise ValueError(f"data {z_prev.shape} and confidence {c_prev.shape} shapes differ")
    if z_prev.shape[1] != layer.in_ch:
        raise ValueError(f"layer expects {layer.in_ch} input channels, got {z_prev.shape[1]}")

    a = layer.applicability
    num = correlate2d(z_prev * c_prev, a)
    den = correlate2d(c_prev, a) + layer.epsilon
    total = a.sum(axis=(1, 2, 3))
    support = den > 0
    z = np.divide(num, den, out=np.zeros_like(num), where=support)
    z += layer.bias[None, :, None, None]
    c = den / total[None, :, None, None]
    return z, c, LayerCache(z_prev, c_prev, a, num, den, total)


def nconv_backward(grad_z, grad_c, cache, layer):
    """Exact gradients of :func:`nconv_forward` through both output channels.

    Returns ``(grad_z_prev, grad_c_prev, grad_weights_raw, grad_bias)``.
    """
    grad_z = np.asarray(grad_z, dtype=np.float64)
    grad_c = np.asarray(grad_c, dtype=np.float64)
    den = cache.denominator
    if grad_z.shape != den.shape or grad_c.shape != den.shape:
        raise ValueError(
            f"gradient shapes {grad_z.shape}/{grad_c.shape} do not match forward output {den.shape}"
        )
    if cache.applicability.shape != layer.weights.shape:
        raise ValueError("cache was produced by a layer with a different weight shape")

    a = cache.applicability
    total = cache.total_weight[None, :, None, None]
    support = den > 0
    safe = np.where(support, den, 1.0)

    g_num = np.where(support, grad_z / safe, 0.0)
    g_den = np.where(support, -grad_z * cache.numerator / (safe * safe), 0.0) + grad_c / total
    g_total = -(grad_c * den).sum(axis=(0, 2, 3)) / cache.total_weight ** 2

    g_zc = correlate2d_grad_input(g_num, a, cache.z_prev.shape)
    g_c_from_den = correlate2d_grad_input(g_den, a, cache.c_prev.shape)

    g_a = correlate2d_grad_weight(g_num, cache.z_prev * cache.c_prev, layer.kernel)
    g_a += correlate2d_grad_weight(g_den, cache.c_prev, layer.kernel)
    g_a += g_total[:, None, None, None]

    grad_w = g_a * gamma_prime(layer.weights)
    grad_bias = grad_z.sum(axis=(0, 2, 3))
    grad_z_prev = g_zc * cache.c_prev
    grad_c_prev = g_zc * cache.z_prev + g_c_from_den
    return grad_z_prev, grad_c_prev, grad_w, grad_bias


def _grammian(c, a, B):
    B = np.asarray(B, dtype=np.float64)
    if B.ndim == 1:
        B = B[:, None]
    a = np.asarray(a, dtype=np.float64).reshape(-1)
    c = np.asarray(c, dtype=np.float64).reshape(-1)
    n, m = B.shape
    if a.shape != (n,) or c.shape != (n,):
        raise ValueError(f"patch vectors must have length {n}")
    if m > n:
        raise ValueError(f"basis has {m} columns but patch length is only {n}")
    if np.any(a < 0):
        raise ValueError("applicability must be non-negative")
    BtA = B.T * a
    return B, BtA, BtA @ (c[:, None] * B), BtA @ B


def nc_oracle(f, c, a, B, cond_limit=1e12):
    """Coefficients of ``f`` projected onto the columns of ``B``.

    Solves ``(B* Da Dc B) r = B* Da Dc f`` with a dense solve.  With a single
    constant basis vector this is the confidence-weighted mean of ``f``.
    """
    B, BtA, G, _ = _grammian(c, a, B)
    f = np.asarray(f, dtype=np.float64).reshape(-1)
    c = np.asarray(c, dtype=np.float64).reshape(-1)
    if not np.any(G) or np.linalg.cond(G) > cond_limit:
        raise InsufficientSupport("insufficient confidence support: Grammian is singular")
    return np.linalg.solve(G, BtA @ (c * f))


def conf_oracle(c, a, B):
    """Output certainty ``(det G / det G0) ** (1/m)`` for one patch."""
    B, _, G, G0 = _grammian(c, a, B)
    m = B.shape[1]
    det0 = np.linalg.det(G0)
    if det0 <= 0:
        raise ValueError("degenerate basis/applicability: det(G0) <= 0")
    ratio = max(np.linalg.det(G) / det0, 0.0)
    return ratio ** (1.0 / m)


def random_layer(in_ch, out_ch, kernel, seed, epsilon=DEFAULT_EPS):
    """Convenience constructor used by probes and tests."""
    return NConvLayer.init(in_ch, out_ch, kernel, seeded_rng(seed), epsilon)
