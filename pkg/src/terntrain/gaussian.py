"""Standard-normal and upper-truncated Gaussian primitives.

Everything here is scalar 64-bit math. The truncated upper-tail mean is the
per-layer scale of the ternarizer, and its derivative is what makes the
threshold trainable, so both must stay finite, positive and monotone well
past the clip range used in training.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

INV_SQRT_2PI = 1.0 / math.sqrt(2.0 * math.pi)

_SQRT2 = math.sqrt(2.0)
# The erfc-based hazard ratio is accurate until erfc underflows; switch to
# the tail expansion well before that instead of dividing vanishing numbers.
_MILLS_TAIL_CUTOFF = 30.0


@dataclass(frozen=True)
class TruncGaussParams:
    """Parameters of a Gaussian truncated to the upper tail (x > mu + delta_c).

    The upper truncation bound is always +infinity and is handled
    symbolically, never as a large finite stand-in.
    """

    mu: float
    sigma: float
    delta_c: float

    def __post_init__(self):
        if not self.sigma > 0.0:
            raise ValueError(f"sigma must be positive, got {self.sigma}")
        if not 0.0 <= self.delta_c <= 3.0 * self.sigma:
            raise ValueError(
                f"delta_c must lie in [0, 3*sigma], got {self.delta_c} "
                f"with sigma={self.sigma}"
            )


def std_normal_pdf(x: float) -> float:
    """Density of N(0, 1) at x."""
    return INV_SQRT_2PI * math.exp(-0.5 * x * x)


def std_normal_cdf(x: float) -> float:
    """Distribution function of N(0, 1).

    Computed from the C library erfc, a rational approximation with
    absolute error below 1e-15, comfortably inside the 1e-9 budget. The
    branch on the sign keeps full relative accuracy in both tails instead
    of cancelling against 1.
    """
    if x < 0.0:
        return 0.5 * math.erfc(-x / _SQRT2)
    return 1.0 - 0.5 * math.erfc(x / _SQRT2)


def inverse_mills(alpha: float) -> float:
    """Hazard ratio m(alpha) = pdf(alpha) / (1 - cdf(alpha)) of N(0, 1).

    Strictly positive, strictly increasing, and > alpha everywhere. The
    survival probability is evaluated through erfc so the ratio is stable on
    the whole training range; far in the upper tail the asymptotic expansion
    alpha + 1/alpha - 2/alpha**3 takes over.
    """
    if alpha > _MILLS_TAIL_CUTOFF:
        inv = 1.0 / alpha
        return alpha + inv - 2.0 * inv * inv * inv
    survival = 0.5 * math.erfc(alpha / _SQRT2)
    return std_normal_pdf(alpha) / survival


def truncated_upper_mean(p: TruncGaussParams) -> float:
    """Mean of N(mu, sigma^2) conditioned on x > mu + delta_c.

    Always exceeds mu + delta_c: the conditional mean lies beyond the
    truncation point.
    """
    return p.mu + p.sigma * inverse_mills(p.delta_c / p.sigma)


def d_truncated_mean_d_delta(p: TruncGaussParams) -> float:
    """Derivative of the truncated mean with respect to delta_c.

    Equals m(a) * (m(a) - a) with a = delta_c / sigma, which lies in (0, 1)
    for every finite a; sigma cancels.
    """
    alpha = p.delta_c / p.sigma
    m = inverse_mills(alpha)
    return m * (m - alpha)


def hardtanh(x: float, j: float, k: float) -> float:
    """Clip x to [j, k]."""
    if j > k:
        raise ValueError(f"hardtanh bounds out of order: j={j} > k={k}")
    return max(j, min(x, k))


def hardtanh_grad(x: float, j: float, k: float) -> float:
    """Sub-gradient of hardtanh: 1 strictly inside (j, k), else 0.

    The boundary points themselves count as clipped.
    """
    if j > k:
        raise ValueError(f"hardtanh bounds out of order: j={j} > k={k}")
    return 1.0 if j < x < k else 0.0


def clip_threshold(delta: float, sigma: float) -> float:
    """Clipped threshold hardtanh(|delta|, 0, 3*sigma)."""
    if not sigma > 0.0:
        raise ValueError(f"sigma must be positive, got {sigma}")
    return hardtanh(abs(delta), 0.0, 3.0 * sigma)


def clip_threshold_grad(delta: float, sigma: float) -> float:
    """d clip_threshold / d delta: the hardtanh sub-gradient times sign(delta)."""
    if not sigma > 0.0:
        raise ValueError(f"sigma must be positive, got {sigma}")
    g = hardtanh_grad(abs(delta), 0.0, 3.0 * sigma)
    return g * math.copysign(1.0, delta) if delta != 0.0 else 0.0
