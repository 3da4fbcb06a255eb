"""Per-layer weight ternarization with a trainable threshold.

A layer's weights are mapped to codes in {-1, 0, +1} around their mean,
scaled by the closed-form mean of the Gaussian tail beyond the threshold.
Two gradient wirings exist: the threshold phase differentiates the scale
with respect to the threshold while the codes stay frozen, and the weight
phase routes gradients through the staircase with a 1/scale correction so
the composite derivative of the effective weight w.r.t. the float weight
is exactly one.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .autograd import Tensor, register_custom_grad, scale_by, smul
from .gaussian import (
    TruncGaussParams,
    clip_threshold,
    clip_threshold_grad,
    d_truncated_mean_d_delta,
    truncated_upper_mean,
)

WEIGHT_PHASE = "weight-phase"
THRESHOLD_PHASE = "threshold-phase"


class DegenerateLayerError(ValueError):
    """Layer statistics unusable: zero spread (all weights equal) or too few weights."""


@dataclass
class QuantizerState:
    """Trainable threshold plus cached per-layer statistics and scale.

    mu/sigma/delta_c/scale are caches refreshed from the current weights;
    delta is the trainable parameter and is never touched by refresh().
    """

    delta: float
    mu: float = float("nan")
    sigma: float = float("nan")
    delta_c: float = float("nan")
    scale: float = float("nan")


@dataclass
class TernaryCodes:
    """Codes in {-1, 0, +1} plus the scale that reconstitutes effective weights."""

    codes: np.ndarray  # int8
    scale: float

    def effective(self) -> np.ndarray:
        return self.scale * self.codes.astype(np.float64)


def layer_stats(w: np.ndarray) -> tuple[float, float]:
    """Mean and population standard deviation of a weight array."""
    w = np.asarray(w, dtype=np.float64)
    if w.size < 2:
        raise DegenerateLayerError(f"layer needs at least 2 weights, got {w.size}")
    return float(w.mean()), float(w.std())


def tern(w: np.ndarray, mu: float, delta_c: float) -> np.ndarray:
    """Elementwise ternary codes; the band [mu-delta_c, mu+delta_c] is inclusive."""
    if delta_c < 0:
        raise ValueError(f"delta_c must be non-negative, got {delta_c}")
    w = np.asarray(w, dtype=np.float64)
    codes = np.zeros(w.shape)
    codes[w > mu + delta_c] = 1.0
    codes[w < mu - delta_c] = -1.0
    return codes


def refresh(state: QuantizerState, w: np.ndarray) -> QuantizerState:
    """Recompute mu, sigma, delta_c and scale from the current weights.

    delta is left unchanged. Raises DegenerateLayerError when the weights
    have zero spread, since no Gaussian fit exists then.
    """
    mu, sigma = layer_stats(w)
    if sigma <= 0.0:
        raise DegenerateLayerError("all weights equal: sigma is 0, no scale is defined")
    state.mu = mu
    state.sigma = sigma
    state.delta_c = clip_threshold(state.delta, sigma)
    state.scale = truncated_upper_mean(TruncGaussParams(mu, sigma, state.delta_c))
    return state


def is_fresh(state: QuantizerState, w: np.ndarray, rtol: float = 1e-9) -> bool:
    """Whether the cached statistics match the weights they claim to describe."""
    try:
        mu, sigma = layer_stats(w)
    except DegenerateLayerError:
        return False
    tol = rtol * max(1.0, abs(mu), sigma)
    return abs(mu - state.mu) <= tol and abs(sigma - state.sigma) <= tol


def assert_fresh(state: QuantizerState, w: np.ndarray) -> None:
    assert is_fresh(state, w), (
        "stale quantizer state: cached mu/sigma do not match the weights; "
        "call refresh() after any weight update"
    )


def ste_codes_node(w: Tensor, state: QuantizerState, grad_correctness: bool = True) -> Tensor:
    """Tern(w) as a tape node with the straight-through backward rule.

    With grad_correctness the backward multiplies incoming gradients by
    1/scale, so scale * Tern(w) differentiates to exactly 1 w.r.t. w;
    without it the staircase passes gradients through unchanged.
    """
    factor = 1.0 / state.scale if grad_correctness else 1.0
    mu, delta_c = state.mu, state.delta_c
    op = register_custom_grad(
        lambda arr: tern(arr, mu, delta_c),
        lambda g, arr: (g * factor,),
    )
    return op(w)


def threshold_scale_node(delta_leaf: Tensor, state: QuantizerState) -> Tensor:
    """The scale as a tape function of the threshold, with mu/sigma frozen.

    Composes |delta| clipped to [0, 3*sigma] with the truncated-tail mean;
    each stage carries its analytic derivative.
    """
    mu, sigma = state.mu, state.sigma
    clip_op = register_custom_grad(
        lambda d: np.asarray(clip_threshold(float(d), sigma)),
        lambda g, d: (g * clip_threshold_grad(float(d), sigma),),
    )
    mean_op = register_custom_grad(
        lambda dc: np.asarray(truncated_upper_mean(TruncGaussParams(mu, sigma, float(dc)))),
        lambda g, dc: (g * d_truncated_mean_d_delta(TruncGaussParams(mu, sigma, float(dc))),),
    )
    return mean_op(clip_op(delta_leaf))


def forward_quantized(
    w: Tensor,
    state: QuantizerState,
    mode: str,
    grad_correctness: bool = True,
    delta_leaf: Tensor | None = None,
) -> Tensor:
    """Effective weights scale * Tern(w) with phase-dependent gradient wiring.

    weight-phase: the scale is a frozen constant and the staircase backward
    multiplies by 1/scale (or 1 without grad correctness); the threshold
    receives no gradient. threshold-phase: the codes are frozen constants
    and the scale participates in the tape as a function of delta_leaf; the
    weights receive no gradient.
    """
    if __debug__:
        assert_fresh(state, w.data)
    if mode == WEIGHT_PHASE:
        codes = ste_codes_node(w, state, grad_correctness)
        return scale_by(codes, state.scale)
    if mode == THRESHOLD_PHASE:
        if delta_leaf is None:
            delta_leaf = Tensor(np.float64(state.delta), requires_grad=True)
        s = threshold_scale_node(delta_leaf, state)
        codes = Tensor(tern(w.data, state.mu, state.delta_c))
        return smul(s, codes)
    raise ValueError(f"unknown quantization mode {mode!r}")


def codes_from_state(w: np.ndarray, state: QuantizerState) -> TernaryCodes:
    return TernaryCodes(
        codes=tern(w, state.mu, state.delta_c).astype(np.int8),
        scale=state.scale,
    )


def sparsity(codes) -> float:
    """Fraction of zero codes."""
    arr = codes.codes if isinstance(codes, TernaryCodes) else np.asarray(codes)
    if arr.size == 0:
        raise ValueError("sparsity of an empty layer is undefined")
    return float(np.mean(arr == 0))
