"""Discrete channel models.

Two kinds of machinery live here: exact sampling channels used for
evaluation (bit flips, erasures) and the differentiable perturbed-Bernoulli
relaxations used during training, including the gradient-weighted per-bit
noise allocation for the adversarial channel.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .autodiff import Tensor

CHANNEL_KINDS = ("bsc", "bec", "adversarial")


@dataclass(frozen=True)
class ChannelSpec:
    """Channel family plus noise level; epsilon is restricted to [0, 0.5]."""

    kind: str
    epsilon: float

    def __post_init__(self):
        if self.kind not in CHANNEL_KINDS:
            raise ValueError(f"unknown channel kind {self.kind!r}; expected one of {CHANNEL_KINDS}")
        _check_epsilon(self.epsilon)


def _check_epsilon(epsilon: float):
    if not (0.0 <= epsilon <= 0.5):
        raise ValueError(f"epsilon must lie in [0, 0.5], got {epsilon}")


def bsc_corrupt(bits: np.ndarray, epsilon: float, rng: np.random.Generator) -> np.ndarray:
    """Flip each bit independently with probability epsilon."""
    _check_epsilon(epsilon)
    bits = np.asarray(bits)
    if epsilon == 0.0:
        return bits.copy()
    flips = rng.random(bits.shape) < epsilon
    return np.where(flips, 1.0 - bits, bits).astype(bits.dtype)


def bec_corrupt(bits: np.ndarray, epsilon: float, rng: np.random.Generator):
    """Erase each bit independently with probability epsilon.

    Returns (bits, erased) where `erased` is a boolean mask; surviving bits
    are transmitted unchanged.
    """
    _check_epsilon(epsilon)
    bits = np.asarray(bits)
    if epsilon == 0.0:
        return bits.copy(), np.zeros(bits.shape, dtype=bool)
    erased = rng.random(bits.shape) < epsilon
    return bits.copy(), erased


def perturbed_bernoulli(probs, epsilon: float):
    """Bit-flip noise folded into the Bernoulli parameters: p' = p(1-2e) + e.

    Works on plain arrays and on Tensors (differentiable w.r.t. p). Sampling
    from p' has the same per-bit marginal as sampling from p and then passing
    the bits through a flip channel at rate epsilon.
    """
    _check_epsilon(epsilon)
    if isinstance(probs, Tensor):
        return probs * (1.0 - 2.0 * epsilon) + epsilon
    probs = np.asarray(probs)
    return probs * probs.dtype.type(1.0 - 2.0 * epsilon) + probs.dtype.type(epsilon)


def allocate_adversarial_noise(grad_magnitudes, epsilon: float, mask) -> np.ndarray:
    """Split the total noise budget M*epsilon across bits by gradient size.

    Per codeword, bit i receives noise proportional to its gradient magnitude,
    subject to 0 <= eps_i <= 1. Entries that would exceed 1 are pinned there
    and the excess is re-split proportionally among the remaining bits until
    stable, so the pre-mask total stays at M*epsilon. Rows whose magnitudes
    are all zero fall back to the uniform allocation eps_i = epsilon. The
    attack mask is applied last: eps_i* = eps_i * m_i.

    Accepts a single length-M vector or an (N, M) batch; returns float64 with
    the same shape.
    """
    _check_epsilon(epsilon)
    mag = np.asarray(grad_magnitudes, dtype=np.float64)
    if not np.all(np.isfinite(mag)):
        raise ValueError("gradient magnitudes must be finite")
    if np.any(mag < 0):
        raise ValueError("gradient magnitudes must be non-negative")
    mask_arr = np.asarray(mask, dtype=np.float64)
    if mask_arr.shape != mag.shape:
        raise ValueError(f"mask shape {mask_arr.shape} != magnitudes shape {mag.shape}")

    single = mag.ndim == 1
    rows = mag.reshape(1, -1) if single else mag
    out = np.empty_like(rows)
    bits = rows.shape[1]
    for r in range(rows.shape[0]):
        out[r] = _allocate_row(rows[r], epsilon, bits)
    out = out * (mask_arr.reshape(rows.shape))
    return out[0] if single else out


def _allocate_row(mag: np.ndarray, epsilon: float, bits: int) -> np.ndarray:
    if mag.sum() == 0.0:
        return np.full(bits, epsilon, dtype=np.float64)
    out = np.zeros(bits, dtype=np.float64)
    free = np.ones(bits, dtype=bool)
    budget = bits * epsilon
    while True:
        weights = mag[free]
        total = weights.sum()
        if total == 0.0:
            # Residual budget with only zero-gradient bits left: spread evenly.
            out[free] = budget / free.sum()
            return out
        proposal = budget * weights / total
        over = proposal > 1.0
        if not over.any():
            out[free] = proposal
            return out
        idx = np.flatnonzero(free)[over]
        out[idx] = 1.0
        free[idx] = False
        budget -= idx.size
        if not free.any():
            return out


def adversarial_perturbed_bernoulli(probs, allocation):
    """Per-bit noise version of the flip relaxation: p'_i = p_i(1-2e_i*) + e_i*."""
    if isinstance(probs, Tensor):
        alloc = np.asarray(allocation, dtype=probs.data.dtype)
        if alloc.shape != probs.data.shape:
            raise ValueError(f"allocation shape {alloc.shape} != probs shape {probs.data.shape}")
        return probs * (1.0 - 2.0 * alloc) + alloc
    probs = np.asarray(probs)
    alloc = np.asarray(allocation, dtype=probs.dtype)
    if alloc.shape != probs.shape:
        raise ValueError(f"allocation shape {alloc.shape} != probs shape {probs.shape}")
    return probs * (1.0 - 2.0 * alloc) + alloc
