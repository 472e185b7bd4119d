"""Low/high-frequency split and mask-gated detail transfer.

``overlay(I, J, M)`` keeps the low frequencies of the synthesized image ``J``
everywhere, and takes high frequencies from the source ``I`` inside the mask
and from ``J`` outside it.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

log = logging.getLogger(__name__)

DTYPE = np.float32
KERNEL_SIZE = 17
DEFAULT_SIGMA = (KERNEL_SIZE - 1) / 6.0


def gaussian_kernel1d(kernel_size: int = KERNEL_SIZE, sigma: float = DEFAULT_SIGMA) -> np.ndarray:
    if kernel_size < 1 or kernel_size % 2 == 0:
        raise ValueError(f"kernel_size must be a positive odd integer, got {kernel_size}")
    if not sigma > 0:
        raise ValueError(f"sigma must be positive, got {sigma}")
    r = kernel_size // 2
    x = np.arange(-r, r + 1, dtype=np.float64)
    k = np.exp(-0.5 * (x / sigma) ** 2)
    return k / k.sum()


def _blur_axis(a: np.ndarray, k: np.ndarray, axis: int) -> np.ndarray:
    r = len(k) // 2
    pad = [(0, 0)] * a.ndim
    pad[axis] = (r, r)
    p = np.pad(a, pad, mode="symmetric")
    n = a.shape[axis]
    out = np.zeros_like(a)
    for i, w in enumerate(k):
        out += w * np.take(p, np.arange(i, i + n), axis=axis)
    return out


def gaussian_blur(P: np.ndarray, kernel_size: int = KERNEL_SIZE,
                  sigma: float = DEFAULT_SIGMA) -> np.ndarray:
    """Separable, normalised Gaussian with mirrored borders, per channel.

    Accepts ``H x W`` or ``H x W x C``; computed in float64, returned float32.
    """
    k = gaussian_kernel1d(kernel_size, sigma)
    a = np.asarray(P, dtype=np.float64)
    if a.ndim not in (2, 3):
        raise ValueError(f"expected H x W or H x W x C image, got shape {a.shape}")
    out = _blur_axis(_blur_axis(a, k, 0), k, 1)
    return out.astype(DTYPE)


@dataclass
class FrequencyPair:
    low: np.ndarray
    high: np.ndarray


def hf_decompose(P: np.ndarray, kernel_size: int = KERNEL_SIZE,
                 sigma: float = DEFAULT_SIGMA) -> FrequencyPair:
    P = np.asarray(P, dtype=DTYPE)
    low = gaussian_blur(P, kernel_size, sigma)
    return FrequencyPair(low=low, high=P - low)


def _mask3(M: np.ndarray, like: np.ndarray) -> np.ndarray:
    m = np.asarray(M, dtype=DTYPE)
    if m.ndim == 3 and m.shape[2] == 1:
        m = m[..., 0]
    if m.shape != like.shape[:2]:
        raise ValueError(f"mask {m.shape} does not match image {like.shape}")
    if not np.all((m == 0) | (m == 1)):
        raise ValueError("mask must be binary (0/1)")
    return m[..., None] if like.ndim == 3 else m


def overlay_raw(I: np.ndarray, J: np.ndarray, M: np.ndarray, kernel_size: int = KERNEL_SIZE,
                sigma: float = DEFAULT_SIGMA) -> np.ndarray:
    """M * hf(I) + (1 - M) * hf(J) + lf(J), unclamped.

    Evaluated as ``J + M * (hf(I) - hf(J))``, which is the same expression
    rearranged so that pixels with ``M == 0`` return ``J`` bit for bit.
    """
    I = np.asarray(I, dtype=DTYPE)
    J = np.asarray(J, dtype=DTYPE)
    if I.shape != J.shape:
        raise ValueError(f"source {I.shape} and synthesized {J.shape} differ")
    m = _mask3(M, J)
    hi = hf_decompose(I, kernel_size, sigma).high
    hj = hf_decompose(J, kernel_size, sigma).high
    return J + m * (hi - hj)


def overlay(I: np.ndarray, J: np.ndarray, M: np.ndarray, kernel_size: int = KERNEL_SIZE,
            sigma: float = DEFAULT_SIGMA) -> np.ndarray:
    """:func:`overlay_raw` clamped to [0, 1]."""
    raw = overlay_raw(I, J, M, kernel_size, sigma)
    clipped = int(np.count_nonzero((raw < 0.0) | (raw > 1.0)))
    if clipped:
        log.info("overlay: clamped %d values to [0, 1]", clipped)
    return np.clip(raw, 0.0, 1.0).astype(DTYPE)


def hf_energy(P: np.ndarray, region: np.ndarray | None = None,
              kernel_size: int = KERNEL_SIZE, sigma: float = DEFAULT_SIGMA) -> float:
    """Mean squared high-frequency component, optionally over a region."""
    h = hf_decompose(P, kernel_size, sigma).high.astype(np.float64)
    if h.ndim == 3:
        h = (h ** 2).sum(axis=2)
    else:
        h = h ** 2
    if region is None:
        return float(h.mean())
    r = np.asarray(region, dtype=bool)
    return float(h[r].mean())
