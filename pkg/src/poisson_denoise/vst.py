"""Anscombe variance stabilization, binning and interpolation.

Two flavours of binning are provided:

* :func:`bin_downsample` sums non-overlapping ``n x n`` blocks (stride ``n``)
  for the classical bin / denoise / interpolate pipeline;
* :func:`box_kernel_stack` builds stride-1 box-sum kernels used as the fixed
  first layer of the binned network variant (see :mod:`.network`).
"""

from __future__ import annotations

import math

import numpy as np

from .errors import DomainError
from .noise import CountImage

__all__ = [
    "ANSCOMBE_FLOOR",
    "anscombe_forward",
    "anscombe_inverse_algebraic",
    "anscombe_inverse_unbiased",
    "anscombe_inverse_unbiased_grad",
    "bin_downsample",
    "upsample_bilinear",
    "box_kernel_stack",
    "box_filter",
    "classical_pipeline",
]

# Anscombe transform of zero; the smallest value either inverse accepts.
ANSCOMBE_FLOOR = 2.0 * math.sqrt(3.0 / 8.0)

_SQRT_3_2 = math.sqrt(1.5)


def anscombe_forward(x):
    """``2 sqrt(x + 3/8)``; raises DomainError on negative input."""
    x = np.asarray(x, dtype=np.float64)
    if x.size and np.min(x) < 0:
        raise DomainError("Anscombe transform needs non-negative input")
    return 2.0 * np.sqrt(x + 0.375)


def anscombe_inverse_algebraic(d, return_mask=False):
    """Algebraic inverse ``(d/2)**2 - 3/8``.

    Inputs below :data:`ANSCOMBE_FLOOR` map to 0.  With ``return_mask`` the
    boolean array of clamped entries is returned as well.
    """
    d = np.asarray(d, dtype=np.float64)
    low = d < ANSCOMBE_FLOOR
    out = np.where(low, 0.0, 0.25 * d * d - 0.375)
    return (out, low) if return_mask else out


def anscombe_inverse_unbiased(d):
    """Closed-form approximation of the exact unbiased inverse.

    ``d**2/4 - 1/8 + sqrt(3/2)/(4d) - 11/(8 d**2) + 5 sqrt(3/2)/(8 d**3)``,
    clamped to 0 below :data:`ANSCOMBE_FLOOR`.
    """
    d = np.asarray(d, dtype=np.float64)
    low = d < ANSCOMBE_FLOOR
    ds = np.where(low, ANSCOMBE_FLOOR, d)
    inv = 1.0 / ds
    out = (
        0.25 * ds * ds
        - 0.125
        + 0.25 * _SQRT_3_2 * inv
        - 1.375 * inv * inv
        + 0.625 * _SQRT_3_2 * inv**3
    )
    return np.where(low, 0.0, out)


def anscombe_inverse_unbiased_grad(d):
    """Derivative of :func:`anscombe_inverse_unbiased` (0 in the clamped region)."""
    d = np.asarray(d, dtype=np.float64)
    low = d < ANSCOMBE_FLOOR
    ds = np.where(low, ANSCOMBE_FLOOR, d)
    inv = 1.0 / ds
    g = 0.5 * ds - 0.25 * _SQRT_3_2 * inv**2 + 2.75 * inv**3 - 1.875 * _SQRT_3_2 * inv**4
    return np.where(low, 0.0, g)


def bin_downsample(counts: CountImage, n: int) -> CountImage:
    """Sum non-overlapping ``n x n`` blocks.

    Partial blocks on the bottom/right edge are summed as they are.  The
    result's peak metadata is ``n**2`` times the input peak.
    """
    n = int(n)
    if n < 1:
        raise DomainError(f"block size must be >= 1, got {n}")
    c = counts.counts
    h, w = c.shape
    hb, wb = -(-h // n), -(-w // n)
    padded = np.zeros((hb * n, wb * n), dtype=np.int64)
    padded[:h, :w] = c
    summed = padded.reshape(hb, n, wb, n).sum(axis=(1, 3))
    return CountImage(summed, counts.peak * n * n)


def _interp_axis(img, size, axis):
    src = img.shape[axis]
    if size == src:
        return img
    if src == 1:
        return np.repeat(img, size, axis=axis)
    pos = np.arange(size) * ((src - 1) / (size - 1))
    lo = np.minimum(np.floor(pos).astype(np.int64), src - 2)
    frac = pos - lo
    a = np.take(img, lo, axis=axis)
    b = np.take(img, lo + 1, axis=axis)
    shape = [1, 1]
    shape[axis] = size
    frac = frac.reshape(shape)
    return a * (1.0 - frac) + b * frac


def upsample_bilinear(img, target_h: int, target_w: int) -> np.ndarray:
    """Bilinear interpolation on a corner-aligned grid.

    Output corners coincide with input corners; shrinking raises DomainError.
    """
    img = np.asarray(img, dtype=np.float64)
    h, w = img.shape
    if target_h < h or target_w < w:
        raise DomainError(f"cannot upsample {h}x{w} to smaller {target_h}x{target_w}")
    return _interp_axis(_interp_axis(img, int(target_h), 0), int(target_w), 1)


def box_kernel_stack(sizes=(1, 3, 5, 7)) -> np.ndarray:
    """Constant square kernels, centered and zero-padded to a common size.

    Returns an array of shape ``(len(sizes), m, m)`` with ``m = max(sizes)``;
    kernel ``i`` has ``sizes[i]**2`` taps equal to 1.
    """
    sizes = [int(s) for s in sizes]
    if not sizes:
        raise DomainError("need at least one kernel size")
    for s in sizes:
        if s < 1 or s % 2 == 0:
            raise DomainError(f"box kernel sizes must be odd and positive, got {s}")
    m = max(sizes)
    stack = np.zeros((len(sizes), m, m))
    for i, s in enumerate(sizes):
        o = (m - s) // 2
        stack[i, o : o + s, o : o + s] = 1.0
    return stack


def box_filter(x, kernels) -> np.ndarray:
    """Apply a kernel stack with stride 1 and zero padding.

    ``x`` is ``(H, W)`` or ``(N, H, W)``; the result gains a leading kernel
    axis, ``(K, ...)``.
    """
    x = np.asarray(x, dtype=np.float64)
    k, m, _ = kernels.shape
    r = m // 2
    pad = [(0, 0)] * (x.ndim - 2) + [(r, r), (r, r)]
    xp = np.pad(x, pad)
    h, w = x.shape[-2:]
    out = np.zeros((k,) + x.shape)
    for dy in range(m):
        for dx in range(m):
            window = xp[..., dy : dy + h, dx : dx + w]
            for i in np.flatnonzero(kernels[:, dy, dx]):
                out[i] += kernels[i, dy, dx] * window
    return out


def classical_pipeline(counts: CountImage, n: int = 1, denoiser=None) -> np.ndarray:
    """Bin, stabilize, denoise, invert and interpolate back.

    ``denoiser`` maps an Anscombe-domain image to a denoised one; the default
    is the identity.  Returns an intensity estimate at the original
    resolution, in photoelectrons per original pixel.
    """
    binned = bin_downsample(counts, n)
    stabilized = anscombe_forward(binned.counts)
    if denoiser is not None:
        stabilized = denoiser(stabilized)
    estimate = anscombe_inverse_unbiased(stabilized) / (n * n)
    h, w = counts.shape
    if estimate.shape == (h, w):
        return estimate
    return upsample_bilinear(estimate, h, w)
