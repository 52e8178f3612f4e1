"""Global contrast normalization and automatic color enhancement (ACE).

ACE computes, per color channel,

    R(x) = sum_{y != x} s(I(x) - I(y)) / |x - y|,   s(t) = clip(alpha * t, -1, 1)

and stretches R linearly onto [0, 1]. ``ace_exact`` evaluates the double sum
directly (quadratic in the pixel count, used as an oracle). ``ace_fast``
replaces it with global convolutions against the 1/|x| kernel, either by
expanding a polynomial approximation of ``s`` into monomials or by evaluating
R at a few intensity levels and interpolating between them.
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache
from math import comb

import numpy as np
from scipy.signal import fftconvolve

from . import kernels

GCN_EPS = 1e-8
EXACT_MAX_SIDE = 64
_POLY_GRID = 4001


class AceSizeError(ValueError):
    """Image too large for the brute-force evaluation."""


@dataclass(frozen=True)
class AceParams:
    alpha: float = 5.0
    mode: str = "poly_approx"  # exact | poly_approx | interp_approx
    poly_degree: int = 9
    levels: int = 8

    def __post_init__(self):
        if self.alpha < 1:
            raise ValueError(f"alpha must be >= 1, got {self.alpha}")
        if self.mode not in ("exact", "poly_approx", "interp_approx"):
            raise ValueError(f"unknown ACE mode {self.mode!r}")
        if self.poly_degree < 1 or self.poly_degree % 2 == 0:
            raise ValueError(f"poly_degree must be a positive odd int, got {self.poly_degree}")
        if self.levels < 2:
            raise ValueError(f"levels must be >= 2, got {self.levels}")


def gcn(patch) -> np.ndarray:
    """Standardize to zero mean and unit population std (all zeros if flat)."""
    p = np.asarray(patch, dtype=np.float64)
    if p.size == 0:
        raise ValueError("gcn of an empty patch")
    centered = p - p.mean()
    std = np.sqrt(np.mean(centered * centered))
    if std <= GCN_EPS:
        return np.zeros_like(p)
    return centered / std


def slope(t, alpha: float):
    return np.clip(alpha * np.asarray(t, dtype=np.float64), -1.0, 1.0)


@lru_cache(maxsize=64)
def slope_poly(alpha: float, degree: int) -> tuple[float, ...]:
    """Least-squares odd polynomial ``sum_k c_k t^(2k+1)`` fitted to the slope on [-1, 1].

    Returns coefficients indexed by power (even powers are zero).
    """
    t = np.linspace(-1.0, 1.0, _POLY_GRID)
    powers = np.arange(1, degree + 1, 2)
    basis = t[:, None] ** powers[None, :]
    coef, *_ = np.linalg.lstsq(basis, slope(t, alpha), rcond=None)
    full = np.zeros(degree + 1)
    full[powers] = coef
    return tuple(full)


def slope_poly_error(alpha: float, degree: int) -> dict:
    """RMS and max deviation of the fitted polynomial from the slope on the fit grid."""
    t = np.linspace(-1.0, 1.0, _POLY_GRID)
    approx = np.polynomial.polynomial.polyval(t, slope_poly(alpha, degree))
    err = approx - slope(t, alpha)
    return {"rms": float(np.sqrt(np.mean(err**2))), "max": float(np.abs(err).max())}


@lru_cache(maxsize=16)
def _inverse_distance_kernel(h: int, w: int) -> np.ndarray:
    dy = np.arange(-(h - 1), h)[:, None]
    dx = np.arange(-(w - 1), w)[None, :]
    dist = np.hypot(dy, dx)
    dist[h - 1, w - 1] = np.inf
    return 1.0 / dist


def _channels(img) -> tuple[np.ndarray, bool]:
    a = np.asarray(img, dtype=np.float64)
    if a.ndim == 2:
        return a[..., None], True
    if a.ndim != 3:
        raise ValueError(f"expected H x W or H x W x C image, got shape {a.shape}")
    if a.shape[0] * a.shape[1] == 0:
        raise ValueError("empty image")
    return a, False


def stretch(r: np.ndarray) -> np.ndarray:
    """Map min -> 0 and max -> 1; a flat response maps to 0.5."""
    lo, hi = float(r.min()), float(r.max())
    if hi - lo <= 1e-12 * max(1.0, abs(lo), abs(hi)):
        return np.full_like(r, 0.5)
    return (r - lo) / (hi - lo)


def _finish(channels: list[np.ndarray], squeeze: bool) -> np.ndarray:
    out = np.stack(channels, axis=-1)
    return out[..., 0] if squeeze else out


def ace_response_exact(channel: np.ndarray, alpha: float) -> np.ndarray:
    return kernels.ace_pairwise(np.ascontiguousarray(channel, dtype=np.float64), float(alpha))


def ace_exact(img, params: AceParams = AceParams(mode="exact")) -> np.ndarray:
    a, squeeze = _channels(img)
    h, w = a.shape[:2]
    if h > EXACT_MAX_SIDE or w > EXACT_MAX_SIDE:
        raise AceSizeError(f"exact ACE is limited to {EXACT_MAX_SIDE}x{EXACT_MAX_SIDE}, got {h}x{w}")
    out = []
    for c in range(a.shape[2]):
        ch = a[..., c]
        if np.ptp(ch) == 0:
            out.append(np.full_like(ch, 0.5))
        else:
            out.append(stretch(ace_response_exact(ch, params.alpha)))
    return _finish(out, squeeze)


def ace_response_poly(channel: np.ndarray, alpha: float, degree: int) -> np.ndarray:
    h, w = channel.shape
    coef = slope_poly(float(alpha), degree)
    kern = _inverse_distance_kernel(h, w)
    stack = channel[None] ** np.arange(degree + 1)[:, None, None]
    conv = fftconvolve(stack, kern[None], mode="same", axes=(1, 2))
    # R = sum_n (-1)^n (kernel * I^n) * sum_{m >= n} c_m C(m, n) I^(m - n)
    r = np.zeros_like(channel)
    for n in range(degree + 1):
        inner = np.zeros_like(channel)
        for m in range(max(n, 1), degree + 1):
            if coef[m] != 0.0:
                inner += coef[m] * comb(m, n) * channel ** (m - n)
        r += (-1) ** n * conv[n] * inner
    return r


def ace_response_interp(channel: np.ndarray, alpha: float, levels: int) -> np.ndarray:
    h, w = channel.shape
    kern = _inverse_distance_kernel(h, w)
    grid = np.linspace(channel.min(), channel.max(), levels)
    stack = slope(grid[:, None, None] - channel[None], alpha)
    at_level = fftconvolve(stack, kern[None], mode="same", axes=(1, 2))
    step = grid[1] - grid[0]
    pos = (channel - grid[0]) / step
    lo = np.clip(np.floor(pos).astype(int), 0, levels - 2)
    frac = np.clip(pos - lo, 0.0, 1.0)
    rows, cols = np.indices(channel.shape)
    return (1.0 - frac) * at_level[lo, rows, cols] + frac * at_level[lo + 1, rows, cols]


def ace_fast(img, params: AceParams = AceParams()) -> np.ndarray:
    if params.mode not in ("poly_approx", "interp_approx"):
        raise ValueError(f"ace_fast needs an approximate mode, got {params.mode!r}")
    a, squeeze = _channels(img)
    out = []
    for c in range(a.shape[2]):
        ch = a[..., c]
        if np.ptp(ch) == 0:
            out.append(np.full_like(ch, 0.5))
            continue
        if params.mode == "poly_approx":
            r = ace_response_poly(ch, params.alpha, params.poly_degree)
        else:
            r = ace_response_interp(ch, params.alpha, params.levels)
        out.append(stretch(r))
    return _finish(out, squeeze)


def ace(img, params: AceParams = AceParams()) -> np.ndarray:
    if params.mode == "exact":
        return ace_exact(img, params)
    return ace_fast(img, params)
