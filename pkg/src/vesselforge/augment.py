"""Patch extraction and the randomized training augmentations.

Per training patch the chain is: HSV gamma on the [0, 1] colors, GCN, then
flip / rotation / scaling about the patch center. Geometric resampling runs
after GCN so the zero fill of uncovered cells equals the patch mean.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np
from scipy import ndimage

from .data import FundusSample
from .preprocess import gcn

PATCH_SIZE = 64
GAMMA_RANGE = (0.25, 4.0)
ANGLE_RANGE = (-90.0, 90.0)
SCALE_RANGE = (0.7, 1.3)


@dataclass
class Patch:
    data: np.ndarray  # size x size x 3
    label: np.ndarray  # size x size, values in {0, 1}
    center: tuple[int, int]
    fov: np.ndarray = field(default=None)

    def __post_init__(self):
        if self.fov is None:
            self.fov = np.ones(self.label.shape, dtype=np.uint8)
        if self.data.shape[:2] != self.label.shape or self.fov.shape != self.label.shape:
            raise ValueError("patch data, label and fov must share spatial size")


@dataclass(frozen=True)
class AugmentPlan:
    flip: str = "none"
    gamma_s: float = 1.0
    gamma_v: float = 1.0
    angle_deg: float = 0.0
    scale: float = 1.0
    rng_seed: int = 0

    def __post_init__(self):
        if self.flip not in ("none", "h", "v"):
            raise ValueError(f"flip must be none, h or v; got {self.flip!r}")
        for name in ("gamma_s", "gamma_v"):
            g = getattr(self, name)
            if not GAMMA_RANGE[0] <= g <= GAMMA_RANGE[1]:
                raise ValueError(f"{name}={g} outside {GAMMA_RANGE}")
        if not ANGLE_RANGE[0] <= self.angle_deg <= ANGLE_RANGE[1]:
            raise ValueError(f"angle {self.angle_deg} outside {ANGLE_RANGE}")
        if not SCALE_RANGE[0] <= self.scale <= SCALE_RANGE[1]:
            raise ValueError(f"scale {self.scale} outside {SCALE_RANGE}")


def patch_rng(seed: int, *index: int) -> np.random.Generator:
    """Independent stream for one patch so results never depend on processing order."""
    return np.random.default_rng([seed, *index])


def random_plan(rng: np.random.Generator) -> AugmentPlan:
    lo, hi = np.log(GAMMA_RANGE)
    return AugmentPlan(
        flip=("none", "h", "v")[int(rng.integers(3))],
        gamma_s=float(np.exp(rng.uniform(lo, hi))),
        gamma_v=float(np.exp(rng.uniform(lo, hi))),
        angle_deg=float(rng.uniform(*ANGLE_RANGE)),
        scale=float(rng.uniform(*SCALE_RANGE)),
        rng_seed=int(rng.integers(2**63)),
    )


# ---------------------------------------------------------------------------
# extraction


def extract_patch(sample: FundusSample, center, size: int = PATCH_SIZE) -> Patch:
    """Crop a ``size`` square whose center pixel is ``center``; off-image cells are 0."""
    r, c = int(center[0]), int(center[1])
    h, w = sample.gt.shape
    half = size // 2
    top, left = r - half, c - half
    data = np.zeros((size, size, 3))
    label = np.zeros((size, size), dtype=np.uint8)
    fov = np.zeros((size, size), dtype=np.uint8)
    r0, r1 = max(top, 0), min(top + size, h)
    c0, c1 = max(left, 0), min(left + size, w)
    dst = (slice(r0 - top, r1 - top), slice(c0 - left, c1 - left))
    data[dst] = sample.image[r0:r1, c0:c1]
    label[dst] = sample.gt[r0:r1, c0:c1]
    fov[dst] = sample.fov[r0:r1, c0:c1]
    return Patch(data, label, (r, c), fov)


class CenterSampler:
    """Class-balanced patch centers inside the field of view of one sample."""

    def __init__(self, sample: FundusSample, size: int = PATCH_SIZE):
        h, w = sample.gt.shape
        if h <= size or w <= size:
            raise ValueError(f"{sample.id}: image {w}x{h} is not larger than a {size}x{size} patch")
        inside = sample.fov.astype(bool)
        if not inside.any():
            raise ValueError(f"{sample.id}: empty field of view")
        self.sample = sample
        self.size = size
        self.vessel = np.flatnonzero(inside & sample.gt.astype(bool))
        self.background = np.flatnonzero(inside & ~sample.gt.astype(bool))
        self.width = w

    def draw(self, rng: np.random.Generator, vessel: bool) -> tuple[int, int]:
        pool = self.vessel if vessel else self.background
        if pool.size == 0:
            pool = self.background if vessel else self.vessel
        flat = int(pool[rng.integers(pool.size)])
        return divmod(flat, self.width)


def sample_patches(sample: FundusSample, n: int, seed: int, size: int = PATCH_SIZE) -> list[Patch]:
    """``n`` patches, alternating vessel- and background-centered, inside the FOV."""
    sampler = CenterSampler(sample, size)
    patches = []
    for k in range(n):
        rng = patch_rng(seed, k)
        patches.append(extract_patch(sample, sampler.draw(rng, vessel=k % 2 == 0), size))
    return patches


# ---------------------------------------------------------------------------
# color


def rgb_to_hsv(rgb) -> np.ndarray:
    rgb = np.asarray(rgb, dtype=np.float64)
    r, g, b = rgb[..., 0], rgb[..., 1], rgb[..., 2]
    v = rgb.max(axis=-1)
    mn = rgb.min(axis=-1)
    delta = v - mn
    s = np.where(v > 0, delta / np.where(v > 0, v, 1.0), 0.0)
    safe = np.where(delta > 0, delta, 1.0)
    h = np.where(v == r, ((g - b) / safe) % 6.0, np.where(v == g, (b - r) / safe + 2.0, (r - g) / safe + 4.0))
    h = np.where(delta > 0, h / 6.0, 0.0)
    return np.stack([h, s, v], axis=-1)


def hsv_to_rgb(hsv) -> np.ndarray:
    hsv = np.asarray(hsv, dtype=np.float64)
    h, s, v = hsv[..., 0], hsv[..., 1], hsv[..., 2]
    h6 = (h % 1.0) * 6.0
    sector = np.floor(h6).astype(int) % 6
    f = h6 - np.floor(h6)
    p = v * (1.0 - s)
    q = v * (1.0 - s * f)
    t = v * (1.0 - s * (1.0 - f))
    table = np.stack(
        [
            np.stack([v, t, p], -1),
            np.stack([q, v, p], -1),
            np.stack([p, v, t], -1),
            np.stack([p, q, v], -1),
            np.stack([t, p, v], -1),
            np.stack([v, p, q], -1),
        ]
    )
    return np.take_along_axis(table, sector[None, ..., None].repeat(3, -1), axis=0)[0]


def gamma_sv(patch: Patch, gamma_s: float, gamma_v: float) -> Patch:
    hsv = rgb_to_hsv(np.clip(patch.data, 0.0, 1.0))
    hsv[..., 1] **= gamma_s
    hsv[..., 2] **= gamma_v
    return replace(patch, data=hsv_to_rgb(hsv))


# ---------------------------------------------------------------------------
# geometry


def _flip(a, how):
    if how == "h":
        return a[:, ::-1]
    if how == "v":
        return a[::-1]
    return a


def geometric(patch: Patch, plan: AugmentPlan) -> Patch:
    """Flip, then rotate counter-clockwise by ``angle_deg`` and zoom by ``scale`` about the center."""
    data = _flip(patch.data, plan.flip)
    label = _flip(patch.label, plan.flip)
    fov = _flip(patch.fov, plan.flip)
    if plan.angle_deg == 0.0 and plan.scale == 1.0:
        return Patch(data.copy(), label.copy(), patch.center, fov.copy())

    theta = np.deg2rad(plan.angle_deg)
    cos, sin = np.cos(theta), np.sin(theta)
    # maps output (row, col) to input (row, col)
    matrix = np.array([[cos, sin], [-sin, cos]]) / plan.scale
    mid = (np.array(label.shape) - 1) / 2.0
    offset = mid - matrix @ mid

    def warp(a, order):
        return ndimage.affine_transform(a, matrix, offset=offset, order=order, mode="constant", cval=0.0)

    out = np.stack([warp(data[..., k], 1) for k in range(data.shape[2])], axis=-1)
    new_label = warp(label.astype(np.float64), 0).astype(np.uint8)
    new_fov = warp(fov.astype(np.float64), 0).astype(np.uint8)
    return Patch(out, new_label, patch.center, new_fov)


def augment(patch: Patch, plan: AugmentPlan) -> Patch:
    """Full training chain: HSV gamma, GCN, then geometry."""
    colored = gamma_sv(patch, plan.gamma_s, plan.gamma_v)
    normalized = replace(colored, data=gcn(colored.data))
    return geometric(normalized, plan)
