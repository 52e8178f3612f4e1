"""Whole-image inference with overlapping windows.

``sp1`` runs the network once on the (reflect-padded) image. ``sp32`` and
``sp64`` tile the image with square windows at stride 3, clamp the last window
on each axis to the image border, and average the vessel probability of every
window covering a pixel.
"""

from __future__ import annotations

import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import net
from .data import write_pnm
from .preprocess import gcn

WINDOW_BATCH = 16


@dataclass(frozen=True)
class SpScheme:
    name: str
    window: int | None  # None means the whole image
    stride: int

    def __post_init__(self):
        expected = SCHEME_TABLE.get(self.name)
        if expected is not None and (self.window, self.stride) != expected:
            raise ValueError(f"{self.name} is window={expected[0]}, stride={expected[1]}")


SCHEME_TABLE = {"sp1": (None, 1), "sp32": (32, 3), "sp64": (64, 3)}
SCHEMES = {name: SpScheme(name, *geom) for name, geom in SCHEME_TABLE.items()}


def scheme(name: str) -> SpScheme:
    try:
        return SCHEMES[name]
    except KeyError:
        raise ValueError(f"unknown scheme {name!r}; choose one of {sorted(SCHEMES)}") from None


@dataclass
class PredictionMap:
    prob: np.ndarray  # H x W float64 in [0, 1]
    coverage: np.ndarray  # H x W int


def worker_count() -> int:
    raw = os.environ.get("VESSELFORGE_THREADS")
    if raw is None:
        return os.cpu_count() or 1
    try:
        n = int(raw)
    except ValueError:
        raise ValueError(f"VESSELFORGE_THREADS must be an integer, got {raw!r}") from None
    return max(1, n)


def window_starts(length: int, window: int, stride: int) -> list[int]:
    """Start offsets along one axis; the last window is clamped to end at the border."""
    if window > length:
        raise ValueError(f"window {window} is larger than the image side {length}")
    starts = list(range(0, length - window + 1, stride))
    if starts[-1] != length - window:
        starts.append(length - window)
    return starts


def window_count(height: int, width: int, window: int, stride: int) -> int:
    def per_axis(n):
        span = n - window
        return span // stride + 1 + (1 if span % stride else 0)

    return per_axis(height) * per_axis(width)


def _forward_windows(params, crops: list[np.ndarray]) -> np.ndarray:
    x = np.stack([gcn(c).transpose(2, 0, 1) for c in crops]).astype(np.float32)
    return net.predict_proba(params, x).astype(np.float64)


def _predict_whole(params, image: np.ndarray) -> PredictionMap:
    h, w = image.shape[:2]
    cfg = params.config
    step = 2 ** cfg.depth
    side = max(cfg.min_side, step)
    ph = max(side, -(-h // step) * step)
    pw = max(side, -(-w // step) * step)
    x = gcn(image)
    if (ph, pw) != (h, w):
        x = np.pad(x, ((0, ph - h), (0, pw - w), (0, 0)), mode="reflect" if ph - h < h and pw - w < w else "symmetric")
    prob = net.predict_proba(params, x.transpose(2, 0, 1)[None].astype(np.float32))[0, :h, :w]
    return PredictionMap(prob.astype(np.float64), np.ones((h, w), dtype=np.int64))


def _band(params, image, top: int, lefts: list[int], window: int):
    """Accumulate one row of windows into a private band buffer."""
    w = image.shape[1]
    acc = np.zeros((window, w))
    cov = np.zeros((window, w), dtype=np.int64)
    for k in range(0, len(lefts), WINDOW_BATCH):
        chunk = lefts[k:k + WINDOW_BATCH]
        probs = _forward_windows(params, [image[top:top + window, c:c + window] for c in chunk])
        for c, p in zip(chunk, probs):
            acc[:, c:c + window] += p
            cov[:, c:c + window] += 1
    return top, acc, cov


def predict(params: net.ModelParams, image: np.ndarray, sp: SpScheme | str, workers: int | None = None) -> PredictionMap:
    """Vessel probability map for an H x W x 3 image in [0, 1]."""
    sp = scheme(sp) if isinstance(sp, str) else sp
    image = np.asarray(image, dtype=np.float64)
    if image.ndim != 3 or image.shape[2] != params.config.in_channels:
        raise ValueError(f"expected H x W x {params.config.in_channels} image, got {image.shape}")
    if sp.window is None:
        return _predict_whole(params, image)

    h, w = image.shape[:2]
    window = sp.window
    tops = window_starts(h, window, sp.stride)
    lefts = window_starts(w, window, sp.stride)
    # one band per window row; bands are reduced in row order so the result
    # does not depend on the worker count
    workers = workers or worker_count()
    if workers > 1:
        with ThreadPoolExecutor(workers) as pool:
            bands = list(pool.map(lambda t: _band(params, image, t, lefts, window), tops))
    else:
        bands = [_band(params, image, t, lefts, window) for t in tops]
    acc = np.zeros((h, w))
    cov = np.zeros((h, w), dtype=np.int64)
    for top, band_acc, band_cov in bands:
        acc[top:top + window] += band_acc
        cov[top:top + window] += band_cov
    return PredictionMap(acc / cov, cov)


def binarize(pred: PredictionMap | np.ndarray, threshold: float = 0.5, fov=None) -> np.ndarray:
    """Vessel where ``prob >= threshold``; pixels outside ``fov`` are background."""
    if not 0.0 <= threshold <= 1.0:
        raise ValueError(f"threshold must lie in [0, 1], got {threshold}")
    prob = pred.prob if isinstance(pred, PredictionMap) else np.asarray(pred)
    out = prob >= threshold
    if fov is not None:
        out &= np.asarray(fov).astype(bool)
    return out


def prob_to_u16(prob: np.ndarray) -> np.ndarray:
    return np.rint(np.clip(prob, 0.0, 1.0) * 65535).astype(np.uint16)


def write_prediction(out_dir, sample_id: str, pred: PredictionMap, binary: np.ndarray) -> tuple[Path, Path]:
    out = Path(out_dir)
    prob_path = out / f"{sample_id}_prob.pgm"
    bin_path = out / f"{sample_id}_bin.pgm"
    # the encoder rounds prob * maxval, matching prob_to_u16
    write_pnm(prob_path, np.clip(pred.prob, 0.0, 1.0), maxval=65535)
    write_pnm(bin_path, binary.astype(np.float64), maxval=255)
    return prob_path, bin_path
