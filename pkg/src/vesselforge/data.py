"""Fundus datasets: binary PNM codec, DRIVE/STARE/CHASE loaders, phantoms.

Native dataset formats (TIFF, GIF, JPEG) must be converted once to PNM:
color images to P6 ``.ppm``, masks and manual annotations to P5 ``.pgm``,
keeping one file stem per sample id. Expected layouts::

    drive/{training,test}/{images/<id>.ppm, mask/<id>.pgm, 1st_manual/<id>.pgm}
    stare/{images/<id>.ppm, labels-ah/<id>.pgm}
    chase/{images/<id>.ppm, 1st_manual/<id>.pgm}
    synth/ same as drive

STARE and CHASE ship without field-of-view masks; one is synthesized per
image (luminance above ``FOV_THRESHOLD``, largest connected component) and
cached as ``<root>/fov/<id>.pgm``. A manifest is written beside the root as
``<root-name>.manifest.json``.
"""

from __future__ import annotations

import json
import logging
import os
import tempfile
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy import ndimage

log = logging.getLogger(__name__)

FOV_THRESHOLD = 0.06

# (width, height) per dataset
EXPECTED_SIZE = {"drive": (565, 584), "stare": (700, 605), "chase": (1280, 960)}
EXPECTED_COUNT = {"drive": {"train": 20, "test": 20}, "stare": {"all": 20}, "chase": {"all": 28}}
# STARE/CHASE have no official split; leading ids train, the rest test
TRAIN_SPLIT = {"stare": 10, "chase": 20}
KINDS = ("drive", "stare", "chase", "synth")


class PnmError(ValueError):
    """Malformed or unsupported PNM data."""


class DatasetError(ValueError):
    """A dataset directory does not match its documented layout."""


# ---------------------------------------------------------------------------
# PNM codec


def _header(data: bytes, name: str):
    if len(data) < 2 or data[:2] not in (b"P5", b"P6"):
        raise PnmError(f"{name}: bad magic {data[:2]!r} at byte offset 0 (expected P5 or P6)")
    pos = 2
    fields = []
    while len(fields) < 3:
        if pos >= len(data):
            raise PnmError(f"{name}: truncated header at byte offset {pos}")
        ch = data[pos:pos + 1]
        if ch == b"#":
            end = data.find(b"\n", pos)
            if end < 0:
                raise PnmError(f"{name}: unterminated comment at byte offset {pos}")
            pos = end + 1
        elif ch.isspace():
            pos += 1
        elif ch.isdigit():
            start = pos
            while pos < len(data) and data[pos:pos + 1].isdigit():
                pos += 1
            fields.append(int(data[start:pos]))
        else:
            raise PnmError(f"{name}: unexpected byte {ch!r} in header at byte offset {pos}")
    if pos >= len(data) or not data[pos:pos + 1].isspace():
        raise PnmError(f"{name}: missing whitespace after maxval at byte offset {pos}")
    width, height, maxval = fields
    if width <= 0 or height <= 0:
        raise PnmError(f"{name}: non-positive size {width}x{height}")
    if not 0 < maxval < 65536:
        raise PnmError(f"{name}: maxval {maxval} outside 1..65535")
    return data[:2].decode(), width, height, maxval, pos + 1


def decode_pnm(data: bytes, name: str = "<bytes>") -> tuple[np.ndarray, int]:
    """Decode binary P5/P6 into floats in [0, 1]; returns ``(pixels, maxval)``.

    P6 yields ``H x W x 3``; P5 yields ``H x W``. Samples wider than a byte
    are big-endian.
    """
    magic, width, height, maxval, offset = _header(data, name)
    depth = 3 if magic == "P6" else 1
    dtype = np.dtype(">u2") if maxval > 255 else np.dtype("u1")
    need = width * height * depth * dtype.itemsize
    have = len(data) - offset
    if have < need:
        raise PnmError(f"{name}: truncated payload, {have} of {need} bytes after byte offset {offset}")
    raw = np.frombuffer(data, dtype=dtype, count=width * height * depth, offset=offset)
    if raw.max(initial=0) > maxval:
        raise PnmError(f"{name}: sample exceeds maxval {maxval}")
    shape = (height, width, 3) if depth == 3 else (height, width)
    return raw.reshape(shape).astype(np.float64) / maxval, maxval


def encode_pnm(pixels, maxval: int = 255) -> bytes:
    a = np.asarray(pixels, dtype=np.float64)
    if a.ndim == 3 and a.shape[2] == 3:
        magic = b"P6"
    elif a.ndim == 2:
        magic = b"P5"
    else:
        raise PnmError(f"cannot encode array of shape {a.shape} as PNM")
    if not 0 < maxval < 65536:
        raise PnmError(f"maxval {maxval} outside 1..65535")
    dtype = np.dtype(">u2") if maxval > 255 else np.dtype("u1")
    q = np.rint(np.clip(a, 0.0, 1.0) * maxval).astype(dtype)
    header = b"%s\n%d %d\n%d\n" % (magic, a.shape[1], a.shape[0], maxval)
    return header + q.tobytes()


def atomic_write(path, payload: bytes) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(payload)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def read_pnm(path) -> tuple[np.ndarray, int]:
    path = Path(path)
    return decode_pnm(path.read_bytes(), str(path))


def write_pnm(path, pixels, maxval: int = 255) -> None:
    atomic_write(path, encode_pnm(pixels, maxval))


# ---------------------------------------------------------------------------
# samples and loaders


@dataclass
class FundusSample:
    id: str
    image: np.ndarray  # H x W x 3 in [0, 1]
    fov: np.ndarray  # H x W bool
    gt: np.ndarray  # H x W bool
    split: str = "train"

    def __post_init__(self):
        if self.image.ndim != 3 or self.image.shape[2] != 3:
            raise DatasetError(f"{self.id}: image must be H x W x 3, got {self.image.shape}")
        if self.fov.shape != self.image.shape[:2] or self.gt.shape != self.image.shape[:2]:
            raise DatasetError(
                f"{self.id}: raster sizes disagree: image {self.image.shape[:2]}, "
                f"fov {self.fov.shape}, gt {self.gt.shape}"
            )


def luminance(image: np.ndarray) -> np.ndarray:
    return image @ np.array([0.299, 0.587, 0.114])


def synthesize_fov(image: np.ndarray, threshold: float = FOV_THRESHOLD) -> np.ndarray:
    bright = luminance(image) > threshold
    labels, count = ndimage.label(bright)
    if count == 0:
        return bright
    sizes = np.bincount(labels.ravel())
    sizes[0] = 0
    return labels == int(np.argmax(sizes))


def _stems(folder: Path, suffix: str) -> list[str]:
    if not folder.is_dir():
        raise DatasetError(f"missing directory {folder}")
    return sorted(p.stem for p in folder.iterdir() if p.suffix == suffix)


def _read_binary(path: Path, sid: str) -> np.ndarray:
    if not path.exists():
        raise DatasetError(f"{sid}: missing file {path}")
    arr, _ = read_pnm(path)
    if arr.ndim == 3:
        arr = luminance(arr)
    return arr > 0.5


def _read_image(path: Path, sid: str) -> np.ndarray:
    if not path.exists():
        raise DatasetError(f"{sid}: missing file {path}")
    arr, _ = read_pnm(path)
    if arr.ndim != 3:
        raise DatasetError(f"{sid}: {path} is not a color (P6) image")
    return arr


def _fov_for(root: Path, sid: str, image: np.ndarray) -> np.ndarray:
    cache = root / "fov" / f"{sid}.pgm"
    if cache.exists():
        return _read_binary(cache, sid)
    fov = synthesize_fov(image)
    try:
        write_pnm(cache, fov.astype(np.float64))
    except OSError as exc:
        log.warning("could not cache FOV for %s: %s", sid, exc)
    return fov


def _check_size(kind: str, sample: FundusSample) -> None:
    if kind not in EXPECTED_SIZE:
        return
    want_w, want_h = EXPECTED_SIZE[kind]
    h, w = sample.image.shape[:2]
    if (w, h) != (want_w, want_h):
        raise DatasetError(f"{sample.id}: {kind} images must be {want_w}x{want_h}, got {w}x{h}")


def _load_split_tree(root: Path, kind: str) -> list[FundusSample]:
    samples = []
    for split, folder in (("train", "training"), ("test", "test")):
        base = root / folder
        if kind == "synth" and not base.exists():
            continue
        for sid in _stems(base / "images", ".ppm"):
            image = _read_image(base / "images" / f"{sid}.ppm", sid)
            fov = _read_binary(base / "mask" / f"{sid}.pgm", sid)
            gt = _read_binary(base / "1st_manual" / f"{sid}.pgm", sid)
            samples.append(FundusSample(sid, image, fov, gt, split))
    return samples


def _load_flat(root: Path, kind: str) -> list[FundusSample]:
    label_dir = "labels-ah" if kind == "stare" else "1st_manual"
    ids = _stems(root / "images", ".ppm")
    samples = []
    for k, sid in enumerate(ids):
        image = _read_image(root / "images" / f"{sid}.ppm", sid)
        gt = _read_binary(root / label_dir / f"{sid}.pgm", sid)
        fov = _fov_for(root, sid, image)
        split = "train" if k < TRAIN_SPLIT[kind] else "test"
        samples.append(FundusSample(sid, image, fov, gt, split))
    return samples


def manifest_path(root) -> Path:
    root = Path(root).resolve()
    return root.parent / f"{root.name}.manifest.json"


def canonical_json(obj) -> str:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"), allow_nan=False)


def build_manifest(root, kind: str, samples: list[FundusSample]) -> dict:
    counts: dict[str, int] = {}
    for s in samples:
        counts[s.split] = counts.get(s.split, 0) + 1
    manifest = {
        "kind": kind,
        "root": str(Path(root).resolve()),
        "counts": counts,
        "samples": [{"id": s.id, "split": s.split, "size": list(s.image.shape[1::-1])} for s in samples],
    }
    if kind in ("stare", "chase"):
        manifest["fov_rule"] = {"luminance_threshold": FOV_THRESHOLD, "component": "largest"}
    if kind == "stare":
        manifest["annotator"] = "ah"
    return manifest


def load(root, kind: str, check_size: bool = True, write_manifest: bool = True) -> list[FundusSample]:
    """Load every sample of a converted dataset, sorted by split then id."""
    root = Path(root)
    if kind not in KINDS:
        raise DatasetError(f"unknown dataset kind {kind!r}; expected one of {KINDS}")
    if not root.is_dir():
        raise DatasetError(f"dataset root {root} does not exist")
    if kind in ("drive", "synth"):
        samples = _load_split_tree(root, kind)
    else:
        samples = _load_flat(root, kind)
    if not samples:
        raise DatasetError(f"no samples found under {root}")

    expected = EXPECTED_COUNT.get(kind)
    if expected:
        if "all" in expected:
            if len(samples) != expected["all"]:
                raise DatasetError(f"{kind}: expected {expected['all']} samples, found {len(samples)}")
        else:
            for split, n in expected.items():
                got = [s.id for s in samples if s.split == split]
                if len(got) != n:
                    raise DatasetError(f"{kind}: expected {n} {split} samples, found {len(got)}")
    if check_size:
        for s in samples:
            _check_size(kind, s)
    if write_manifest:
        try:
            atomic_write(manifest_path(root), canonical_json(build_manifest(root, kind, samples)).encode())
        except OSError as exc:
            log.warning("could not write manifest for %s: %s", root, exc)
    return samples


def save_tree(root, samples: list[FundusSample]) -> None:
    """Write samples in the DRIVE-style layout (used for synthetic data)."""
    root = Path(root)
    for s in samples:
        base = root / ("training" if s.split == "train" else "test")
        write_pnm(base / "images" / f"{s.id}.ppm", s.image)
        write_pnm(base / "mask" / f"{s.id}.pgm", s.fov.astype(np.float64))
        write_pnm(base / "1st_manual" / f"{s.id}.pgm", s.gt.astype(np.float64))


# ---------------------------------------------------------------------------
# synthetic phantoms


def _bezier(p, t):
    u = 1.0 - t
    return (u**3)[:, None] * p[0] + (3 * u * u * t)[:, None] * p[1] + (3 * u * t * t)[:, None] * p[2] + (t**3)[:, None] * p[3]


def _point_in_disc(rng, center, radius):
    r = radius * np.sqrt(rng.uniform(0, 1))
    a = rng.uniform(0, 2 * np.pi)
    return center + r * np.array([np.sin(a), np.cos(a)])


def synth_phantom(width: int, height: int, n_vessels: int | None = None, seed: int = 0,
                  split: str = "train", sample_id: str | None = None) -> FundusSample:
    """Fundus-like image with dark curvilinear vessels and exact ground truth."""
    if width < 64 or height < 64:
        raise ValueError(f"phantom must be at least 64x64, got {width}x{height}")
    rng = np.random.default_rng(seed)
    if n_vessels is None:
        n_vessels = max(6, round(min(width, height) / 14))
    center = np.array([(height - 1) / 2, (width - 1) / 2])
    radius = 0.46 * min(width, height)
    yy, xx = np.mgrid[:height, :width]
    rr = np.hypot(yy - center[0], xx - center[1]) / radius
    fov = rr <= 1.0

    # smooth illumination, low-frequency texture and a bright optic disc
    base_color = np.array([0.80, 0.42, 0.22]) * rng.uniform(0.9, 1.1, 3)
    texture = ndimage.gaussian_filter(rng.standard_normal((height, width)), min(width, height) / 16)
    texture /= max(np.abs(texture).max(), 1e-12)
    illum = 1.0 - 0.35 * rr**2 + 0.08 * texture
    disc_at = _point_in_disc(rng, center, 0.5 * radius)
    disc = np.exp(-(((yy - disc_at[0]) ** 2 + (xx - disc_at[1]) ** 2) / (2 * (0.07 * radius) ** 2)))
    image = illum[..., None] * base_color + 0.25 * disc[..., None]

    gt = np.zeros((height, width), dtype=bool)
    darkness = np.zeros((height, width))
    for _ in range(n_vessels):
        start = disc_at + rng.normal(0, 0.05 * radius, 2)
        end = _point_in_disc(rng, center, radius)
        ctrl = [_point_in_disc(rng, center, radius) for _ in range(2)]
        pts = np.array([start, ctrl[0], ctrl[1], end])
        length = np.linalg.norm(np.diff(pts, axis=0), axis=1).sum()
        curve = _bezier(pts, np.linspace(0, 1, int(4 * length) + 2))
        width_px = rng.uniform(1.0, 4.0)
        idx = np.rint(curve).astype(int)
        keep = (idx[:, 0] >= 0) & (idx[:, 0] < height) & (idx[:, 1] >= 0) & (idx[:, 1] < width)
        center_line = np.ones((height, width), dtype=bool)
        center_line[idx[keep, 0], idx[keep, 1]] = False
        dist = ndimage.distance_transform_edt(center_line)
        vessel = dist <= width_px / 2
        gt |= vessel
        depth = rng.uniform(0.25, 0.45)
        darkness = np.maximum(darkness, depth * vessel)
    gt &= fov

    soft = ndimage.gaussian_filter(darkness, 0.6)
    shade = np.array([0.6, 1.0, 0.8])
    image = image * (1.0 - soft[..., None] * shade)
    image += rng.normal(0, 0.01, image.shape)
    image = np.where(fov[..., None], image, 0.02)
    image = np.clip(image, 0.0, 1.0)
    sid = sample_id if sample_id is not None else f"phantom_{seed}"
    return FundusSample(sid, image, fov, gt, split)


def synth_dataset(n: int, size: int = 128, seed: int = 0, n_test: int = 0) -> list[FundusSample]:
    """``n`` training plus ``n_test`` test phantoms with seeds derived from ``seed``."""
    out = []
    for k in range(n + n_test):
        split = "train" if k < n else "test"
        sub = int(np.random.SeedSequence([seed, k]).generate_state(1)[0])
        out.append(synth_phantom(size, size, seed=sub, split=split, sample_id=f"{split}_{k:03d}"))
    return out
