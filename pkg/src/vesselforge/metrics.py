"""Pixel metrics inside the field of view: Acc, Sens, Spec and ROC AUC."""

from __future__ import annotations

import csv
import io
import json
from dataclasses import asdict, dataclass, field

import numpy as np
from scipy.stats import rankdata

from .data import canonical_json

FOV_CONVENTION = "metrics restricted to field-of-view pixels"


class MetricsError(ValueError):
    pass


@dataclass(frozen=True)
class Confusion:
    tp: int
    fp: int
    tn: int
    fn: int

    @property
    def total(self) -> int:
        return self.tp + self.fp + self.tn + self.fn

    @property
    def acc(self) -> float:
        return (self.tp + self.tn) / self.total

    @property
    def sens(self) -> float:
        pos = self.tp + self.fn
        return self.tp / pos if pos else float("nan")

    @property
    def spec(self) -> float:
        neg = self.tn + self.fp
        return self.tn / neg if neg else float("nan")


def _aligned(pred, gt, fov):
    pred, gt = np.asarray(pred), np.asarray(gt)
    fov = np.ones(gt.shape, dtype=bool) if fov is None else np.asarray(fov).astype(bool)
    if pred.shape != gt.shape or fov.shape != gt.shape:
        raise MetricsError(f"shape mismatch: pred {pred.shape}, gt {gt.shape}, fov {fov.shape}")
    if not fov.any():
        raise MetricsError("empty field of view")
    return pred, gt.astype(bool), fov


def confusion(pred, gt, fov=None) -> Confusion:
    pred, gt, fov = _aligned(pred, gt, fov)
    p, g = pred.astype(bool)[fov], gt[fov]
    tp = int(np.count_nonzero(p & g))
    fp = int(np.count_nonzero(p & ~g))
    fn = int(np.count_nonzero(~p & g))
    tn = int(p.size - tp - fp - fn)
    return Confusion(tp, fp, tn, fn)


def roc_auc(prob, gt, fov=None) -> float:
    """Mann-Whitney estimate: P(vessel score > background score), ties counting 1/2."""
    prob = getattr(prob, "prob", prob)
    prob, gt, fov = _aligned(prob, gt, fov)
    scores = np.asarray(prob, dtype=np.float64)[fov]
    labels = gt[fov]
    n_pos = int(np.count_nonzero(labels))
    n_neg = labels.size - n_pos
    if n_pos == 0 or n_neg == 0:
        raise MetricsError("AUC undefined: ground truth inside the FOV has a single class")
    ranks = rankdata(scores)  # average ranks for ties
    u = ranks[labels].sum() - n_pos * (n_pos + 1) / 2.0
    return float(u / (n_pos * n_neg))


@dataclass
class ImageMetrics:
    id: str
    auc: float
    acc: float
    sens: float
    spec: float
    seconds: float = 0.0

    @classmethod
    def compute(cls, sample_id: str, prob, binary, gt, fov, seconds: float = 0.0) -> "ImageMetrics":
        c = confusion(binary, gt, fov)
        return cls(sample_id, roc_auc(prob, gt, fov), c.acc, c.sens, c.spec, seconds)


@dataclass
class MetricsReport:
    scheme: str
    images: list = field(default_factory=list)  # ImageMetrics
    fov_convention: str = FOV_CONVENTION
    threshold: float = 0.5
    notes: dict = field(default_factory=dict)

    def mean(self) -> dict:
        if not self.images:
            raise MetricsError("report has no images")
        return {k: float(np.mean([getattr(m, k) for m in self.images])) for k in ("auc", "acc", "sens", "spec")}

    def to_dict(self, timing: bool = True) -> dict:
        rows = []
        for m in self.images:
            row = asdict(m)
            if not timing:
                row.pop("seconds")
            rows.append(row)
        out = {
            "scheme": self.scheme,
            "fov_convention": self.fov_convention,
            "threshold": self.threshold,
            "notes": self.notes,
            "images": rows,
            "mean": self.mean(),
        }
        return out

    def to_json(self, timing: bool = True) -> str:
        return canonical_json(self.to_dict(timing))

    @classmethod
    def from_json(cls, text: str) -> "MetricsReport":
        d = json.loads(text)
        images = [ImageMetrics(**row) for row in d["images"]]
        return cls(d["scheme"], images, d["fov_convention"], d["threshold"], d.get("notes", {}))

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["id", "AUC", "Acc", "Sens", "Spec"])
        for m in self.images:
            w.writerow([m.id] + [f"{v:.4f}" for v in (m.auc, m.acc, m.sens, m.spec)])
        mean = self.mean()
        w.writerow(["mean"] + [f"{mean[k]:.4f}" for k in ("auc", "acc", "sens", "spec")])
        return buf.getvalue()


def report(entries, scheme: str, threshold: float = 0.5, notes: dict | None = None) -> MetricsReport:
    """Build a report from ``(id, prob, binary, gt, fov, seconds)`` tuples."""
    images = [ImageMetrics.compute(*e) for e in entries]
    if not images:
        raise MetricsError("no images to evaluate")
    return MetricsReport(scheme, images, threshold=threshold, notes=notes or {})
