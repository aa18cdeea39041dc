"""Saliency evaluation: MAE, P-R curve over 256 thresholds, max F-measure, S-measure.

Predictions are quantised to ``q = floor(255*s + 0.5)`` before thresholding;
threshold ``t`` marks pixels with ``q >= t`` as salient. Ground truth is
binarised at 0.5.
"""
from __future__ import annotations

import csv
import json
import math
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

BETA2 = 0.3
ALPHA = 0.5
EPS = np.finfo(np.float64).eps
THRESHOLDS = np.arange(256)


class EmptyGroundTruthError(ValueError):
    code = "EMPTY_GT"


def _check(s: np.ndarray, g: np.ndarray):
    s, g = np.asarray(s, dtype=np.float64), np.asarray(g)
    if s.shape != g.shape:
        raise ValueError(f"prediction {s.shape} and ground truth {g.shape} differ")
    return s, g > 0.5


def mae(s, g) -> float:
    s, g = np.asarray(s, dtype=np.float64), np.asarray(g, dtype=np.float64)
    if s.shape != g.shape:
        raise ValueError(f"prediction {s.shape} and ground truth {g.shape} differ")
    return float(np.abs(s - g).mean())


def quantize(s: np.ndarray) -> np.ndarray:
    return np.floor(np.clip(s, 0.0, 1.0) * 255.0 + 0.5).astype(np.int64)


def pr_curve(s, g) -> np.ndarray:
    """(256, 3) rows of (threshold, precision, recall).

    Precision is 1.0 where nothing is predicted salient.
    """
    s, gb = _check(s, g)
    positives = int(gb.sum())
    if positives == 0:
        raise EmptyGroundTruthError("pr_curve needs at least one positive ground-truth pixel")
    q = quantize(s)
    # histogram of quantised levels inside / outside the object, then suffix sums
    fg_hist = np.bincount(q[gb], minlength=256)
    bg_hist = np.bincount(q[~gb], minlength=256)
    tp = np.cumsum(fg_hist[::-1])[::-1]
    fp = np.cumsum(bg_hist[::-1])[::-1]
    pred = tp + fp
    precision = np.where(pred > 0, tp / np.maximum(pred, 1), 1.0)
    recall = tp / positives
    return np.column_stack([THRESHOLDS.astype(np.float64), precision, recall])


def f_measure(precision, recall, beta2: float = BETA2):
    precision, recall = np.asarray(precision, dtype=np.float64), np.asarray(recall, dtype=np.float64)
    num = (1.0 + beta2) * precision * recall
    den = beta2 * precision + recall
    return np.where(den > 0, num / np.where(den > 0, den, 1.0), 0.0)


def max_f_measure(curve) -> float:
    curve = np.asarray(curve, dtype=np.float64)
    return float(f_measure(curve[:, 1], curve[:, 2]).max())


# ---------------------------------------------------------------------------
# S-measure (structure measure): object-aware and region-aware similarity

def _object_score(x: np.ndarray) -> float:
    if x.size == 0:
        return 0.0
    mean = x.mean()
    std = x.std(ddof=1) if x.size > 1 else 0.0
    return 2.0 * mean / (mean * mean + 1.0 + std + EPS)


def s_object(s: np.ndarray, gb: np.ndarray) -> float:
    fg = np.where(gb, s, 0.0)
    bg = np.where(gb, 0.0, 1.0 - s)
    u = gb.mean()
    return u * _object_score(fg[gb]) + (1.0 - u) * _object_score(bg[~gb])


def _round_half_up(v: float) -> int:
    return int(math.floor(v + 0.5))


def centroid(gb: np.ndarray) -> tuple[int, int]:
    """1-based (x, y) split point: rounded mean column and row of the object."""
    rows, cols = gb.shape
    total = gb.sum()
    if total == 0:
        return _round_half_up(cols / 2), _round_half_up(rows / 2)
    x = _round_half_up((gb.sum(axis=0) * np.arange(1, cols + 1)).sum() / total)
    y = _round_half_up((gb.sum(axis=1) * np.arange(1, rows + 1)).sum() / total)
    return x, y


def _ssim(s: np.ndarray, g: np.ndarray) -> float:
    n = s.size
    if n == 0:
        return 0.0
    x, y = s.mean(), g.mean()
    if n > 1:
        sx2 = ((s - x) ** 2).sum() / (n - 1)
        sy2 = ((g - y) ** 2).sum() / (n - 1)
        sxy = ((s - x) * (g - y)).sum() / (n - 1)
    else:
        sx2 = sy2 = sxy = 0.0
    alpha = 4.0 * x * y * sxy
    beta = (x * x + y * y) * (sx2 + sy2)
    if alpha != 0:
        return alpha / (beta + EPS)
    return 1.0 if beta == 0 else 0.0


def s_region(s: np.ndarray, gb: np.ndarray) -> float:
    rows, cols = gb.shape
    x, y = centroid(gb)
    g = gb.astype(np.float64)
    area = rows * cols
    w1 = x * y / area
    w2 = (cols - x) * y / area
    w3 = x * (rows - y) / area
    w4 = 1.0 - w1 - w2 - w3
    quads = [(slice(0, y), slice(0, x)), (slice(0, y), slice(x, cols)),
             (slice(y, rows), slice(0, x)), (slice(y, rows), slice(x, cols))]
    scores = [_ssim(s[r, c].ravel(), g[r, c].ravel()) for r, c in quads]
    return w1 * scores[0] + w2 * scores[1] + w3 * scores[2] + w4 * scores[3]


def s_measure(s, g, alpha: float = ALPHA) -> float:
    s, gb = _check(s, g)
    y = gb.mean()
    if y == 0:
        q = 1.0 - s.mean()
    elif y == 1:
        q = s.mean()
    else:
        q = alpha * s_object(s, gb) + (1.0 - alpha) * s_region(s, gb)
    return float(min(max(q, 0.0), 1.0))


# ---------------------------------------------------------------------------
# reports

@dataclass
class ImageRecord:
    name: str
    mae: float
    max_f: float
    s_measure: float


@dataclass
class EvalReport:
    records: list[ImageRecord]
    pr_curve: np.ndarray                      # mean curve over images, (256, 3)
    mean: dict[str, float] = field(default_factory=dict)

    @property
    def max_f(self) -> float:
        """Max F of the image-averaged P-R curve (the dataset-level score)."""
        return max_f_measure(self.pr_curve)

    def to_dict(self) -> dict:
        return {
            "n_images": len(self.records),
            "mae": self.mean["mae"],
            "max_f": self.max_f,
            "mean_image_max_f": self.mean["max_f"],
            "s_measure": self.mean["s_measure"],
            "images": [vars(r) for r in self.records],
        }

    def write_json(self, path) -> None:
        with open(path, "w") as fh:
            json.dump(self.to_dict(), fh, indent=2, sort_keys=True)
            fh.write("\n")

    def write_curve_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["threshold", "precision", "recall"])
            for t, p, r in self.pr_curve:
                w.writerow([int(t), repr(float(p)), repr(float(r))])


def evaluate_one(name: str, s, g) -> tuple[ImageRecord, np.ndarray]:
    curve = pr_curve(s, g)
    return ImageRecord(name, mae(s, g), max_f_measure(curve), s_measure(s, g)), curve


def _workers() -> int:
    try:
        return max(1, int(os.environ.get("CIRNET_THREADS", "1")))
    except ValueError:
        return 1


def evaluate(preds: Sequence[np.ndarray], gts: Sequence[np.ndarray],
             names: Sequence[str] | None = None, workers: int | None = None) -> EvalReport:
    """Per-image metrics plus means; results are in input order regardless of workers."""
    if len(preds) != len(gts):
        raise ValueError(f"{len(preds)} predictions for {len(gts)} ground truths")
    if not preds:
        raise ValueError("nothing to evaluate")
    names = list(names) if names is not None else [f"{i:04d}" for i in range(len(preds))]
    workers = workers or _workers()
    jobs = list(zip(names, preds, gts))
    if workers > 1:
        with ThreadPoolExecutor(workers) as ex:
            results = list(ex.map(lambda a: evaluate_one(*a), jobs))
    else:
        results = [evaluate_one(*a) for a in jobs]
    records = [r for r, _ in results]
    curve = np.mean(np.stack([c for _, c in results]), axis=0)
    mean = {k: math.fsum(getattr(r, k) for r in records) / len(records) for k in ("mae", "max_f", "s_measure")}
    return EvalReport(records, curve, mean)
