"""Segmentation metrics (Dice, 2-D ASD) and the positive-prototype angle statistic."""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field

import numpy as np
from scipy.spatial import cKDTree

from .prototypes import PrototypeSet, cosine_scores
from .pseudo_labels import LabelMap


class UndefinedDistanceError(ValueError):
    pass


def dice_coefficient(pred_mask: np.ndarray, gt_mask: np.ndarray, category: int) -> float:
    """Dice overlap in percent; 100 when the category is absent from both masks."""
    pred_mask, gt_mask = np.asarray(pred_mask), np.asarray(gt_mask)
    if pred_mask.shape != gt_mask.shape:
        raise ValueError(f"mask shapes differ: {pred_mask.shape} vs {gt_mask.shape}")
    p = pred_mask == category
    g = gt_mask == category
    total = int(p.sum()) + int(g.sum())
    if total == 0:
        return 100.0
    return 100.0 * 2.0 * int((p & g).sum()) / total


def boundary(mask: np.ndarray) -> np.ndarray:
    """Pixels of ``mask`` with at least one 4-neighbour outside it (image border counts as outside)."""
    m = np.pad(np.asarray(mask, dtype=bool), 1, constant_values=False)
    inner = m[1:-1, 1:-1]
    interior = m[:-2, 1:-1] & m[2:, 1:-1] & m[1:-1, :-2] & m[1:-1, 2:]
    return inner & ~interior


def asd_2d(pred_mask: np.ndarray, gt_mask: np.ndarray, category: int) -> float:
    """Average symmetric surface distance in pixels: mean of the two directed boundary averages."""
    p = np.asarray(pred_mask) == category
    g = np.asarray(gt_mask) == category
    if not p.any() or not g.any():
        raise UndefinedDistanceError(f"undefined surface distance: category {category} empty in "
                                     f"{'prediction' if not p.any() else 'ground truth'}")
    bp = np.argwhere(boundary(p)).astype(np.float64)
    bg = np.argwhere(boundary(g)).astype(np.float64)
    d_pg, _ = cKDTree(bg).query(bp)
    d_gp, _ = cKDTree(bp).query(bg)
    return 0.5 * (float(d_pg.mean()) + float(d_gp.mean()))


@dataclass
class EvalReport:
    dice: np.ndarray  # (L,) percent, averaged over images
    asd: np.ndarray  # (L,) pixels, nan when undefined on every image
    num_images: int
    foreground: tuple[int, ...] = field(default=())

    @property
    def mean_dice(self) -> float:
        return float(np.mean(self.dice[list(self.foreground)]))

    @property
    def mean_asd(self) -> float:
        vals = self.asd[list(self.foreground)]
        vals = vals[np.isfinite(vals)]
        return float(vals.mean()) if vals.size else float("nan")

    def write_csv(self, path) -> None:
        with open(path, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(("category", "dice", "asd"))
            for i, (d, a) in enumerate(zip(self.dice, self.asd)):
                w.writerow((i, f"{d:.6f}", "" if not np.isfinite(a) else f"{a:.6f}"))
            w.writerow(("mean_foreground", f"{self.mean_dice:.6f}",
                        "" if not np.isfinite(self.mean_asd) else f"{self.mean_asd:.6f}"))

    def summary(self) -> str:
        lines = [f"{'category':>15} {'dice(%)':>9} {'asd(px)':>9}"]
        for i, (d, a) in enumerate(zip(self.dice, self.asd)):
            lines.append(f"{i:>15} {d:9.2f} {a:9.2f}")
        lines.append(f"{'mean_foreground':>15} {self.mean_dice:9.2f} {self.mean_asd:9.2f}")
        return "\n".join(lines)


def evaluate_masks(preds: np.ndarray, gts: np.ndarray, num_classes: int) -> EvalReport:
    """Per-image Dice/ASD averaged over images; ASD skips images where it is undefined."""
    preds, gts = np.asarray(preds), np.asarray(gts)
    dice = np.zeros((len(preds), num_classes))
    asd_sum = np.zeros(num_classes)
    asd_n = np.zeros(num_classes)
    for n, (p, g) in enumerate(zip(preds, gts)):
        for c in range(num_classes):
            dice[n, c] = dice_coefficient(p, g, c)
            try:
                asd_sum[c] += asd_2d(p, g, c)
                asd_n[c] += 1
            except UndefinedDistanceError:
                pass
    with np.errstate(invalid="ignore", divide="ignore"):
        asd = np.where(asd_n > 0, asd_sum / np.maximum(asd_n, 1), np.nan)
    return EvalReport(dice.mean(axis=0) if len(preds) else np.zeros(num_classes), asd, len(preds),
                      tuple(range(1, num_classes)))


@dataclass
class AngleHistogram:
    edges: np.ndarray
    counts: np.ndarray
    angles: np.ndarray

    @property
    def mean(self) -> float:
        return float(self.angles.mean()) if self.angles.size else float("nan")

    def fraction_below(self, limit: float = math.pi / 4) -> float:
        return float((self.angles < limit).mean()) if self.angles.size else float("nan")

    def write_csv(self, path) -> None:
        with open(path, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(("bin_start", "bin_end", "count"))
            for lo, hi, c in zip(self.edges[:-1], self.edges[1:], self.counts):
                w.writerow((f"{lo:.6f}", f"{hi:.6f}", int(c)))


def positive_angles(features, labels: LabelMap, protos: PrototypeSet) -> np.ndarray:
    """Angle between each assigned pixel's feature and its own category's prototype."""
    f = np.asarray(getattr(features, "data", features))
    y = labels.onehot.reshape(-1, labels.num_classes)
    keep = y.sum(axis=1) > 0
    if not keep.any():
        return np.zeros(0)
    flat = f.reshape(-1, f.shape[-1])[keep]
    cos = cosine_scores(flat, protos).data
    pos = (cos * y[keep]).sum(axis=1)
    return np.arccos(np.clip(pos, -1.0, 1.0))


def angle_histogram(features, labels: LabelMap, protos: PrototypeSet, bins: int = 18) -> AngleHistogram:
    angles = positive_angles(features, labels, protos)
    edges = np.linspace(0.0, math.pi, bins + 1)
    counts, _ = np.histogram(angles, bins=edges)
    return AngleHistogram(edges, counts, angles)
