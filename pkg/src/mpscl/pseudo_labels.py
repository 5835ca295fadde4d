"""Label maps and self-paced pseudo-label assignment from prototype scores."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .numerics import Tensor


class LabelError(ValueError):
    pass


@dataclass
class LabelMap:
    """One-hot (or all-zero, for unassigned pseudo-label pixels) category rows.

    ``onehot`` has shape (..., L); leading axes are typically (N, H, W).
    """

    onehot: np.ndarray
    pseudo: bool = False

    def __post_init__(self):
        self.onehot = np.asarray(self.onehot, dtype=np.float64)
        rows = self.onehot.sum(axis=-1)
        if not np.all((rows == 0) | (rows == 1)) or not np.all((self.onehot == 0) | (self.onehot == 1)):
            raise LabelError("label rows must be one-hot or all-zero")
        if not self.pseudo and np.any(rows == 0):
            bad = int(np.flatnonzero(rows.reshape(-1) == 0)[0])
            raise LabelError(f"ground-truth label map has an unassigned pixel at flat index {bad}")

    @classmethod
    def from_indices(cls, indices: np.ndarray, num_classes: int, pseudo: bool = False) -> "LabelMap":
        """Build from integer category indices; -1 marks an unassigned pixel."""
        idx = np.asarray(indices)
        if np.any(idx >= num_classes) or np.any(idx < -1):
            raise LabelError(f"category index outside [-1, {num_classes})")
        onehot = np.zeros(idx.shape + (num_classes,))
        assigned = idx >= 0
        onehot[assigned, idx[assigned]] = 1.0
        return cls(onehot, pseudo=pseudo)

    @property
    def num_classes(self) -> int:
        return self.onehot.shape[-1]

    @property
    def assigned(self) -> np.ndarray:
        return self.onehot.sum(axis=-1) > 0

    @property
    def indices(self) -> np.ndarray:
        return np.where(self.assigned, self.onehot.argmax(axis=-1), -1)

    def reshape(self, *shape) -> "LabelMap":
        return LabelMap(self.onehot.reshape(*shape, self.num_classes), pseudo=self.pseudo)


@dataclass
class ConfidenceReport:
    top_index: np.ndarray
    second_index: np.ndarray
    difference: np.ndarray
    mask: np.ndarray


def assign_pseudo_labels(scores, delta_th: float = 0.25, shape: tuple[int, ...] | None = None):
    """Label a pixel with its best-scoring category when the top-2 gap exceeds ``delta_th``.

    ``scores`` is a (P, L) array of cosine scores. A pixel whose maximum is
    attained by more than one category has gap 0 and is never labelled.
    Returns ``(LabelMap, ConfidenceReport)``; ``shape`` reshapes the pixel
    axis of both (e.g. to (N, H, W)).
    """
    s = np.asarray(scores.data if isinstance(scores, Tensor) else scores, dtype=np.float64)
    if s.ndim != 2:
        raise ValueError(f"scores must be (pixels, L), got {s.shape}")
    if s.shape[1] < 2:
        raise ValueError("pseudo-labelling needs L >= 2 categories (submaximum undefined)")
    order = np.argsort(-s, axis=1, kind="stable")
    top, second = order[:, 0], order[:, 1]
    rows = np.arange(s.shape[0])
    diff = s[rows, top] - s[rows, second]
    mask = (diff > delta_th) & (diff > 0)
    idx = np.where(mask, top, -1)
    labels = LabelMap.from_indices(idx, s.shape[1], pseudo=True)
    report = ConfidenceReport(top, second, diff, mask)
    if shape is not None:
        labels = labels.reshape(*shape)
        report = ConfidenceReport(top.reshape(shape), second.reshape(shape), diff.reshape(shape), mask.reshape(shape))
    return labels, report
