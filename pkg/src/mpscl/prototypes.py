"""Category prototypes: initialization, momentum refinement and cosine scoring."""
from __future__ import annotations

from dataclasses import dataclass, replace
from typing import Sequence

import numpy as np

from . import numerics as nx
from .numerics import Tensor
from .pseudo_labels import LabelMap


class EmptyCategoryError(ValueError):
    def __init__(self, categories: Sequence[int]):
        self.categories = list(categories)
        super().__init__(f"no labelled pixels for categories {self.categories}")


class ZeroNormError(ValueError):
    pass


@dataclass
class PrototypeSet:
    vectors: np.ndarray  # (L, d)
    iteration: int = 0
    alpha: float = 0.2

    def __post_init__(self):
        self.vectors = np.asarray(self.vectors, dtype=np.float64)
        if not 0.0 <= self.alpha <= 1.0:
            raise ValueError(f"momentum alpha={self.alpha} outside [0, 1]")

    @property
    def num_classes(self) -> int:
        return self.vectors.shape[0]

    @property
    def dim(self) -> int:
        return self.vectors.shape[1]


def _category_sums(features, labels) -> tuple[np.ndarray, np.ndarray]:
    sums = None
    counts = None
    for f, y in zip(features, labels):
        f = np.asarray(f.data if isinstance(f, Tensor) else f)
        y = y.onehot if isinstance(y, LabelMap) else np.asarray(y)
        fm = f.reshape(-1, f.shape[-1])
        ym = y.reshape(-1, y.shape[-1])
        if fm.shape[0] != ym.shape[0]:
            raise nx.ShapeError("prototype.features", ym.shape[0], fm.shape[0])
        s = ym.T @ fm
        c = ym.sum(axis=0)
        sums = s if sums is None else sums + s
        counts = c if counts is None else counts + c
    if sums is None:
        raise ValueError("no feature maps given")
    return sums, counts


def init_prototypes(features, labels, alpha: float = 0.2) -> PrototypeSet:
    """Mean source feature of every category over the whole initialization set."""
    sums, counts = _category_sums(features, labels)
    empty = np.flatnonzero(counts == 0)
    if empty.size:
        raise EmptyCategoryError(empty.tolist())
    vectors = sums / counts[:, None]
    norms = np.linalg.norm(vectors, axis=1)
    if np.any(norms == 0):
        raise ZeroNormError(f"prototype of category {int(np.flatnonzero(norms == 0)[0])} has zero norm")
    return PrototypeSet(vectors, iteration=0, alpha=alpha)


def refine_prototypes(protos: PrototypeSet, batch_features, batch_labels) -> PrototypeSet:
    """Momentum step c <- alpha*c + (1-alpha)*batch_mean for categories present in the batch."""
    sums, counts = _category_sums(batch_features, batch_labels)
    present = counts > 0
    vectors = protos.vectors.copy()
    a = protos.alpha
    means = sums[present] / counts[present, None]
    vectors[present] = a * vectors[present] + (1.0 - a) * means
    return replace(protos, vectors=vectors, iteration=protos.iteration + 1)


def normalized_prototypes(protos: PrototypeSet | np.ndarray) -> np.ndarray:
    c = protos.vectors if isinstance(protos, PrototypeSet) else np.asarray(protos, dtype=np.float64)
    norms = np.linalg.norm(c, axis=1)
    if np.any(norms == 0):
        raise ZeroNormError(f"prototype of category {int(np.flatnonzero(norms == 0)[0])} has zero norm")
    return c / norms[:, None]


def cosine_scores(features, protos: PrototypeSet | np.ndarray) -> Tensor:
    """Cosine similarity of every pixel feature with every prototype, shape (pixels, L).

    Differentiable with respect to ``features``; prototypes are constants.
    """
    f = features if isinstance(features, Tensor) else Tensor(features)
    d = f.shape[-1]
    flat = nx.reshape(f, (-1, d))
    norms_sq = (flat.data * flat.data).sum(axis=1)
    if np.any(norms_sq == 0):
        raise ZeroNormError(f"feature at pixel {int(np.flatnonzero(norms_sq == 0)[0])} has zero norm")
    c = normalized_prototypes(protos)
    if c.shape[1] != d:
        raise nx.ShapeError("cosine_scores", (c.shape[0], d), c.shape)
    norm = nx.sqrt(nx.tsum(nx.square(flat), axis=1, keepdims=True))
    return nx.matmul(flat / norm, c.T)
