"""Training objectives: hybrid segmentation loss, margin contrastive loss, adversarial terms.

Predictions and labels are (N, H, W, L); a single (H, W, L) map is treated as
a batch of one. Per-image losses are summed over the batch.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import numerics as nx
from .numerics import Tensor
from .prototypes import PrototypeSet, ZeroNormError, cosine_scores
from .pseudo_labels import LabelError, LabelMap

DICE_EPS = 1e-5


@dataclass
class PredictionMap:
    logits: Tensor
    probs: Tensor

    @classmethod
    def from_logits(cls, logits: Tensor) -> "PredictionMap":
        return cls(logits, nx.softmax(logits, axis=-1))


def _probs(pred) -> Tensor:
    p = pred.probs if isinstance(pred, PredictionMap) else nx.as_tensor(pred)
    return nx.reshape(p, (1,) + p.shape) if p.ndim == 3 else p


def _onehot(labels, shape) -> np.ndarray:
    y = labels.onehot if isinstance(labels, LabelMap) else np.asarray(labels, dtype=np.float64)
    if y.ndim == 3:
        y = y[None]
    if y.shape != tuple(shape):
        raise nx.ShapeError("labels", tuple(shape), y.shape)
    return y


def class_weights(labels, num_classes: int | None = None) -> np.ndarray:
    """Inverse category frequency over the batch, counts floored at 1, normalized to mean 1."""
    y = labels.onehot if isinstance(labels, LabelMap) else np.asarray(labels)
    counts = y.reshape(-1, y.shape[-1]).sum(axis=0)
    if num_classes is not None and counts.size != num_classes:
        raise nx.ShapeError("class_weights", num_classes, counts.size)
    w = 1.0 / np.maximum(counts, 1.0)
    return w / w.mean()


def weighted_cross_entropy(pred, labels, weights=None) -> Tensor:
    p = _probs(pred)
    y = _onehot(labels, p.shape)
    rows = y.sum(axis=-1)
    if np.any(rows != 1):
        bad = int(np.flatnonzero(rows.reshape(-1) != 1)[0])
        raise LabelError(f"pixel {bad} has {int(rows.reshape(-1)[bad])} labels, expected exactly one")
    w = class_weights(y) if weights is None else np.asarray(weights, dtype=np.float64)
    if w.shape != (p.shape[-1],) or np.any(w <= 0):
        raise ValueError(f"weights must be {p.shape[-1]} positive reals")
    wpix = y @ w  # (N, H, W)
    logp_y = nx.tsum(nx.safe_log(p) * y, axis=-1)
    per_image = nx.tsum(logp_y * wpix, axis=(1, 2)) / wpix.sum(axis=(1, 2))
    return -nx.tsum(per_image)


def soft_dice_loss(pred, labels) -> Tensor:
    p = _probs(pred)
    y = _onehot(labels, p.shape)
    inter = nx.tsum(p * y, axis=(1, 2))
    denom = nx.tsum(p, axis=(1, 2)) + y.sum(axis=(1, 2))
    dice = (2.0 * inter + DICE_EPS) / (denom + DICE_EPS)
    return nx.tsum(nx.mean(1.0 - dice, axis=1))


def segmentation_loss(pred, labels, weights=None) -> Tensor:
    return weighted_cross_entropy(pred, labels, weights) + soft_dice_loss(pred, labels)


def self_information_map(pred) -> Tensor:
    """Elementwise -p log p with log clamped at 1e-7, so 0 log 0 evaluates to 0."""
    p = pred.probs if isinstance(pred, PredictionMap) else nx.as_tensor(pred)
    return -(p * nx.safe_log(p))


def margin_contrastive_loss(features, labels, prototypes, m: float = 0.4, tau: float = 1.0,
                            reduction: str = "sum") -> Tensor:
    """Prototype softmax loss with an additive angular margin on the positive pair.

    For each assigned pixel the positive logit is cos(min(theta + m, pi)) / tau
    and the negatives are the plain cosines / tau. ``reduction``: "sum" over
    assigned pixels; "mean" over assigned pixels; "image_mean" averages within
    each image of an (N, H, W, d) batch and sums the per-image means.
    """
    if tau <= 0:
        raise ValueError(f"temperature tau must be positive, got {tau}")
    if reduction not in ("sum", "mean", "image_mean"):
        raise ValueError(f"unknown reduction {reduction!r}")
    f = nx.as_tensor(features)
    d = f.shape[-1]
    y = labels.onehot if isinstance(labels, LabelMap) else np.asarray(labels, dtype=np.float64)
    if y.shape[:-1] != f.shape[:-1]:
        raise nx.ShapeError("margin_contrastive_loss.labels", f.shape[:-1], y.shape[:-1])
    protos = prototypes.vectors if isinstance(prototypes, PrototypeSet) else np.asarray(prototypes)
    if protos.shape != (y.shape[-1], d):
        raise nx.ShapeError("margin_contrastive_loss.prototypes", (y.shape[-1], d), protos.shape)
    ym = y.reshape(-1, y.shape[-1])
    idx = np.flatnonzero(ym.sum(axis=1) > 0)
    if idx.size == 0:
        return nx.tsum(f) * 0.0
    fa = nx.getitem(nx.reshape(f, (-1, d)), idx)
    ya = ym[idx]
    zero = np.flatnonzero((fa.data * fa.data).sum(axis=1) == 0)
    if zero.size:
        raise ZeroNormError(f"feature at pixel {int(idx[zero[0]])} has zero norm")
    cos = cosine_scores(fa, protos)
    pos = nx.tsum(cos * ya, axis=1)
    theta = nx.arccos(pos)
    margined = nx.cos(nx.clamp(theta + m, None, math.pi))
    logits = (cos * (1.0 - ya) + nx.reshape(margined, (-1, 1)) * ya) * (1.0 / tau)
    per_pixel = nx.logsumexp(logits, axis=1) - margined * (1.0 / tau)
    if reduction == "sum":
        return nx.tsum(per_pixel)
    if reduction == "mean":
        return nx.tsum(per_pixel) * (1.0 / idx.size)
    if reduction == "image_mean":
        per_image = int(np.prod(f.shape[1:-1])) if f.ndim == 4 else int(np.prod(f.shape[:-1]))
        image = idx // per_image
        counts = np.bincount(image)
        return nx.tsum(per_pixel * (1.0 / counts[image]))
    raise ValueError(f"unknown reduction {reduction!r}")


def bce_domain_loss(disc_output, target_is_source: bool) -> Tensor:
    """Mean binary cross-entropy against the constant domain label (1 source, 0 target)."""
    p = nx.as_tensor(disc_output)
    if target_is_source:
        return -nx.mean(nx.safe_log(p))
    return -nx.mean(nx.safe_log(1.0 - p))


def discriminator_loss(info_src, info_trg, disc) -> Tensor:
    return bce_domain_loss(disc(info_src), True) + bce_domain_loss(disc(info_trg), False)


def generator_adversarial_loss(info_trg, disc) -> Tensor:
    """Target maps scored as source; the discriminator's parameters get no gradient."""
    with disc.frozen():
        return bce_domain_loss(disc(info_trg), True)


def total_generator_loss(seg, c_src=0.0, c_trg=0.0, adv=0.0, gamma: float = 1.0, beta: float = 0.1,
                         lam: float = 0.003) -> Tensor:
    """seg + gamma*c_src + beta*c_trg + lam*adv; zero-weighted terms are left out of the graph."""
    total = nx.as_tensor(seg)
    for weight, term in ((gamma, c_src), (beta, c_trg), (lam, adv)):
        if weight != 0:
            total = total + nx.as_tensor(term) * weight
    return total
