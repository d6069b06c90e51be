"""Classification, masked angular-margin, head-diversity and triplet objectives."""

from __future__ import annotations

import math
from typing import Mapping

import numpy as np

from .config import LossWeights
from .hmg import apply_mask
from .numeric import NonFiniteError, ShapeError, Tensor, ops

PART_NAMES = ("cls", "mcls", "hem", "tri")


def _check_batch(x: Tensor, labels: np.ndarray, num_classes: int, op: str) -> np.ndarray:
    labels = np.asarray(labels, dtype=np.int64)
    if x.shape[0] == 0:
        raise ValueError(f"{op}: empty batch")
    if labels.shape != (x.shape[0],):
        raise ShapeError(op, x.shape, labels.shape, detail="one label per sample")
    if (labels < 0).any() or (labels >= num_classes).any():
        raise ValueError(f"{op}: labels must lie in [0, {num_classes})")
    return labels


def _check_margin(m: float) -> None:
    if not 0.0 <= m < math.pi / 2:
        raise ValueError(f"angular margin {m} outside [0, pi/2)")


def _bmm_rows(x: Tensor, w: Tensor) -> Tensor:
    """Row-wise dot products: (B, c) with (B, C, c) -> (B, C)."""
    b, c = x.shape
    out = ops.matmul(ops.reshape(w, (b, w.shape[1], c)), ops.reshape(x, (b, c, 1)))
    return ops.reshape(out, (b, w.shape[1]))


def cosine_logits(x, prototypes) -> Tensor:
    """Cosine between each feature row and each prototype row, (B, C)."""
    x, prototypes = ops.as_tensor(x), ops.as_tensor(prototypes)
    if x.ndim != 2 or prototypes.ndim != 2 or x.shape[1] != prototypes.shape[1]:
        raise ShapeError("cosine_logits", x.shape, prototypes.shape)
    return ops.matmul(ops.l2_normalize(x), ops.transpose(ops.l2_normalize(prototypes)))


def masked_cosines(x, prototypes, mask, variant: str = "Pn") -> Tensor:
    """Similarity of each sample to its own masked prototype bank, (B, C).

    ``P``  mask the raw prototypes, then L2-normalise (a true cosine).
    ``Pn`` L2-normalise the prototypes, then mask (magnitude shrinks with the mask).
    ``F`` / ``Fn`` additionally mask the feature, before / after its normalisation.
    """
    x, prototypes, mask = ops.as_tensor(x), ops.as_tensor(prototypes), ops.as_tensor(mask)
    if mask.shape != x.shape:
        raise ShapeError("masked_cosines", x.shape, mask.shape)
    if variant in ("P", "F"):
        wm = ops.l2_normalize(apply_mask(prototypes, mask))
        feat = ops.l2_normalize(ops.mul(x, mask) if variant == "F" else x)
    elif variant in ("Pn", "Fn"):
        wm = apply_mask(ops.l2_normalize(prototypes), mask)
        feat = ops.l2_normalize(x)
        if variant == "Fn":
            feat = ops.mul(feat, mask)
    else:
        raise ValueError(f"unknown mask variant {variant!r}")
    return _bmm_rows(feat, wm)


def margin_softmax(cosines, labels: np.ndarray, scale: float, margin: float) -> Tensor:
    """Mean cross-entropy on ``scale * cos``, with ``margin`` added to the target angle."""
    cosines = ops.as_tensor(cosines)
    _check_margin(margin)
    b, ncls = cosines.shape
    labels = _check_batch(cosines, labels, ncls, "margin_softmax")
    if margin == 0.0:
        return ops.cross_entropy(ops.mul(cosines, scale), labels)
    rows = np.arange(b)
    target = ops.index(cosines, (rows, labels))
    shifted = ops.cos(ops.add(ops.arccos(target), margin))
    onehot = np.zeros((b, ncls), dtype=cosines.dtype)
    onehot[rows, labels] = 1.0
    delta = ops.mul(ops.reshape(ops.sub(shifted, target), (b, 1)), onehot)
    return ops.cross_entropy(ops.mul(ops.add(cosines, delta), scale), labels)


def cls_loss(x, prototypes, labels, scale: float = 30.0, margin: float = 0.0) -> Tensor:
    """Cosine-softmax loss of the plain branch against the shared prototypes."""
    x = ops.as_tensor(x)
    _check_batch(x, labels, ops.as_tensor(prototypes).shape[0], "cls_loss")
    return margin_softmax(cosine_logits(x, prototypes), labels, scale, margin)


def masked_cls_loss(x, prototypes, mask, labels, margin: float = 0.5, scale: float = 30.0,
                    variant: str = "Pn") -> Tensor:
    """Angular-margin loss of each sample against its own masked prototypes."""
    x = ops.as_tensor(x)
    _check_margin(margin)
    _check_batch(x, labels, ops.as_tensor(prototypes).shape[0], "masked_cls_loss")
    return margin_softmax(masked_cosines(x, prototypes, mask, variant), labels, scale, margin)


def hardest_pairs(dist: np.ndarray, labels: np.ndarray):
    """Batch-hard mining on a distance matrix.

    Returns (anchors, hardest positive, hardest negative) index arrays for every
    anchor that has at least one positive (other than itself) and one negative.
    """
    labels = np.asarray(labels)
    same = labels[:, None] == labels[None, :]
    pos = same & ~np.eye(len(labels), dtype=bool)
    neg = ~same
    valid = pos.any(1) & neg.any(1)
    anchors = np.flatnonzero(valid)
    dp = np.where(pos, dist, -np.inf)[anchors]
    dn = np.where(neg, dist, np.inf)[anchors]
    return anchors, dp.argmax(1), dn.argmin(1)


def _pair_dist(x: Tensor, i: np.ndarray, j: np.ndarray) -> Tensor:
    diff = ops.sub(ops.index(x, i), ops.index(x, j))
    return ops.sqrt(ops.clamp(ops.sum(ops.mul(diff, diff), axis=-1), lo=1e-12))


def triplet_loss(features, labels, margin: float = 0.3) -> Tensor:
    """Batch-hard triplet loss with Euclidean distances on raw features."""
    x = ops.as_tensor(features)
    labels = np.asarray(labels)
    if x.ndim != 2 or labels.shape != (x.shape[0],):
        raise ShapeError("triplet_loss", x.shape, labels.shape)
    xd = x.data.astype(np.float64)
    sq = ((xd[:, None, :] - xd[None, :, :]) ** 2).sum(-1)
    anchors, jp, jn = hardest_pairs(np.sqrt(np.maximum(sq, 1e-12)), labels)
    if anchors.size == 0:
        raise ValueError("triplet_loss: no anchor has both a positive and a negative")
    hinge = ops.relu(ops.add(ops.sub(_pair_dist(x, anchors, jp), _pair_dist(x, anchors, jn)), margin))
    return ops.mean(hinge)


def total_loss(parts: Mapping[str, Tensor], weights: LossWeights) -> Tensor:
    """alpha * cls + (1 - alpha) * mcls + beta * hem + tri."""
    for name in PART_NAMES:
        if name not in parts:
            raise KeyError(f"missing loss part {name!r}")
        if not np.isfinite(parts[name].data).all():
            raise NonFiniteError("total_loss", f"loss part {name}")
    a, b = weights.alpha, weights.beta
    total = ops.add(ops.mul(parts["cls"], a), ops.mul(parts["mcls"], 1.0 - a))
    total = ops.add(total, ops.mul(parts["hem"], b))
    return ops.add(total, parts["tri"])


def branch_margins(weights: LossWeights) -> tuple[float, float]:
    """Margins for the (plain, masked) branches from the S/A combination code."""
    code = weights.branch_losses
    return tuple(weights.margin_m if ch == "A" else 0.0 for ch in code)  # type: ignore[return-value]
