"""Segmentation scores: confusion-matrix metrics and boundary F1."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np


class ConfusionMatrix:
    """Pixel counts indexed ``counts[gt, pred]``."""

    def __init__(self, num_classes, counts=None):
        self.num_classes = int(num_classes)
        if counts is None:
            counts = np.zeros((self.num_classes, self.num_classes), dtype=np.int64)
        self.counts = np.asarray(counts, dtype=np.int64)
        if self.counts.shape != (self.num_classes, self.num_classes) or (self.counts < 0).any():
            raise ValueError("confusion counts must be a non-negative K x K matrix")

    @property
    def total(self):
        return int(self.counts.sum())

    def copy(self):
        return ConfusionMatrix(self.num_classes, self.counts.copy())

    def __add__(self, other):
        return ConfusionMatrix(self.num_classes, self.counts + other.counts)


def accumulate_confusion(cm, pred, gt, ignore_label=None):
    """Add one prediction/ground-truth pair to ``cm`` in place and return it."""
    pred = np.asarray(pred)
    gt = np.asarray(gt)
    if pred.shape != gt.shape:
        raise ValueError(f"prediction shape {pred.shape} != ground truth shape {gt.shape}")
    K = cm.num_classes
    keep = np.ones(gt.shape, dtype=bool) if ignore_label is None else gt != ignore_label
    g = gt[keep].astype(np.int64)
    p = pred[keep].astype(np.int64)
    if g.size and (g.min() < 0 or g.max() >= K):
        raise ValueError(f"ground truth label out of range [0, {K}): {g.min()}..{g.max()}")
    if p.size and (p.min() < 0 or p.max() >= K):
        raise ValueError(f"predicted label out of range [0, {K}): {p.min()}..{p.max()}")
    cm.counts += np.bincount(g * K + p, minlength=K * K).reshape(K, K)
    return cm


def _require_counts(cm):
    if cm.total == 0:
        raise ValueError("confusion matrix is empty: no pixels were evaluated")


def global_accuracy(cm):
    _require_counts(cm)
    return float(np.trace(cm.counts) / cm.total)


def per_class_accuracy(cm):
    """Recall per class; NaN for classes absent from the ground truth."""
    rows = cm.counts.sum(axis=1)
    with np.errstate(invalid="ignore", divide="ignore"):
        return np.where(rows > 0, np.diag(cm.counts) / np.maximum(rows, 1), np.nan)


def class_average(cm):
    _require_counts(cm)
    return float(np.nanmean(per_class_accuracy(cm)))


def per_class_iou(cm):
    """IoU per class; NaN for classes absent from both prediction and ground truth."""
    tp = np.diag(cm.counts)
    union = cm.counts.sum(axis=1) + cm.counts.sum(axis=0) - tp
    return np.where(union > 0, tp / np.maximum(union, 1), np.nan)


def mean_iou(cm):
    _require_counts(cm)
    return float(np.nanmean(per_class_iou(cm)))


def extract_boundary(labels, c):
    """Pixels of class ``c`` with a 4-neighbour of another class.

    Neighbours outside the image do not count, so the image border alone
    never makes a pixel a boundary pixel.
    """
    lab = np.asarray(labels)
    mine = lab == c
    edge = np.zeros_like(mine)
    diff_v = lab[1:, :] != lab[:-1, :]
    diff_h = lab[:, 1:] != lab[:, :-1]
    edge[1:, :] |= diff_v
    edge[:-1, :] |= diff_v
    edge[:, 1:] |= diff_h
    edge[:, :-1] |= diff_h
    return mine & edge


def _column_distance(mask):
    # distance along axis 0 to the nearest True in the same column (inf if none)
    h = mask.shape[0]
    inf = np.inf
    d = np.full(mask.shape, inf)
    run = np.full(mask.shape[1], inf)
    for i in range(h):
        run = np.where(mask[i], 0, run + 1)
        d[i] = run
    run = np.full(mask.shape[1], inf)
    for i in range(h - 1, -1, -1):
        run = np.where(mask[i], 0, run + 1)
        d[i] = np.minimum(d[i], run)
    return d


def distance_to_mask(mask):
    """Exact Euclidean distance from every pixel to the nearest True pixel of ``mask``.

    Two passes: 1-D distances down each column, then the exact minimum of
    ``g(r, k)^2 + (c - k)^2`` over columns ``k`` along each row. Returns inf
    everywhere when ``mask`` is empty.
    """
    mask = np.asarray(mask, dtype=bool)
    if not mask.any():
        return np.full(mask.shape, np.inf)
    g2 = _column_distance(mask) ** 2
    w = mask.shape[1]
    cols = np.arange(w)
    dx2 = (cols[:, None] - cols[None, :]).astype(float) ** 2
    # (h, c, k) -> min over k
    d2 = np.min(g2[:, None, :] + dx2[None, :, :], axis=2)
    return np.sqrt(d2)


def default_theta(h, w):
    """Boundary tolerance: 0.75% of the image diagonal."""
    if h < 1 or w < 1:
        raise ValueError("image size must be positive")
    return 0.0075 * float(np.hypot(h, w))


def class_boundary_f1(pred, gt, c, theta):
    """Boundary F1 of class ``c``, or None when neither image has a boundary for it."""
    pb = extract_boundary(pred, c)
    gb = extract_boundary(gt, c)
    n_pred, n_gt = int(pb.sum()), int(gb.sum())
    if n_gt == 0 and n_pred == 0:
        return None
    if n_gt == 0 or n_pred == 0:
        return 0.0
    precision = float((distance_to_mask(gb)[pb] <= theta).sum()) / n_pred
    recall = float((distance_to_mask(pb)[gb] <= theta).sum()) / n_gt
    if precision + recall == 0:
        return 0.0
    return 2 * precision * recall / (precision + recall)


def image_bf(pred, gt, theta=None, ignore_label=None):
    """Mean boundary F1 over classes present in ``gt``; None if no class can be scored."""
    pred = np.asarray(pred)
    gt = np.asarray(gt)
    if pred.shape != gt.shape:
        raise ValueError(f"prediction shape {pred.shape} != ground truth shape {gt.shape}")
    if theta is None:
        theta = default_theta(*gt.shape)
    if theta < 0:
        raise ValueError("theta must be non-negative")
    scores = []
    for c in np.unique(gt):
        if ignore_label is not None and c == ignore_label:
            continue
        f1 = class_boundary_f1(pred, gt, c, theta)
        if f1 is not None:
            scores.append(f1)
    return float(np.mean(scores)) if scores else None


def bf_score(pred, gt, theta=None, ignore_label=None):
    """Dataset boundary F1: mean of per-image scores.

    ``pred`` and ``gt`` are single label maps (h, w) or stacks (n, h, w).
    Images without any scorable class are left out of the mean; if no image
    can be scored a ValueError is raised.
    """
    pred = np.asarray(pred)
    gt = np.asarray(gt)
    if pred.shape != gt.shape:
        raise ValueError(f"prediction shape {pred.shape} != ground truth shape {gt.shape}")
    if gt.ndim == 2:
        pred, gt = pred[None], gt[None]
    scores = [image_bf(p, g, theta, ignore_label) for p, g in zip(pred, gt)]
    kept = [s for s in scores if s is not None]
    if not kept:
        raise ValueError("no image has a ground-truth boundary to score")
    return float(np.mean(kept))


@dataclass
class MetricsReport:
    G: float
    C: float
    mIoU: float
    BF: float
    per_class_accuracy: list = field(default_factory=list)
    per_class_iou: list = field(default_factory=list)
    images_scored_for_bf: int = 0
    images_skipped_for_bf: int = 0

    def rows(self):
        return [("G", self.G), ("C", self.C), ("mIoU", self.mIoU), ("BF", self.BF)]


class SegmentationEvaluator:
    """Accumulates predictions image by image and produces a :class:`MetricsReport`."""

    def __init__(self, num_classes, ignore_label=None, theta=None):
        self.cm = ConfusionMatrix(num_classes)
        self.ignore_label = ignore_label
        self.theta = theta
        self.bf_scores = []
        self.bf_skipped = 0

    def update(self, pred, gt):
        pred = np.asarray(pred)
        gt = np.asarray(gt)
        if gt.ndim == 2:
            pred, gt = pred[None], gt[None]
        for p, g in zip(pred, gt):
            accumulate_confusion(self.cm, p, g, self.ignore_label)
            s = image_bf(p, g, self.theta, self.ignore_label)
            if s is None:
                self.bf_skipped += 1
            else:
                self.bf_scores.append(s)

    def report(self):
        bf = float(np.mean(self.bf_scores)) if self.bf_scores else 0.0
        return MetricsReport(
            G=global_accuracy(self.cm),
            C=class_average(self.cm),
            mIoU=mean_iou(self.cm),
            BF=bf,
            per_class_accuracy=[float(v) for v in per_class_accuracy(self.cm)],
            per_class_iou=[float(v) for v in per_class_iou(self.cm)],
            images_scored_for_bf=len(self.bf_scores),
            images_skipped_for_bf=self.bf_skipped,
        )
