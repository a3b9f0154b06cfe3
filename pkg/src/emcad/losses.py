"""Deep-supervision losses and segmentation metrics.

Losses take raw logits of shape (n, k, h, w). Binary targets share the
prediction shape; multi-class targets are integer label maps of shape
(n, h, w) or (n, 1, h, w).
"""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np
from scipy import ndimage
from scipy.spatial import cKDTree

from . import tensor as T
from .tensor import ShapeError

LossFn = Callable[[np.ndarray, np.ndarray], float]


@dataclass(frozen=True)
class LossWeights:
    alpha: float = 1.0
    beta: float = 1.0
    gamma: float = 1.0
    zeta: float = 1.0
    delta: float = 1.0
    ce_weight: float = 0.3
    dice_weight: float = 0.7

    def __post_init__(self):
        for k, v in vars(self).items():
            if not math.isfinite(v):
                raise ValueError(f"loss weight {k} must be finite")

    @property
    def stage_weights(self) -> tuple[float, float, float, float, float]:
        return self.alpha, self.beta, self.gamma, self.zeta, self.delta


def _log_sigmoid(x):
    return -np.logaddexp(0.0, -x)


def _box_mean(t: np.ndarray, k: int) -> np.ndarray:
    """Mean over a k x k window centred on each pixel, ignoring out-of-image cells."""
    t = np.asarray(t, dtype=np.float64)
    ones = np.ones(t.shape[-2:])
    sums = ndimage.uniform_filter(t, size=(1, 1, k, k), mode="constant", cval=0.0)
    counts = ndimage.uniform_filter(ones, size=k, mode="constant", cval=0.0)
    return sums / counts


def boundary_weights(target: np.ndarray, window: int = 31, boost: float = 5.0) -> np.ndarray:
    return 1.0 + boost * np.abs(_box_mean(target, window) - target)


def bce_iou_weighted(pred_logits, target, pooling_window: int = 31, boost: float = 5.0) -> float:
    """Boundary-weighted BCE plus weighted soft IoU, averaged over the batch."""
    x = T.tensor4d(pred_logits).astype(np.float64)
    y = np.asarray(target, dtype=np.float64)
    if x.shape != y.shape:
        raise ShapeError(f"prediction {x.shape} and target {y.shape} differ")
    w = boundary_weights(y, pooling_window, boost)
    bce = -(y * _log_sigmoid(x) + (1 - y) * _log_sigmoid(-x))
    wsum = w.sum(axis=(2, 3))
    wbce = (w * bce).sum(axis=(2, 3)) / wsum
    p = 1.0 / (1.0 + np.exp(-x))
    inter = (p * y * w).sum(axis=(2, 3))
    union = ((p + y) * w).sum(axis=(2, 3))
    wiou = 1.0 - (inter + 1.0) / (union - inter + 1.0)
    return float((wbce + wiou).mean())


def _labels(target, n: int, h: int, w: int) -> np.ndarray:
    lab = np.asarray(target)
    if lab.ndim == 4 and lab.shape[1] == 1:
        lab = lab[:, 0]
    if lab.shape != (n, h, w):
        raise ShapeError(f"label map {lab.shape} does not match prediction ({n}, {h}, {w})")
    if not np.all(lab == np.round(lab)):
        raise ValueError("labels must be integers")
    return lab.astype(np.int64)


def ce_dice_loss(pred_logits, target_labels, w: LossWeights = LossWeights(),
                 smooth: float = 1.0) -> float:
    """Weighted softmax cross-entropy plus (1 - mean per-class soft DICE)."""
    x = T.tensor4d(pred_logits).astype(np.float64)
    n, k, h, wd = x.shape
    lab = _labels(target_labels, n, h, wd)
    if lab.min() < 0 or lab.max() >= k:
        raise ValueError(f"labels must lie in [0, {k})")
    logp = x - x.max(axis=1, keepdims=True)
    logp = logp - np.log(np.exp(logp).sum(axis=1, keepdims=True))
    onehot = np.eye(k)[lab].transpose(0, 3, 1, 2)
    ce = -(onehot * logp).sum(axis=1).mean()
    prob = np.exp(logp)
    inter = (prob * onehot).sum(axis=(0, 2, 3))
    denom = prob.sum(axis=(0, 2, 3)) + onehot.sum(axis=(0, 2, 3))
    dice = (2 * inter + smooth) / (denom + smooth)
    return float(w.ce_weight * ce + w.dice_weight * (1.0 - dice.mean()))


def _resized(maps: Sequence[np.ndarray], h: int, w: int) -> list[np.ndarray]:
    out = []
    for p in maps:
        p = T.tensor4d(p)
        out.append(p if p.shape[2:] == (h, w) else T.resize_bilinear(p, h, w))
    if len({p.shape for p in out}) != 1:
        raise ShapeError("prediction maps disagree after resizing")
    return out


def _target_hw(target) -> tuple[int, int]:
    t = np.asarray(target)
    return t.shape[-2], t.shape[-1]


def _logit_sum(maps: Sequence[np.ndarray]) -> np.ndarray:
    acc = np.zeros(maps[0].shape, dtype=np.float64)
    for p in maps:
        acc += p
    return acc.astype(T.DTYPE)


def additive_loss(maps: Sequence[np.ndarray], target, w: LossWeights = LossWeights(),
                  base: LossFn = bce_iou_weighted) -> float:
    """Weighted per-stage losses plus the loss of the summed logits."""
    maps = _resized(maps, *_target_hw(target))
    if len(maps) != 4:
        raise ShapeError(f"expected four prediction maps, got {len(maps)}")
    terms = list(maps) + [_logit_sum(maps)]
    total = 0.0
    for weight, p in zip(w.stage_weights, terms):
        if weight:
            total += weight * base(p, target)
    return total


def nonempty_subsets(n: int) -> list[tuple[int, ...]]:
    return [s for r in range(1, n + 1) for s in itertools.combinations(range(n), r)]


def mutation_loss(maps: Sequence[np.ndarray], target, base: LossFn = bce_iou_weighted,
                  average: bool = False) -> float:
    """Base loss summed over the logit sums of every non-empty subset of heads."""
    maps = _resized(maps, *_target_hw(target))
    subsets = nonempty_subsets(len(maps))
    # fsum makes the total independent of subset order
    total = math.fsum(base(_logit_sum([maps[i] for i in s]), target) for s in subsets)
    return total / len(subsets) if average else total


# --- metrics ---------------------------------------------------------------

def _masks(pred, gt):
    p = np.asarray(pred).astype(bool)
    g = np.asarray(gt).astype(bool)
    if p.shape != g.shape:
        raise ShapeError(f"mask shapes {p.shape} and {g.shape} differ")
    return p, g


def dice_score(pred_mask, gt_mask) -> float:
    p, g = _masks(pred_mask, gt_mask)
    denom = int(p.sum()) + int(g.sum())
    if denom == 0:
        return 100.0
    return 100.0 * 2 * int((p & g).sum()) / denom


def iou_score(pred_mask, gt_mask) -> float:
    p, g = _masks(pred_mask, gt_mask)
    union = int((p | g).sum())
    if union == 0:
        return 100.0
    return 100.0 * int((p & g).sum()) / union


def boundary(mask: np.ndarray) -> np.ndarray:
    """Foreground pixels with at least one background 8-neighbour (image edge counts as background)."""
    m = np.asarray(mask, dtype=bool)
    st = ndimage.generate_binary_structure(m.ndim, m.ndim)
    return m & ~ndimage.binary_erosion(m, structure=st, border_value=0)


def hd95(pred_mask, gt_mask, percentile: float = 95.0, pooled: bool = True) -> float:
    """95th-percentile symmetric boundary distance in pixels; NaN if a mask is empty.

    ``pooled=False`` takes the larger of the two per-direction percentiles.
    """
    p, g = _masks(pred_mask, gt_mask)
    if not p.any() or not g.any():
        return math.nan
    bp = np.argwhere(boundary(p)).astype(np.float64)
    bg = np.argwhere(boundary(g)).astype(np.float64)
    d_pg = cKDTree(bg).query(bp)[0]
    d_gp = cKDTree(bp).query(bg)[0]
    if pooled:
        return float(np.percentile(np.concatenate([d_pg, d_gp]), percentile))
    return float(max(np.percentile(d_pg, percentile), np.percentile(d_gp, percentile)))


def binarize(prob: np.ndarray, threshold: float = 0.5) -> np.ndarray:
    """Hard masks from activated maps: threshold for one channel, argmax otherwise."""
    prob = np.asarray(prob)
    if prob.shape[1] == 1:
        return prob[:, 0] > threshold
    return prob.argmax(axis=1)


def segmentation_metrics(prob: np.ndarray, target) -> dict[str, float]:
    """Per-sample DICE, IoU and HD95 averaged over the batch.

    Binary maps compare the thresholded probability against ``target > 0.5``.
    Multi-class maps average over foreground classes present in either mask.
    HD95 ignores samples where it is undefined.
    """
    prob = T.tensor4d(prob)
    pred = binarize(prob)
    t = np.asarray(target)
    if prob.shape[1] == 1:
        if t.shape not in (prob.shape, pred.shape):
            raise ShapeError(f"target {t.shape} does not match prediction {prob.shape}")
        gt = t.reshape(pred.shape) > 0.5
        pairs = [[(pred[i], gt[i])] for i in range(len(pred))]
    else:
        lab = _labels(t, prob.shape[0], prob.shape[2], prob.shape[3])
        pairs = []
        for i in range(len(pred)):
            present = [c for c in range(1, prob.shape[1]) if (pred[i] == c).any() or (lab[i] == c).any()]
            pairs.append([(pred[i] == c, lab[i] == c) for c in present])
    dsc, iou, hd = [], [], []
    for sample in pairs:
        if not sample:
            dsc.append(100.0)
            iou.append(100.0)
            continue
        dsc.append(float(np.mean([dice_score(p, g) for p, g in sample])))
        iou.append(float(np.mean([iou_score(p, g) for p, g in sample])))
        hs = [h for h in (hd95(p, g) for p, g in sample) if not math.isnan(h)]
        if hs:
            hd.append(float(np.mean(hs)))
    return {"dice": float(np.mean(dsc)), "iou": float(np.mean(iou)),
            "hd95": float(np.mean(hd)) if hd else math.nan}
