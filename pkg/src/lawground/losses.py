"""Detection and segmentation losses plus the evaluation metrics.

Boxes are (center-x, center-y, width, height), normalized to the image.
Detection: mean-reduced L1 plus generalized-IoU loss. Segmentation: binary
focal loss (constant-alpha convention) plus smoothed dice. The joint loss
is the plain sum, so the multi-task value is exactly the sum of the
single-task values.
"""

from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, NumericError, ShapeError
from .tensor import Tensor, absval, as_tensor, log, maximum, minimum

# guards 0/0 for degenerate (empty) boxes without disturbing regular values
_TINY = 1e-300

MODES = ("rec", "res", "multitask")


@dataclass
class LossWeights:
    l1: float = 1.0
    giou: float = 1.0
    focal: float = 4.0
    dice: float = 4.0
    focal_alpha: float = 0.25
    focal_gamma: float = 2.0


def l1_loss(box_true, box_pred):
    """Mean absolute component difference over the 4 box components."""
    return absval(as_tensor(box_true) - as_tensor(box_pred)).mean()


def _corners(box):
    # negative extents are clamped to empty boxes
    w = maximum(box[2], 0.0)
    h = maximum(box[3], 0.0)
    x1 = box[0] - w * 0.5
    x2 = box[0] + w * 0.5
    y1 = box[1] - h * 0.5
    y2 = box[1] + h * 0.5
    return x1, y1, x2, y2, w * h


def giou_loss(box_true, box_pred):
    """1 - GIoU, where GIoU = IoU - |C minus union| / |C| over the smallest
    enclosing box C. Lies in [0, 2]."""
    ax1, ay1, ax2, ay2, area_a = _corners(as_tensor(box_true))
    bx1, by1, bx2, by2, area_b = _corners(as_tensor(box_pred))
    iw = maximum(minimum(ax2, bx2) - maximum(ax1, bx1), 0.0)
    ih = maximum(minimum(ay2, by2) - maximum(ay1, by1), 0.0)
    inter = iw * ih
    union = area_a + area_b - inter
    iou = inter / maximum(union, _TINY)
    cw = maximum(ax2, bx2) - minimum(ax1, bx1)
    ch = maximum(ay2, by2) - minimum(ay1, by1)
    enclosing = cw * ch
    giou = iou - (enclosing - union) / maximum(enclosing, _TINY)
    return 1.0 - giou


def focal_loss(mask_true, mask_pred, alpha=0.25, gamma=2.0):
    """Mean over pixels of -alpha * (1 - p_t)^gamma * log(p_t).

    p_t is the predicted probability of the true class. With gamma=0,
    alpha=1 this is exactly mean binary cross-entropy.
    """
    pred = as_tensor(mask_pred)
    true = as_tensor(mask_true)
    if pred.shape != true.shape:
        raise ShapeError(f"mask shapes differ: {true.shape} vs {pred.shape}")
    if np.any(pred.data <= 0.0) or np.any(pred.data >= 1.0):
        raise NumericError("focal loss needs probabilities strictly inside (0, 1)")
    p_t = pred * true + (1.0 - pred) * (1.0 - true)
    return ((1.0 - p_t) ** float(gamma) * log(p_t)).mean() * (-float(alpha))


def dice_loss(mask_true, mask_pred, eps=1.0):
    """1 - (2*overlap + eps) / (sum_true + sum_pred + eps)."""
    pred = as_tensor(mask_pred)
    true = as_tensor(mask_true)
    if pred.shape != true.shape:
        raise ShapeError(f"mask shapes differ: {true.shape} vs {pred.shape}")
    overlap = (true * pred).sum()
    return 1.0 - (2.0 * overlap + eps) / (true.sum() + pred.sum() + eps)


def total_loss(box_true, box_pred, mask_true, mask_pred, weights=None,
               mode="multitask"):
    """Joint objective; returns (scalar Tensor, per-component float breakdown)."""
    if mode not in MODES:
        raise ConfigError(f"mode must be one of {MODES}, got {mode!r}")
    w = weights or LossWeights()
    parts = {}
    det = seg = None
    if mode in ("rec", "multitask"):
        part_l1 = l1_loss(box_true, box_pred)
        part_giou = giou_loss(box_true, box_pred)
        det = w.l1 * part_l1 + w.giou * part_giou
        parts["l1"] = part_l1.item()
        parts["giou"] = part_giou.item()
    if mode in ("res", "multitask"):
        part_focal = focal_loss(mask_true, mask_pred, w.focal_alpha, w.focal_gamma)
        part_dice = dice_loss(mask_true, mask_pred)
        seg = w.focal * part_focal + w.dice * part_dice
        parts["focal"] = part_focal.item()
        parts["dice"] = part_dice.item()
    if det is None:
        total = seg
    elif seg is None:
        total = det
    else:
        total = det + seg
    parts["total"] = total.item()
    return total, parts


# ---------------------------------------------------------------------------
# metrics (plain floats, no tape)


def box_iou(a, b):
    """IoU of two (cx, cy, w, h) boxes as a plain float."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    aw, ah = max(a[2], 0.0), max(a[3], 0.0)
    bw, bh = max(b[2], 0.0), max(b[3], 0.0)
    iw = max(min(a[0] + aw / 2, b[0] + bw / 2) - max(a[0] - aw / 2, b[0] - bw / 2), 0.0)
    ih = max(min(a[1] + ah / 2, b[1] + bh / 2) - max(a[1] - ah / 2, b[1] - bh / 2), 0.0)
    inter = iw * ih
    union = aw * ah + bw * bh - inter
    return inter / union if union > 0.0 else 0.0


def prec_at_05(pred_boxes, gt_boxes):
    """Fraction of pairs with IoU strictly greater than 0.5."""
    if len(pred_boxes) != len(gt_boxes):
        raise ShapeError(
            f"got {len(pred_boxes)} predictions for {len(gt_boxes)} ground truths")
    hits = sum(1 for p, g in zip(pred_boxes, gt_boxes) if box_iou(p, g) > 0.5)
    return hits / len(gt_boxes) if gt_boxes else 0.0


def mask_iou(pred, gt):
    pred = np.asarray(pred, dtype=bool)
    gt = np.asarray(gt, dtype=bool)
    if pred.shape != gt.shape:
        raise ShapeError(f"mask shapes differ: {pred.shape} vs {gt.shape}")
    union = np.logical_or(pred, gt).sum()
    if union == 0:
        return 1.0  # both empty
    return float(np.logical_and(pred, gt).sum()) / float(union)


def miou(pred_masks, gt_masks):
    """Mean over samples of binary mask IoU."""
    if len(pred_masks) != len(gt_masks):
        raise ShapeError(
            f"got {len(pred_masks)} predictions for {len(gt_masks)} ground truths")
    scores = [mask_iou(p, g) for p, g in zip(pred_masks, gt_masks)]
    return float(np.mean(scores)) if scores else 0.0
