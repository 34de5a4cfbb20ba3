"""Detection evaluation: IoU, per-category average precision with all-point
interpolation, and mAP at IoU 0.5."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import fogsim


@dataclass(frozen=True)
class EvalPrediction:
    image_id: str
    box: tuple                 # (cx, cy, w, h) normalized
    category: int
    confidence: float


def _corners(box):
    cx, cy, w, h = box
    return cx - w / 2, cy - h / 2, cx + w / 2, cy + h / 2


def iou(a, b) -> float:
    """Intersection over union of two center-format boxes; 0 for degenerate."""
    ax1, ay1, ax2, ay2 = _corners(a)
    bx1, by1, bx2, by2 = _corners(b)
    iw = max(0.0, min(ax2, bx2) - max(ax1, bx1))
    ih = max(0.0, min(ay2, by2) - max(ay1, by1))
    inter = iw * ih
    union = (ax2 - ax1) * (ay2 - ay1) + (bx2 - bx1) * (by2 - by1) - inter
    if union <= 0.0:
        return 0.0
    return inter / union


def average_precision(preds: list, gts: dict, category: int,
                      iou_thresh: float = 0.5) -> float | None:
    """AP for one category: greedy confidence-ordered matching, one match
    per ground-truth box, area under the precision envelope.

    gts maps image id -> (boxes, labels). Returns None when the category
    has no ground truth anywhere (AP undefined).
    """
    gt_boxes = {img: [b for b, l in zip(boxes, labels) if l == category]
                for img, (boxes, labels) in gts.items()}
    total_gt = sum(len(v) for v in gt_boxes.values())
    if total_gt == 0:
        return None
    cat_preds = sorted((p for p in preds if p.category == category),
                       key=lambda p: -p.confidence)
    if not cat_preds:
        return 0.0
    used = {img: [False] * len(v) for img, v in gt_boxes.items()}
    tp = np.zeros(len(cat_preds))
    fp = np.zeros(len(cat_preds))
    for i, p in enumerate(cat_preds):
        candidates = gt_boxes.get(p.image_id, [])
        best, best_iou = -1, iou_thresh
        for j, g in enumerate(candidates):
            ov = iou(p.box, g)
            if ov >= best_iou and not used[p.image_id][j]:
                best, best_iou = j, ov
        if best >= 0:
            used[p.image_id][best] = True
            tp[i] = 1.0
        else:
            fp[i] = 1.0
    cum_tp, cum_fp = np.cumsum(tp), np.cumsum(fp)
    recall = cum_tp / total_gt
    precision = cum_tp / np.maximum(cum_tp + cum_fp, 1e-12)
    # precision envelope, then integrate over recall steps
    mrec = np.concatenate([[0.0], recall, [1.0]])
    mpre = np.concatenate([[0.0], precision, [0.0]])
    for i in range(len(mpre) - 2, -1, -1):
        mpre[i] = max(mpre[i], mpre[i + 1])
    steps = np.flatnonzero(mrec[1:] != mrec[:-1])
    return float(np.sum((mrec[steps + 1] - mrec[steps]) * mpre[steps + 1]))


def map50(preds: list, gts: dict, categories=None,
          iou_thresh: float = 0.5) -> dict:
    """Per-category AP plus the unweighted mean over categories with GT."""
    if categories is None:
        categories = range(fogsim.NUM_CATEGORIES)
    if not any(labels for _, labels in gts.values()):
        raise ValueError("no ground truth in any image")
    per_category = {}
    present = []
    for cat in categories:
        ap = average_precision(preds, gts, cat, iou_thresh)
        name = fogsim.CATEGORIES[cat] if cat < fogsim.NUM_CATEGORIES else str(cat)
        per_category[name] = ap
        if ap is not None:
            present.append(ap)
    return {"per_category": per_category,
            "map50": float(np.mean(present))}


def predictions_from_output(output, image_id: str,
                            min_confidence: float = 0.05) -> list:
    """Turn raw detector output into scored predictions.

    Each query contributes its best non-background class when that class
    beats the confidence floor.
    """
    probs = output.class_probs()
    boxes = output.boxes.data
    no_object = probs.shape[1] - 1
    preds = []
    for q in range(probs.shape[0]):
        cat = int(np.argmax(probs[q, :no_object]))
        conf = float(probs[q, cat])
        if conf >= min_confidence:
            preds.append(EvalPrediction(image_id=image_id,
                                        box=tuple(boxes[q]),
                                        category=cat, confidence=conf))
    return preds


def format_table(rows: list) -> str:
    """Plain-text table: one row per (model, split) with per-category AP."""
    headers = ["Model", "Eval. Set", *[c.capitalize() for c in fogsim.CATEGORIES],
               "mAP"]
    lines = ["  ".join(f"{h:>10}" for h in headers)]
    for row in rows:
        cells = [row["model"], row["split"]]
        for cat in fogsim.CATEGORIES:
            ap = row["per_category"].get(cat)
            cells.append("-" if ap is None else f"{ap:.3f}")
        cells.append(f"{row['map50']:.3f}")
        lines.append("  ".join(f"{c:>10}" for c in cells))
    return "\n".join(lines) + "\n"
