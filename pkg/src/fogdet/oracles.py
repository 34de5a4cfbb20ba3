"""Independent reference implementations used by the verification command
and the test suite. Everything here is straight-line numpy, written without
the autodiff engine or the production code paths it checks."""

from __future__ import annotations

import itertools

import numpy as np


def softmax_ref(row: np.ndarray) -> np.ndarray:
    e = np.exp(row - row.max())
    return e / e.sum()


def self_attention_ref(x: np.ndarray, w_q: np.ndarray, w_k: np.ndarray,
                       w_v: np.ndarray,
                       v_w: np.ndarray | None = None,
                       broadcast_axis: str = "key") -> np.ndarray:
    """Single-head attention evaluated token by token."""
    q, k, v = x @ w_q, x @ w_k, x @ w_v
    d_k = w_q.shape[1]
    n = x.shape[0]
    out = np.zeros((n, v.shape[1]))
    for i in range(n):
        logits = np.array([q[i] @ k[j] / np.sqrt(d_k) for j in range(n)])
        if v_w is not None:
            flat = np.asarray(v_w).reshape(-1)
            logits = logits * (flat if broadcast_axis == "key" else flat[i])
        out[i] = softmax_ref(logits) @ v
    return out


def multi_head_ref(q_in, k_in, v_in, w_qs, w_ks, w_vs, w_o) -> np.ndarray:
    """Multi-head attention from independent single-head evaluations."""
    heads = []
    d_k = w_qs[0].shape[1]
    for w_q, w_k, w_v in zip(w_qs, w_ks, w_vs):
        q, k, v = q_in @ w_q, k_in @ w_k, v_in @ w_v
        out = np.zeros((q_in.shape[0], v.shape[1]))
        for i in range(q_in.shape[0]):
            logits = (k @ q[i]) / np.sqrt(d_k)
            out[i] = softmax_ref(logits) @ v
        heads.append(out)
    return np.concatenate(heads, axis=1) @ w_o


def brute_force_assignment(cost: np.ndarray):
    """Minimum-cost one-to-one assignment by exhaustive enumeration.

    cost is (queries x ground truths) with #gt <= #queries. Returns
    (pairs, total) with pairs as (query, gt) tuples sorted by gt.
    """
    m, g = cost.shape
    best, best_pairs = np.inf, None
    for perm in itertools.permutations(range(m), g):
        total = sum(cost[q, j] for j, q in enumerate(perm))
        if total < best:
            best = total
            best_pairs = [(q, j) for j, q in enumerate(perm)]
    return sorted(best_pairs, key=lambda p: p[1]), best


def iou_ref(a, b) -> float:
    """IoU via explicit corner arithmetic, no shared helpers."""
    ax1, ay1 = a[0] - a[2] / 2, a[1] - a[3] / 2
    ax2, ay2 = a[0] + a[2] / 2, a[1] + a[3] / 2
    bx1, by1 = b[0] - b[2] / 2, b[1] - b[3] / 2
    bx2, by2 = b[0] + b[2] / 2, b[1] + b[3] / 2
    ix = min(ax2, bx2) - max(ax1, bx1)
    iy = min(ay2, by2) - max(ay1, by1)
    if ix <= 0 or iy <= 0:
        return 0.0
    inter = ix * iy
    union = a[2] * a[3] + b[2] * b[3] - inter
    return inter / union if union > 0 else 0.0


def average_precision_ref(preds, gts, category, iou_thresh=0.5):
    """AP by direct definition: greedy confidence-ordered matching, then
    AP = sum over true positives of the best downstream precision / #GT.

    preds: list of (image_id, box, category, confidence).
    gts: image_id -> (boxes, labels).
    """
    total_gt = sum(1 for boxes, labels in gts.values()
                   for l in labels if l == category)
    if total_gt == 0:
        return None
    ordered = sorted([p for p in preds if p[2] == category], key=lambda p: -p[3])
    if not ordered:
        return 0.0
    matched = set()
    flags = []
    for image_id, box, _, _ in ordered:
        boxes, labels = gts.get(image_id, ([], []))
        best_j, best_iou = None, iou_thresh
        for j, (gb, gl) in enumerate(zip(boxes, labels)):
            if gl != category or (image_id, j) in matched:
                continue
            ov = iou_ref(box, gb)
            if ov >= best_iou:
                best_j, best_iou = j, ov
        if best_j is None:
            flags.append(False)
        else:
            matched.add((image_id, best_j))
            flags.append(True)
    precisions = []
    tp = 0
    for i, hit in enumerate(flags):
        tp += hit
        precisions.append(tp / (i + 1))
    ap = 0.0
    for i, hit in enumerate(flags):
        if hit:
            ap += max(precisions[i:]) / total_gt
    return ap


def map50_ref(preds, gts, num_categories, iou_thresh=0.5):
    aps = [average_precision_ref(preds, gts, c, iou_thresh)
           for c in range(num_categories)]
    present = [a for a in aps if a is not None]
    return aps, float(np.mean(present))
