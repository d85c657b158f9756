"""Pure-Python/numpy implementations of the loop-heavy kernels.

These define the reference semantics; ``_ckernels.pyx`` mirrors them line for
line and the test-suite checks both against each other.
"""
import numpy as np


def box_iou(a, b):
    a = np.asarray(a, dtype=np.float64).reshape(-1, 4)
    b = np.asarray(b, dtype=np.float64).reshape(-1, 4)
    area_a = (a[:, 2] - a[:, 0]) * (a[:, 3] - a[:, 1])
    area_b = (b[:, 2] - b[:, 0]) * (b[:, 3] - b[:, 1])
    lt = np.maximum(a[:, None, :2], b[None, :, :2])
    rb = np.minimum(a[:, None, 2:], b[None, :, 2:])
    wh = np.clip(rb - lt, 0.0, None)
    inter = wh[..., 0] * wh[..., 1]
    union = area_a[:, None] + area_b[None, :] - inter
    with np.errstate(divide="ignore", invalid="ignore"):
        iou = np.where(union > 0, inter / union, 0.0)
    return iou


def nms(boxes, scores, iou_threshold):
    boxes = np.ascontiguousarray(boxes, dtype=np.float64).reshape(-1, 4)
    scores = np.ascontiguousarray(scores, dtype=np.float64).reshape(-1)
    order = np.argsort(-scores, kind="stable")
    suppressed = np.zeros(len(order), dtype=bool)
    keep = []
    for pos, i in enumerate(order):
        if suppressed[i]:
            continue
        keep.append(i)
        rest = order[pos + 1:]
        rest = rest[~suppressed[rest]]
        if len(rest) == 0:
            continue
        ious = box_iou(boxes[i], boxes[rest])[0]
        suppressed[rest[ious > iou_threshold]] = True
    return np.asarray(keep, dtype=np.int64)


def local_maxima(m, radius):
    m = np.asarray(m, dtype=np.float64)
    h, w = m.shape
    out = []
    for i in range(h):
        for j in range(w):
            v = m[i, j]
            if v == 0.0:
                continue
            if radius == 0:
                out.append((i, j))
                continue
            is_peak = True
            for ii in range(max(0, i - radius), min(h, i + radius + 1)):
                for jj in range(max(0, j - radius), min(w, j + radius + 1)):
                    if ii == i and jj == j:
                        continue
                    u = m[ii, jj]
                    # ties go to the earlier pixel in row-major order
                    if u > v or (u == v and (ii, jj) < (i, j)):
                        is_peak = False
                        break
                if not is_peak:
                    break
            if is_peak:
                out.append((i, j))
    return np.asarray(out, dtype=np.int64).reshape(-1, 2)


def peak_stds(m, centers, radius, delta):
    """Returns ``[K, 2]`` array of (s_w, s_h): horizontal then vertical spread."""
    m = np.asarray(m, dtype=np.float64)
    centers = np.asarray(centers, dtype=np.int64).reshape(-1, 2)
    h, w = m.shape
    out = np.empty((len(centers), 2), dtype=np.float64)
    for k, (cy, cx) in enumerate(centers):
        y0, y1 = max(0, cy - radius), min(h, cy + radius + 1)
        x0, x1 = max(0, cx - radius), min(w, cx + radius + 1)
        win = m[y0:y1, x0:x1]
        dx2 = (np.arange(x0, x1) - cx).astype(np.float64) ** 2
        dy2 = (np.arange(y0, y1) - cy).astype(np.float64) ** 2
        sx = float((win * dx2[None, :]).sum())
        sy = float((win * dy2[:, None]).sum())
        out[k, 0] = max(delta, np.sqrt(sx))
        out[k, 1] = max(delta, np.sqrt(sy))
    return out


def greedy_match(pred_boxes, gt_boxes, iou_threshold, gt_ignore=None):
    """Match score-sorted predictions to ground truth, one GT per prediction.

    A prediction takes the highest-IoU still-unmatched non-ignored GT; only if
    none qualifies does it fall back to an ignored GT.  Returns the matched GT
    index per prediction, -1 for none.
    """
    pred_boxes = np.asarray(pred_boxes, dtype=np.float64).reshape(-1, 4)
    gt_boxes = np.asarray(gt_boxes, dtype=np.float64).reshape(-1, 4)
    n, g = len(pred_boxes), len(gt_boxes)
    if gt_ignore is None:
        gt_ignore = np.zeros(g, dtype=np.uint8)
    gt_ignore = np.asarray(gt_ignore, dtype=np.uint8)
    matched = np.full(n, -1, dtype=np.int64)
    if n == 0 or g == 0:
        return matched
    iou = box_iou(pred_boxes, gt_boxes)
    taken = np.zeros(g, dtype=bool)
    for p in range(n):
        best, best_iou = -1, iou_threshold
        for pass_ignored in (0, 1):
            for q in range(g):
                if taken[q] or gt_ignore[q] != pass_ignored:
                    continue
                if iou[p, q] >= best_iou and (best < 0 or iou[p, q] > best_iou):
                    best, best_iou = q, iou[p, q]
            if best >= 0:
                break
        if best >= 0:
            taken[best] = True
            matched[p] = best
    return matched
