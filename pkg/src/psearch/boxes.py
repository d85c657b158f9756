"""Box geometry shared by the proposal network and the detection head.

Boxes are ``(x1, y1, x2, y2)`` in image pixels, continuous coordinates.
"""
import math

import numpy as np
import torch

from psearch import kernels


def box_area(boxes: torch.Tensor) -> torch.Tensor:
    return (boxes[:, 2] - boxes[:, 0]) * (boxes[:, 3] - boxes[:, 1])


def box_iou(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    area_a, area_b = box_area(a), box_area(b)
    lt = torch.max(a[:, None, :2], b[None, :, :2])
    rb = torch.min(a[:, None, 2:], b[None, :, 2:])
    wh = (rb - lt).clamp(min=0)
    inter = wh[..., 0] * wh[..., 1]
    union = area_a[:, None] + area_b[None, :] - inter
    return torch.where(union > 0, inter / union.clamp(min=1e-12), torch.zeros_like(inter))


def clip_boxes(boxes: torch.Tensor, image_hw) -> torch.Tensor:
    h, w = image_hw
    x = boxes[:, 0::2].clamp(0, w)
    y = boxes[:, 1::2].clamp(0, h)
    return torch.stack([x[:, 0], y[:, 0], x[:, 1], y[:, 1]], dim=1)


def remove_small(boxes: torch.Tensor, min_size: float) -> torch.Tensor:
    ws, hs = boxes[:, 2] - boxes[:, 0], boxes[:, 3] - boxes[:, 1]
    return torch.nonzero((ws >= min_size) & (hs >= min_size)).flatten()


def nms(boxes: torch.Tensor, scores: torch.Tensor, iou_threshold: float) -> torch.Tensor:
    keep = kernels.nms(boxes.detach().cpu().double().numpy(),
                       scores.detach().cpu().double().numpy(), iou_threshold)
    return torch.from_numpy(keep).to(boxes.device)


class BoxCoder:
    """Standard (dx, dy, dw, dh) parameterization relative to reference boxes."""

    def __init__(self, weights=(1.0, 1.0, 1.0, 1.0), clip=math.log(1000.0 / 16)):
        self.weights = weights
        self.clip = clip

    def encode(self, gt: torch.Tensor, ref: torch.Tensor) -> torch.Tensor:
        wx, wy, ww, wh = self.weights
        rw, rh = ref[:, 2] - ref[:, 0], ref[:, 3] - ref[:, 1]
        rx, ry = ref[:, 0] + 0.5 * rw, ref[:, 1] + 0.5 * rh
        gw, gh = gt[:, 2] - gt[:, 0], gt[:, 3] - gt[:, 1]
        gx, gy = gt[:, 0] + 0.5 * gw, gt[:, 1] + 0.5 * gh
        return torch.stack([
            wx * (gx - rx) / rw,
            wy * (gy - ry) / rh,
            ww * torch.log(gw / rw),
            wh * torch.log(gh / rh),
        ], dim=1)

    def decode(self, deltas: torch.Tensor, ref: torch.Tensor) -> torch.Tensor:
        wx, wy, ww, wh = self.weights
        rw, rh = ref[:, 2] - ref[:, 0], ref[:, 3] - ref[:, 1]
        rx, ry = ref[:, 0] + 0.5 * rw, ref[:, 1] + 0.5 * rh
        dx, dy = deltas[:, 0] / wx, deltas[:, 1] / wy
        dw = (deltas[:, 2] / ww).clamp(max=self.clip)
        dh = (deltas[:, 3] / wh).clamp(max=self.clip)
        cx, cy = dx * rw + rx, dy * rh + ry
        w, h = torch.exp(dw) * rw, torch.exp(dh) * rh
        return torch.stack([cx - 0.5 * w, cy - 0.5 * h, cx + 0.5 * w, cy + 0.5 * h], dim=1)


def match_boxes(iou: torch.Tensor, pos_thresh: float, neg_thresh: float,
                allow_low_quality: bool = False) -> torch.Tensor:
    """Assign each candidate (column) a GT index (row); -1 negative, -2 ignore."""
    if iou.numel() == 0:
        return torch.full((iou.shape[1],), -1, dtype=torch.long)
    vals, idx = iou.max(dim=0)
    matches = idx.clone()
    matches[vals < pos_thresh] = -2
    matches[vals < neg_thresh] = -1
    if allow_low_quality:
        best = iou.max(dim=1, keepdim=True).values
        gt_i, cand = torch.nonzero((iou == best) & (best > 0), as_tuple=True)
        matches[cand] = idx[cand]
    return matches


def sample_pos_neg(matches: torch.Tensor, batch_size: int, pos_fraction: float,
                   generator: torch.Generator):
    pos = torch.nonzero(matches >= 0).flatten()
    neg = torch.nonzero(matches == -1).flatten()
    n_pos = min(len(pos), int(batch_size * pos_fraction))
    n_neg = min(len(neg), batch_size - n_pos)
    pos = pos[torch.randperm(len(pos), generator=generator)[:n_pos]]
    neg = neg[torch.randperm(len(neg), generator=generator)[:n_neg]]
    return pos, neg


def flip_boxes(boxes: np.ndarray, width: float) -> np.ndarray:
    boxes = np.asarray(boxes, dtype=np.float64).reshape(-1, 4).copy()
    x1 = width - boxes[:, 2]
    x2 = width - boxes[:, 0]
    boxes[:, 0], boxes[:, 2] = x1, x2
    return boxes
