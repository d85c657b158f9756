"""Detection head (RoI box classifier / regressor) and re-ID head (stripes + OIM)."""
from __future__ import annotations

import math
import warnings
from dataclasses import dataclass

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from psearch.boxes import (
    BoxCoder,
    box_iou,
    clip_boxes,
    match_boxes,
    nms,
    remove_small,
    sample_pos_neg,
)
from psearch.dgrpn import smooth_l1
from psearch.errors import ConfigError, LabelError

UNLABELED = -1


@dataclass
class BoundingBox:
    x1: float
    y1: float
    x2: float
    y2: float
    score: float | None = None
    identity: int = UNLABELED

    def __post_init__(self):
        if not (self.x2 > self.x1 and self.y2 > self.y1):
            raise ValueError(f"degenerate box {self.as_tuple()}")

    def as_tuple(self):
        return (self.x1, self.y1, self.x2, self.y2)

    @property
    def area(self):
        return (self.x2 - self.x1) * (self.y2 - self.y1)


@dataclass
class PersonEmbedding:
    vector: np.ndarray
    box: BoundingBox | None = None
    stripes: int = 4

    @property
    def parts(self):
        return np.split(self.vector, self.stripes)


# ---------------------------------------------------------------------------
# RoI-Align


def _bilinear_gather(feat: torch.Tensor, y: torch.Tensor, x: torch.Tensor) -> torch.Tensor:
    """Sample ``feat [C, H, W]`` at points ``y, x`` (same shape) -> ``[C, *y.shape]``.

    Points further than one pixel outside the map read as zero; points in the
    border band are clamped onto the edge.
    """
    c, h, w = feat.shape
    outside = (y < -1.0) | (y > h) | (x < -1.0) | (x > w)
    y = y.clamp(min=0)
    x = x.clamp(min=0)
    y0 = y.floor().long()
    x0 = x.floor().long()
    y_edge = y0 >= h - 1
    x_edge = x0 >= w - 1
    y0 = torch.where(y_edge, torch.full_like(y0, h - 1), y0)
    x0 = torch.where(x_edge, torch.full_like(x0, w - 1), x0)
    y = torch.where(y_edge, y0.to(y.dtype), y)
    x = torch.where(x_edge, x0.to(x.dtype), x)
    y1 = torch.where(y_edge, y0, y0 + 1)
    x1 = torch.where(x_edge, x0, x0 + 1)
    ly, lx = y - y0.to(y.dtype), x - x0.to(x.dtype)
    hy, hx = 1 - ly, 1 - lx
    flat = feat.reshape(c, -1)

    def at(yy, xx):
        return flat[:, (yy * w + xx).reshape(-1)].reshape(c, *yy.shape)

    out = (hy * hx) * at(y0, x0) + (hy * lx) * at(y0, x1) + (ly * hx) * at(y1, x0) + (ly * lx) * at(y1, x1)
    return torch.where(outside, torch.zeros_like(out), out)


def roi_align(features: torch.Tensor, boxes, output_size, spatial_scale: float = 1.0,
              sampling_ratio: int = -1, aligned: bool = True):
    """Bilinear RoI-Align of image-space ``boxes`` from ``features [C, H, W]``.

    Returns ``(crops [K, C, oh, ow], kept)`` where ``kept`` indexes the input
    boxes that survived; boxes with zero area after scaling are skipped with a
    warning.  ``sampling_ratio <= 0`` uses ``ceil(bin size)`` samples per axis.
    """
    oh, ow = (output_size, output_size) if isinstance(output_size, int) else output_size
    dtype = features.dtype
    boxes = torch.as_tensor(boxes, dtype=dtype).reshape(-1, 4)
    offset = 0.5 if aligned else 0.0
    scaled = boxes * spatial_scale - offset
    rw = scaled[:, 2] - scaled[:, 0]
    rh = scaled[:, 3] - scaled[:, 1]
    if not aligned:
        rw, rh = rw.clamp(min=1.0), rh.clamp(min=1.0)
    valid = (rw > 0) & (rh > 0)
    for k in torch.nonzero(~valid).flatten().tolist():
        warnings.warn(f"skipping degenerate RoI {boxes[k].tolist()}", RuntimeWarning, stacklevel=2)
    kept = torch.nonzero(valid).flatten()
    out = features.new_zeros((len(kept), features.shape[0], oh, ow))
    if len(kept) == 0:
        return out, kept
    bw, bh = rw[kept] / ow, rh[kept] / oh
    if sampling_ratio > 0:
        sy = torch.full_like(kept, sampling_ratio)
        sx = torch.full_like(kept, sampling_ratio)
    else:
        sy = torch.ceil(bh).long().clamp(min=1)
        sx = torch.ceil(bw).long().clamp(min=1)
    groups: dict[tuple[int, int], list[int]] = {}
    for i, key in enumerate(zip(sy.tolist(), sx.tolist())):
        groups.setdefault(key, []).append(i)
    for (ny, nx), members in groups.items():
        m = torch.as_tensor(members, dtype=torch.long)
        gy = (torch.arange(oh, dtype=dtype)[:, None] + (torch.arange(ny, dtype=dtype)[None, :] + 0.5) / ny)
        gx = (torch.arange(ow, dtype=dtype)[:, None] + (torch.arange(nx, dtype=dtype)[None, :] + 0.5) / nx)
        y1 = scaled[kept[m], 1][:, None, None]
        x1 = scaled[kept[m], 0][:, None, None]
        ys = (y1 + gy[None] * bh[m][:, None, None]).reshape(len(m), oh, 1, ny, 1)
        xs = (x1 + gx[None] * bw[m][:, None, None]).reshape(len(m), 1, ow, 1, nx)
        shape = (len(m), oh, ow, ny, nx)
        vals = _bilinear_gather(features, ys.expand(shape), xs.expand(shape))  # [C, K, oh, ow, ny, nx]
        out[m] = vals.mean(dim=(-2, -1)).transpose(0, 1)
    return out, kept


# ---------------------------------------------------------------------------
# re-ID head


def stripe_bounds(height: int, k: int):
    if k > height:
        raise ConfigError(f"{k} stripes do not fit a RoI of height {height}")
    return [(s * height // k, (s + 1) * height // k) for s in range(k)]


class StripeEncoder(nn.Module):
    """k horizontal stripes -> GAP -> per-stripe linear -> concat -> L2 norm."""

    def __init__(self, channels: int, stripes: int = 4, embed_dim: int = 256):
        super().__init__()
        if embed_dim % stripes:
            raise ConfigError("embedding width must be divisible by the stripe count")
        self.stripes = stripes
        self.embed_dim = embed_dim
        self.projections = nn.ModuleList([nn.Linear(channels, embed_dim // stripes) for _ in range(stripes)])

    def pooled(self, roi):
        return [roi[..., a:b, :].mean(dim=(-2, -1)) for a, b in stripe_bounds(roi.shape[-2], self.stripes)]

    def forward(self, roi):
        parts = [proj(p) for proj, p in zip(self.projections, self.pooled(roi))]
        return F.normalize(torch.cat(parts, dim=-1), dim=-1)


def stripe_encode(roi: torch.Tensor, encoder: StripeEncoder, box: BoundingBox | None = None) -> PersonEmbedding:
    with torch.no_grad():
        v = encoder(roi[None] if roi.dim() == 3 else roi)[0]
    return PersonEmbedding(v.cpu().numpy(), box, encoder.stripes)


class OIMLoss(nn.Module):
    """Online instance matching with a momentum lookup table and an unlabeled queue.

    Stored rows are buffers (no gradient flows into them).  Only the queue
    slots that have been written take part in the softmax.
    """

    def __init__(self, num_identities: int, embed_dim: int, queue_size: int = 500,
                 momentum: float = 0.5, temperature: float = 1.0 / 30):
        super().__init__()
        if not 0.0 <= momentum <= 1.0:
            raise ValueError("momentum must be in [0, 1]")
        if temperature <= 0:
            raise ValueError("temperature must be > 0")
        self.momentum = momentum
        self.temperature = temperature
        self.register_buffer("lut", torch.zeros(num_identities, embed_dim))
        self.register_buffer("queue", torch.zeros(queue_size, embed_dim))
        self.register_buffer("queue_head", torch.zeros((), dtype=torch.long))
        self.register_buffer("queue_filled", torch.zeros((), dtype=torch.long))

    @property
    def queue_size(self):
        return self.queue.shape[0]

    def logits(self, emb):
        n = int(self.queue_filled)
        table = torch.cat([self.lut, self.queue[:n]]).to(emb.dtype)
        return emb @ table.T / self.temperature

    def forward(self, emb: torch.Tensor, labels: torch.Tensor) -> torch.Tensor:
        labels = torch.as_tensor(labels, dtype=torch.long)
        bad = (labels >= self.lut.shape[0]) | (labels < UNLABELED)
        if bool(bad.any()):
            raise LabelError(f"labels {labels[bad].tolist()} outside lookup table of size {self.lut.shape[0]}")
        labeled = labels >= 0
        if bool(labeled.any()):
            loss = F.cross_entropy(self.logits(emb[labeled]), labels[labeled])
        else:
            loss = emb.sum() * 0.0
        if self.training:
            self.update(emb.detach(), labels)
        return loss

    @torch.no_grad()
    def update(self, emb, labels):
        m = self.momentum
        for e, y in zip(emb.to(self.lut.dtype), labels.tolist()):
            if y >= 0:
                self.lut[y] = F.normalize(m * self.lut[y] + (1 - m) * e, dim=0)
            elif self.queue_size > 0:
                self.queue[self.queue_head] = e
                self.queue_head.copy_((self.queue_head + 1) % self.queue_size)
                self.queue_filled.copy_(torch.clamp(self.queue_filled + 1, max=self.queue_size))


def oim_loss(embeddings, labels, state: OIMLoss):
    """Functional form: returns ``(loss, state)``; ``state`` is updated in place."""
    was_training = state.training
    state.train()
    loss = state(embeddings, labels)
    state.train(was_training)
    return loss, state


# ---------------------------------------------------------------------------
# detection head


def detection_losses(class_logits, box_deltas, labels, regression_targets):
    """Cross-entropy over {background, person} and Smooth-L1 on positive deltas.

    The box term is summed over positive coordinates and divided by the
    number of sampled RoIs; with no positives it is 0.
    """
    labels = torch.as_tensor(labels, dtype=torch.long)
    ce = F.cross_entropy(class_logits, labels)
    pos = torch.nonzero(labels > 0).flatten()
    if len(pos) == 0:
        return ce, box_deltas.sum() * 0.0
    reg = smooth_l1(box_deltas[pos] - regression_targets[pos], beta=1.0).sum() / labels.numel()
    return ce, reg


@dataclass
class BoxHeadConfig:
    roi_size: tuple[int, int] = (7, 7)
    hidden: int = 256
    batch_per_image: int = 64
    pos_fraction: float = 0.25
    fg_iou: float = 0.5
    bg_iou: float = 0.4
    score_thresh: float = 0.05
    nms_thresh: float = 0.4
    detections_per_image: int = 50


class DetectionHead(nn.Module):
    def __init__(self, channels: int, stride: int, cfg: BoxHeadConfig | None = None):
        super().__init__()
        self.cfg = cfg or BoxHeadConfig()
        self.stride = stride
        oh, ow = self.cfg.roi_size
        self.fc1 = nn.Linear(channels * oh * ow, self.cfg.hidden)
        self.fc2 = nn.Linear(self.cfg.hidden, self.cfg.hidden)
        self.cls_score = nn.Linear(self.cfg.hidden, 2)
        self.bbox_pred = nn.Linear(self.cfg.hidden, 4)
        nn.init.normal_(self.cls_score.weight, std=0.01)
        nn.init.normal_(self.bbox_pred.weight, std=0.001)
        nn.init.zeros_(self.cls_score.bias)
        nn.init.zeros_(self.bbox_pred.bias)
        self.coder = BoxCoder(weights=(10.0, 10.0, 5.0, 5.0))

    def _predict(self, f_det, boxes):
        crops, kept = roi_align(f_det, boxes, self.cfg.roi_size, 1.0 / self.stride)
        x = F.relu(self.fc1(crops.flatten(1)))
        x = F.relu(self.fc2(x))
        return self.cls_score(x), self.bbox_pred(x), kept

    def loss(self, f_dets, proposals, targets, generator):
        cfg = self.cfg
        logits, deltas, labels, reg_targets = [], [], [], []
        for f, props, gt in zip(f_dets, proposals, targets):
            gt = gt.to(f.dtype)
            cand = torch.cat([props.to(f.dtype), gt])
            matches = match_boxes(box_iou(gt, cand), cfg.fg_iou, cfg.bg_iou)
            pos, neg = sample_pos_neg(matches, cfg.batch_per_image, cfg.pos_fraction, generator)
            idx = torch.cat([pos, neg])
            lg, dl, kept = self._predict(f, cand[idx])
            idx = idx[kept]
            lab = (matches[idx] >= 0).long()
            tgt = torch.zeros((len(idx), 4), dtype=f.dtype)
            if bool(lab.any()):
                p = lab > 0
                tgt[p] = self.coder.encode(gt[matches[idx][p]], cand[idx][p])
            logits.append(lg)
            deltas.append(dl)
            labels.append(lab)
            reg_targets.append(tgt)
        ce, reg = detection_losses(torch.cat(logits), torch.cat(deltas), torch.cat(labels), torch.cat(reg_targets))
        return {"det_cls": ce, "det_reg": reg}

    @torch.no_grad()
    def detect(self, f_det, proposals, image_hw):
        """Final scored boxes for one image: ``(boxes [K, 4], scores [K])``."""
        cfg = self.cfg
        if len(proposals) == 0:
            return torch.zeros((0, 4)), torch.zeros(0)
        lg, dl, kept = self._predict(f_det, proposals)
        props = proposals[kept].to(dl.dtype)
        scores = torch.softmax(lg, dim=1)[:, 1]
        boxes = clip_boxes(self.coder.decode(dl, props), image_hw)
        keep = torch.nonzero(scores > cfg.score_thresh).flatten()
        boxes, scores = boxes[keep], scores[keep]
        keep = remove_small(boxes, 1.0)
        boxes, scores = boxes[keep], scores[keep]
        keep = nms(boxes, scores, cfg.nms_thresh)[: cfg.detections_per_image]
        return boxes[keep], scores[keep]


@dataclass
class ReidHeadConfig:
    roi_size: tuple[int, int] = (8, 4)
    stripes: int = 4
    embed_dim: int = 256
    queue_size: int = 500
    momentum: float = 0.5
    temperature: float = 1.0 / 30


class ReidHead(nn.Module):
    def __init__(self, channels: int, num_identities: int, cfg: ReidHeadConfig | None = None):
        super().__init__()
        self.cfg = cfg or ReidHeadConfig()
        self.encoder = StripeEncoder(channels, self.cfg.stripes, self.cfg.embed_dim)
        self.oim = OIMLoss(num_identities, self.cfg.embed_dim, self.cfg.queue_size,
                           self.cfg.momentum, self.cfg.temperature)
