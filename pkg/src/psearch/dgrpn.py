"""Attention-guided region proposals.

The "person" cross-attention map is thresholded, its peaks become centers of
anisotropic Gaussians whose spread comes from the local attention mass, and
the max over those Gaussians modulates the detection feature map before a
standard anchor-based RPN.

Coordinates: maps are indexed ``[row, col]``; a center is ``(cx, cy)`` =
``(col, row)``, ``s_w`` is the horizontal spread and ``s_h`` the vertical one.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from psearch import kernels
from psearch.backbone import AttentionMap
from psearch.boxes import (
    BoxCoder,
    box_iou,
    clip_boxes,
    match_boxes,
    nms,
    remove_small,
    sample_pos_neg,
)
from psearch.errors import ContractError


@dataclass
class DgrpnParams:
    tau: float = 0.5
    delta: float = 5.0
    peak_radius: int = 3
    std_radius: int | None = None  # defaults to peak_radius, or 3 in dense mode
    beta_init: float = 2.0
    gamma_init: float = 0.0

    def __post_init__(self):
        if not 0.0 <= self.tau <= 1.0:
            raise ValueError(f"tau must be in [0, 1], got {self.tau}")
        if self.delta <= 0:
            raise ValueError(f"delta must be > 0, got {self.delta}")
        if self.beta_init <= 0:
            raise ValueError("beta must be > 0")
        if self.peak_radius < 0:
            raise ValueError("peak radius must be >= 0")

    @property
    def window_radius(self) -> int:
        if self.std_radius is not None:
            return self.std_radius
        return self.peak_radius if self.peak_radius > 0 else 3


def _as_array(m) -> np.ndarray:
    if isinstance(m, AttentionMap):
        m = m.scores
    if isinstance(m, torch.Tensor):
        m = m.detach().cpu().numpy()
    return np.asarray(m, dtype=np.float64)


def threshold_attention(m, tau: float) -> np.ndarray:
    m = _as_array(m)
    if not 0.0 <= tau <= 1.0:
        raise ValueError(f"tau must be in [0, 1], got {tau}")
    if not np.all(np.isfinite(m)):
        raise ValueError("attention map has non-finite entries")
    return np.where(m > tau, m, 0.0)


def select_peaks(m, r: int) -> list[tuple[int, int]]:
    """Gaussian centers ``(cx, cy)`` in row-major order.

    ``r > 0`` keeps local maxima over a ``(2r+1)^2`` window (ties go to the
    first pixel in row-major order); ``r == 0`` keeps every nonzero pixel.
    """
    if r < 0:
        raise ValueError("radius must be >= 0")
    rc = kernels.local_maxima(_as_array(m), int(r))
    return [(int(c), int(rr)) for rr, c in rc]


def peak_std(m, center, r: int, delta: float) -> tuple[float, float]:
    m = _as_array(m)
    cx, cy = center
    h, w = m.shape
    if not (0 <= cx < w and 0 <= cy < h):
        raise ValueError(f"center {center} outside {w}x{h} map")
    s = kernels.peak_stds(m, np.array([[cy, cx]], dtype=np.int64), int(r), float(delta))[0]
    return float(s[0]), float(s[1])


def build_gaussian(center, std, beta, shape, dtype=torch.float64) -> torch.Tensor:
    """``exp(-(x-cx)^2/(beta s_w^2) - (y-cy)^2/(beta s_h^2))`` on an ``H x W`` grid."""
    cx, cy = center
    s_w, s_h = std
    h, w = shape
    beta = torch.as_tensor(beta, dtype=dtype)
    xs = torch.arange(w, dtype=dtype) - cx
    ys = torch.arange(h, dtype=dtype) - cy
    return torch.exp(-(xs[None, :] ** 2) / (beta * s_w**2) - (ys[:, None] ** 2) / (beta * s_h**2))


def gaussian_maps(centers, stds, beta, shape, dtype=torch.float64) -> torch.Tensor:
    """All peak Gaussians at once, ``[K, H, W]``."""
    h, w = shape
    if len(centers) == 0:
        return torch.zeros((0, h, w), dtype=dtype)
    beta = torch.as_tensor(beta, dtype=dtype)
    c = torch.as_tensor(np.asarray(centers, dtype=np.float64), dtype=dtype)
    s = torch.as_tensor(np.asarray(stds, dtype=np.float64), dtype=dtype)
    xs = torch.arange(w, dtype=dtype)[None, None, :] - c[:, 0, None, None]
    ys = torch.arange(h, dtype=dtype)[None, :, None] - c[:, 1, None, None]
    return torch.exp(-(xs**2) / (beta * s[:, 0, None, None] ** 2)
                     - (ys**2) / (beta * s[:, 1, None, None] ** 2))


def aggregate_gaussians(maps, shape, dtype=torch.float64) -> torch.Tensor:
    if len(maps) == 0:
        return torch.zeros(tuple(shape), dtype=dtype)
    if isinstance(maps, torch.Tensor):
        stacked = maps
    else:
        maps = [torch.as_tensor(m) for m in maps]
        bad = [tuple(m.shape) for m in maps if tuple(m.shape) != tuple(shape)]
        if bad:
            raise ValueError(f"maps have shape {bad[0]}, expected {tuple(shape)}")
        stacked = torch.stack(maps)
    if tuple(stacked.shape[1:]) != tuple(shape):
        raise ValueError(f"maps have shape {tuple(stacked.shape[1:])}, expected {tuple(shape)}")
    return stacked.max(dim=0).values


def modulate_features(f: torch.Tensor, g: torch.Tensor, gamma) -> torch.Tensor:
    """``f + gamma * (g * f)`` with ``g`` broadcast over channels."""
    if tuple(g.shape[-2:]) != tuple(f.shape[-2:]):
        raise ContractError(f"proposal map {tuple(g.shape[-2:])} vs feature map {tuple(f.shape[-2:])}")
    g = g.to(f.dtype).unsqueeze(-3)
    return f + gamma * (g * f)


def resample_map(m: np.ndarray, shape) -> np.ndarray:
    if tuple(m.shape) == tuple(shape):
        return m
    t = torch.from_numpy(np.ascontiguousarray(m, dtype=np.float64))[None, None]
    return F.interpolate(t, size=tuple(shape), mode="bilinear", align_corners=False)[0, 0].numpy()


def proposal_prior(m, params: DgrpnParams, beta, shape, dtype=torch.float64) -> torch.Tensor:
    """Attention map -> G_det at ``shape`` (differentiable in ``beta``)."""
    m = resample_map(_as_array(m), shape)
    th = threshold_attention(m, params.tau)
    rc = kernels.local_maxima(th, params.peak_radius)
    if len(rc) == 0:
        return torch.zeros(tuple(shape), dtype=dtype)
    stds = kernels.peak_stds(th, rc, params.window_radius, params.delta)
    centers = rc[:, ::-1].copy()
    return gaussian_maps(centers, stds, beta, shape, dtype).max(dim=0).values


# ---------------------------------------------------------------------------
# region proposal network


@dataclass
class AnchorConfig:
    widths: tuple[float, ...] = (16.0, 24.0, 32.0)
    aspect_ratios: tuple[float, ...] = (2.2,)  # height / width
    pre_nms_top_n: int = 600
    post_nms_top_n: int = 128
    nms_thresh: float = 0.7
    min_size: float = 2.0
    fg_iou: float = 0.5  # toy persons are small next to stride-8 anchors
    bg_iou: float = 0.3
    batch_per_image: int = 64
    pos_fraction: float = 0.5

    @property
    def num_anchors(self) -> int:
        return len(self.widths) * len(self.aspect_ratios)


def make_anchors(feature_hw, stride: int, cfg: AnchorConfig) -> torch.Tensor:
    """Anchors ordered (y, x, anchor) to match the RPN head's output layout."""
    base = []
    for r in cfg.aspect_ratios:
        for w in cfg.widths:
            h = w * r
            base.append([-w / 2, -h / 2, w / 2, h / 2])
    base = torch.tensor(base, dtype=torch.float32)
    fh, fw = feature_hw
    ys = (torch.arange(fh, dtype=torch.float32) + 0.5) * stride
    xs = (torch.arange(fw, dtype=torch.float32) + 0.5) * stride
    cy, cx = torch.meshgrid(ys, xs, indexing="ij")
    shifts = torch.stack([cx, cy, cx, cy], dim=-1).reshape(-1, 1, 4)
    return (shifts + base[None]).reshape(-1, 4)


class RPNHead(nn.Module):
    def __init__(self, channels: int, num_anchors: int):
        super().__init__()
        self.conv = nn.Conv2d(channels, channels, 3, padding=1)
        self.cls_logits = nn.Conv2d(channels, num_anchors, 1)
        self.bbox_pred = nn.Conv2d(channels, 4 * num_anchors, 1)
        for layer in (self.cls_logits, self.bbox_pred):
            nn.init.normal_(layer.weight, std=0.01)
            nn.init.zeros_(layer.bias)

    def forward(self, x):
        t = F.relu(self.conv(x))
        b = x.shape[0]
        logits = self.cls_logits(t).permute(0, 2, 3, 1).reshape(b, -1)
        deltas = self.bbox_pred(t).permute(0, 2, 3, 1).reshape(b, -1, 4)
        return logits, deltas


class DGRPN(nn.Module):
    """Gaussian attention prior + feature modulation + RPN.

    ``beta`` is kept in log space so it stays positive under gradient steps.
    """

    def __init__(self, channels: int, stride: int, params: DgrpnParams | None = None,
                 anchors: AnchorConfig | None = None, enabled: bool = True):
        super().__init__()
        self.params = params or DgrpnParams()
        self.anchor_cfg = anchors or AnchorConfig()
        self.stride = stride
        self.enabled = enabled
        self.log_beta = nn.Parameter(torch.tensor(float(np.log(self.params.beta_init))))
        self.gamma = nn.Parameter(torch.tensor(float(self.params.gamma_init)))
        self.head = RPNHead(channels, self.anchor_cfg.num_anchors)
        self.coder = BoxCoder()

    @property
    def beta(self):
        return self.log_beta.exp()

    def modulate(self, features: torch.Tensor, attention_maps) -> tuple[torch.Tensor, torch.Tensor]:
        """Returns ``(F_det, G_det)`` for a ``[B, C, H, W]`` batch."""
        b, _, h, w = features.shape
        if not self.enabled or attention_maps is None:
            return features, torch.zeros((b, h, w), dtype=features.dtype)
        g = torch.stack([proposal_prior(m, self.params, self.beta, (h, w), features.dtype)
                         for m in attention_maps])
        return modulate_features(features, g, self.gamma), g

    def forward(self, features, attention_maps, image_hw, targets=None, generator=None):
        f_det, g_det = self.modulate(features, attention_maps)
        logits, deltas = self.head(f_det)
        anchors = make_anchors(f_det.shape[-2:], self.stride, self.anchor_cfg)
        proposals = self.propose(logits.detach(), deltas.detach(), anchors, image_hw)
        losses = {}
        if targets is not None:
            losses = self.loss(logits, deltas, anchors, targets, generator)
        return f_det, proposals, losses

    def propose(self, logits, deltas, anchors, image_hw):
        cfg = self.anchor_cfg
        out = []
        for lg, dl in zip(logits, deltas):
            k = min(cfg.pre_nms_top_n, lg.numel())
            scores, idx = lg.topk(k)
            boxes = clip_boxes(self.coder.decode(dl[idx], anchors[idx]), image_hw)
            keep = remove_small(boxes, cfg.min_size)
            boxes, scores = boxes[keep], scores[keep]
            keep = nms(boxes, scores, cfg.nms_thresh)[: cfg.post_nms_top_n]
            out.append((boxes[keep], torch.sigmoid(scores[keep])))
        return out

    def loss(self, logits, deltas, anchors, targets, generator):
        cfg = self.anchor_cfg
        cls_losses, reg_losses = [], []
        for lg, dl, gt in zip(logits, deltas, targets):
            gt = gt.to(anchors.dtype)
            matches = match_boxes(box_iou(gt, anchors), cfg.fg_iou, cfg.bg_iou, allow_low_quality=True)
            pos, neg = sample_pos_neg(matches, cfg.batch_per_image, cfg.pos_fraction, generator)
            idx = torch.cat([pos, neg])
            labels = torch.cat([torch.ones(len(pos)), torch.zeros(len(neg))]).to(lg.dtype)
            cls_losses.append(F.binary_cross_entropy_with_logits(lg[idx], labels))
            if len(pos):
                tgt = self.coder.encode(gt[matches[pos]], anchors[pos]).to(dl.dtype)
                reg_losses.append(smooth_l1(dl[pos] - tgt).sum() / max(1, len(idx)))
            else:
                reg_losses.append(dl.sum() * 0.0)
        return {
            "rpn_cls": torch.stack(cls_losses).mean(),
            "rpn_reg": torch.stack(reg_losses).mean(),
        }


def smooth_l1(x: torch.Tensor, beta: float = 1.0) -> torch.Tensor:
    ax = x.abs()
    return torch.where(ax < beta, 0.5 * ax**2 / beta, ax - 0.5 * beta)


def propose_regions(f_det: torch.Tensor, rpn: DGRPN, image_hw):
    """Top-N scored proposals for one ``[C, H, W]`` detection feature map."""
    logits, deltas = rpn.head(f_det[None])
    anchors = make_anchors(f_det.shape[-2:], rpn.stride, rpn.anchor_cfg)
    return rpn.propose(logits.detach(), deltas.detach(), anchors, image_hw)[0]
