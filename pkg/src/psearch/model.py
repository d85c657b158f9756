"""Decoupled person-search model: a detection branch and a re-ID branch on a frozen backbone."""
from __future__ import annotations

import hashlib
from typing import Mapping, Sequence

import numpy as np
import torch
from torch import nn

from psearch.backbone import (
    Backbone,
    BackboneCatalog,
    FeatureSelection,
    LayerId,
)
from psearch.dgrpn import DGRPN, AnchorConfig, DgrpnParams, propose_regions
from psearch.heads import (
    BoundingBox,
    BoxHeadConfig,
    DetectionHead,
    PersonEmbedding,
    ReidHead,
    ReidHeadConfig,
    roi_align,
)
from psearch.msfrn import MSFRN, AggregateOnly
from psearch.sfan import SFAN


def component_seed(seed: int, name: str) -> int:
    h = hashlib.sha256(f"{seed}/{name}".encode()).digest()
    return int.from_bytes(h[:4], "little")


def seeded(seed: int, name: str, factory):
    """Build a module under its own RNG stream so adding or removing one
    component never shifts the initialization of another."""
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(component_seed(seed, name))
        return factory()


class DetectionBranch(nn.Module):
    def __init__(self, channels: int, stride: int, params: DgrpnParams | None = None,
                 anchors: AnchorConfig | None = None, box_cfg: BoxHeadConfig | None = None,
                 enabled: bool = True, seed: int = 0):
        super().__init__()
        self.dgrpn = seeded(seed, "dgrpn", lambda: DGRPN(channels, stride, params, anchors, enabled))
        self.box_head = seeded(seed, "box_head", lambda: DetectionHead(channels, stride, box_cfg))

    def losses(self, features, attention, image_hw, targets, generator):
        f_det, proposals, losses = self.dgrpn(features, attention, image_hw, targets, generator)
        losses.update(self.box_head.loss(f_det, [p for p, _ in proposals], targets, generator))
        return losses

    @torch.no_grad()
    def detect(self, features: torch.Tensor, attention, image_hw):
        """One image: ``features [C, H, W]`` -> ``(boxes [K, 4], scores [K])``."""
        f_det, _ = self.dgrpn.modulate(features[None], None if attention is None else [attention])
        proposals, _ = propose_regions(f_det[0], self.dgrpn, image_hw)
        return self.box_head.detect(f_det[0], proposals, image_hw)


class ReidBranch(nn.Module):
    """Refiner (MSFRN or the aggregate-only baseline), optional SFAN, stripe encoder + OIM."""

    def __init__(self, level_channels: Mapping[int, Sequence[int]], stride: int, num_identities: int,
                 width: int = 256, part_embeddings=None, sfan_temperature: float = 1.0,
                 head_cfg: ReidHeadConfig | None = None, use_msfrn: bool = True,
                 use_sfan: bool = True, gamma_init: float = 1.0, frequency_refinement: bool = True,
                 seed: int = 0):
        super().__init__()
        level_channels = {int(k): list(v) for k, v in level_channels.items()}
        self.stride = stride
        if use_msfrn:
            self.refiner = seeded(seed, "msfrn", lambda: MSFRN(level_channels, width, gamma_init=gamma_init,
                                                                  frequency_refinement=frequency_refinement))
        else:
            self.refiner = seeded(seed, "msfrn", lambda: AggregateOnly(level_channels, width))
        self.sfan = None
        if use_sfan:
            if part_embeddings is None:
                raise ValueError("SFAN needs part prompt embeddings")
            self.sfan = seeded(seed, "sfan", lambda: SFAN(width, part_embeddings, sfan_temperature))
        self.head = seeded(seed, "reid_head", lambda: ReidHead(width, num_identities, head_cfg))

    def refine(self, selected):
        return self.refiner(selected)

    def embed(self, refined: torch.Tensor, boxes) -> torch.Tensor:
        """One image: ``refined [C, H, W]`` and ``boxes [K, 4]`` -> unit embeddings ``[K, E]``."""
        crops, kept = roi_align(refined, boxes, self.head.cfg.roi_size, 1.0 / self.stride)
        if len(kept) != len(torch.as_tensor(boxes).reshape(-1, 4)):
            raise ValueError("re-ID boxes must have positive area")
        if self.sfan is not None:
            crops = self.sfan(crops)
        return self.head.encoder(crops)

    def loss(self, refined_batch, boxes_per_image, labels_per_image):
        emb = torch.cat([self.embed(r, b) for r, b in zip(refined_batch, boxes_per_image)])
        labels = torch.cat([torch.as_tensor(l, dtype=torch.long) for l in labels_per_image])
        return {"oim": self.head.oim(emb, labels)}


def reid_level_channels(catalog: BackboneCatalog, layers: Sequence[LayerId]):
    out: dict[int, list[int]] = {}
    for l in layers:
        out.setdefault(l.level if l.level is not None else 0, []).append(catalog.spec(l).channels)
    return dict(sorted(out.items()))


def group_by_level(layers: Sequence[LayerId], maps: Mapping[LayerId, torch.Tensor]):
    out: dict[int, list[torch.Tensor]] = {}
    for l in layers:
        out.setdefault(l.level if l.level is not None else 0, []).append(maps[l])
    return out


class PersonSearchModel(nn.Module):
    """Both branches plus the layer selection they read from."""

    def __init__(self, detection: DetectionBranch | None, reid: ReidBranch | None,
                 selection: FeatureSelection, reid_layers: Sequence[LayerId] | None = None,
                 det_timestep: int = 0, reid_timestep: int = 0):
        super().__init__()
        self.detection = detection
        self.reid = reid
        self.selection = selection
        self.reid_layers = list(reid_layers if reid_layers is not None else selection.reid_layers)
        self.det_timestep = det_timestep
        self.reid_timestep = reid_timestep

    def detection_parameters(self):
        return [] if self.detection is None else [p for p in self.detection.parameters() if p.requires_grad]

    def reid_parameters(self):
        return [] if self.reid is None else [p for p in self.reid.parameters() if p.requires_grad]

    @torch.no_grad()
    def forward_search(self, image, backbone: Backbone, scene=None, score_thresh: float = 0.5):
        """Detect every person in ``image`` and embed each detection.

        Detections scoring below ``score_thresh`` are dropped; evaluation keeps
        the low-score tail instead since AP integrates over it.
        Returns a list of ``(BoundingBox, PersonEmbedding)``.
        """
        if self.detection is None or self.reid is None:
            raise ValueError("end-to-end search needs both branches")
        image = np.asarray(image, dtype=np.float32)
        hw = image.shape[1:]
        det_out = backbone.extract_features(image, self.selection, self.det_timestep, scene=scene)
        det_feat = det_out.features[self.selection.detection_layer].data
        boxes, scores = self.detection.detect(det_feat, det_out.attention, hw)
        keep = scores >= score_thresh
        boxes, scores = boxes[keep], scores[keep]
        reid_out = backbone.extract_features(image, t=self.reid_timestep, scene=scene, layers=self.reid_layers)
        maps = {l: fm.data[None] for l, fm in reid_out.features.items()}
        refined = self.reid.refine(group_by_level(self.reid_layers, maps))[0]
        if len(boxes) == 0:
            return []
        emb = self.reid.embed(refined, boxes).numpy()
        stripes = self.reid.head.cfg.stripes
        out = []
        for b, s, e in zip(boxes.tolist(), scores.tolist(), emb):
            box = BoundingBox(*b, score=s)
            out.append((box, PersonEmbedding(e, box, stripes)))
        return out


def trainable_overlap(model: PersonSearchModel) -> set[int]:
    """ids of parameters trainable in both branches (empty by construction)."""
    det = {id(p) for p in model.detection_parameters()}
    reid = {id(p) for p in model.reid_parameters()}
    return det & reid
