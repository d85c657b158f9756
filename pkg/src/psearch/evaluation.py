"""Detection AP / recall / AP_small, person-search mAP / Top-1, and probe runners."""
from __future__ import annotations

import csv
import io
import json
import warnings
from dataclasses import asdict, dataclass, field
from typing import Sequence

import numpy as np

from psearch import kernels
from psearch.errors import ProtocolError


def _sorted_by_score(boxes, scores):
    boxes = np.asarray(boxes, dtype=np.float64).reshape(-1, 4)
    scores = np.asarray(scores, dtype=np.float64).reshape(-1)
    order = np.argsort(-scores, kind="stable")
    return boxes[order], scores[order]


def precision_envelope_ap(tp: np.ndarray, num_gt: int) -> float:
    """Area under the monotone precision envelope of a ranked TP/FP list."""
    if num_gt == 0 or len(tp) == 0:
        return 0.0
    tp = np.asarray(tp, dtype=np.float64)
    ctp = np.cumsum(tp)
    precision = ctp / np.arange(1, len(tp) + 1)
    recall = ctp / num_gt
    envelope = np.maximum.accumulate(precision[::-1])[::-1]
    prev = np.concatenate([[0.0], recall[:-1]])
    return float(np.sum((recall - prev) * envelope))


def _match_dataset(predictions, ground_truth, iou_threshold, gt_ignore=None):
    if len(predictions) != len(ground_truth):
        raise ProtocolError("predictions and ground truth cover different numbers of images")
    scores, tps, order_keys = [], [], []
    num_gt = 0
    for img, ((boxes, sc), gt) in enumerate(zip(predictions, ground_truth)):
        gt = np.asarray(gt, dtype=np.float64).reshape(-1, 4)
        ign = np.zeros(len(gt), dtype=np.uint8) if gt_ignore is None else np.asarray(gt_ignore[img], dtype=np.uint8)
        num_gt += int((ign == 0).sum())
        boxes, sc = _sorted_by_score(boxes, sc)
        matched = kernels.greedy_match(boxes, gt, iou_threshold, ign)
        for k, (s, m) in enumerate(zip(sc, matched)):
            if m >= 0 and ign[m]:
                continue
            scores.append(s)
            tps.append(1.0 if m >= 0 else 0.0)
            order_keys.append((img, k))
    scores = np.asarray(scores)
    # global ranking: score desc, ties by image then per-image rank
    order = np.lexsort((np.arange(len(scores)), -scores)) if len(scores) else np.zeros(0, dtype=int)
    return np.asarray(tps)[order] if len(tps) else np.zeros(0), num_gt


def detection_ap_recall(predictions, ground_truth, iou_threshold: float = 0.5):
    """``predictions``: per image ``(boxes [N, 4], scores [N])``; ``ground_truth``: per image boxes.

    Returns ``(AP, recall)``; recall is taken at the all-predictions point.
    """
    tp, num_gt = _match_dataset(predictions, ground_truth, iou_threshold)
    if len(tp) == 0 or num_gt == 0:
        return 0.0, 0.0
    return precision_envelope_ap(tp, num_gt), float(tp.sum() / num_gt)


def small_box_mask(ground_truth, quantile: float = 25.0):
    areas = [(g[:, 2] - g[:, 0]) * (g[:, 3] - g[:, 1])
             for g in (np.asarray(g, dtype=np.float64).reshape(-1, 4) for g in ground_truth)]
    flat = np.concatenate(areas) if areas else np.zeros(0)
    if len(flat) < 4:
        raise ProtocolError(f"AP_small needs at least 4 ground-truth boxes, got {len(flat)}")
    limit = np.percentile(flat, quantile)
    return [a <= limit for a in areas], float(limit)


def ap_small(predictions, ground_truth, iou_threshold: float = 0.5) -> float:
    """AP over ground truth in the bottom area quartile.

    Predictions that match a larger box are dropped rather than counted as
    false positives.
    """
    small, _ = small_box_mask(ground_truth)
    ignore = [(~m).astype(np.uint8) for m in small]
    tp, num_gt = _match_dataset(predictions, ground_truth, iou_threshold, ignore)
    return precision_envelope_ap(tp, num_gt)


# ---------------------------------------------------------------------------
# person search


@dataclass
class SearchQuery:
    embedding: np.ndarray
    identity: int
    scene_id: str


@dataclass
class GalleryScene:
    boxes: np.ndarray  # [N, 4] detections
    embeddings: np.ndarray  # [N, E]
    gt_boxes: np.ndarray  # [G, 4]
    gt_ids: np.ndarray  # [G]


@dataclass
class SearchProtocol:
    galleries: list[list[str]]  # per query, gallery scene ids in insertion order
    iou_threshold: float = 0.5


@dataclass
class SearchResult:
    mAP: float
    top1: float
    aps: list[float] = field(default_factory=list)
    excluded: list[int] = field(default_factory=list)

    def __iter__(self):
        return iter((self.mAP, self.top1))


def rank_query(query: SearchQuery, gallery_ids, scenes, iou_threshold):
    """Ranked correctness flags for one query and the number of relevant boxes."""
    sims, hits_per_det, owners = [], [], []
    num_rel = 0
    for sid in gallery_ids:
        g = scenes[sid]
        boxes = np.asarray(g.boxes, dtype=np.float64).reshape(-1, 4)
        targets = np.asarray(g.gt_boxes, dtype=np.float64).reshape(-1, 4)[np.asarray(g.gt_ids) == query.identity]
        num_rel += len(targets)
        if len(boxes) == 0:
            continue
        emb = np.asarray(g.embeddings, dtype=np.float64).reshape(len(boxes), -1)
        sims.append(emb @ np.asarray(query.embedding, dtype=np.float64))
        iou = kernels.box_iou(boxes, targets) if len(targets) else np.zeros((len(boxes), 0))
        for k in range(len(boxes)):
            hits_per_det.append(np.nonzero(iou[k] >= iou_threshold)[0])
            owners.append(sid)
    if not sims:
        return np.zeros(0, dtype=bool), num_rel
    sims = np.concatenate(sims)
    order = np.argsort(-sims, kind="stable")
    claimed = set()
    correct = np.zeros(len(order), dtype=bool)
    for rank, k in enumerate(order):
        for t in hits_per_det[k]:
            key = (owners[k], int(t))
            if key not in claimed:
                claimed.add(key)
                correct[rank] = True
                break
    return correct, num_rel


def search_map_top1(queries: Sequence[SearchQuery], scenes: dict, protocol: SearchProtocol) -> SearchResult:
    """Rank gallery detections by cosine similarity (embeddings are unit norm).

    A detection is correct if it overlaps a not-yet-claimed ground-truth box
    of the query identity with IoU >= threshold.  Per-query AP divides by the
    number of relevant ground-truth boxes, so missed detections cost recall.
    """
    aps, top1, excluded = [], [], []
    for qi, (q, gallery) in enumerate(zip(queries, protocol.galleries)):
        if len(gallery) == 0:
            warnings.warn(f"query {qi} has an empty gallery; excluded", RuntimeWarning, stacklevel=2)
            excluded.append(qi)
            continue
        correct, num_rel = rank_query(q, gallery, scenes, protocol.iou_threshold)
        if num_rel == 0:
            warnings.warn(f"query {qi} has no relevant gallery boxes; excluded", RuntimeWarning, stacklevel=2)
            excluded.append(qi)
            continue
        hits = np.cumsum(correct)
        ranks = np.arange(1, len(correct) + 1)
        aps.append(float(np.sum((hits / ranks)[correct]) / num_rel))
        top1.append(float(len(correct) > 0 and correct[0]))
    if not aps:
        return SearchResult(0.0, 0.0, [], excluded)
    return SearchResult(float(np.mean(aps)), float(np.mean(top1)), aps, excluded)


# ---------------------------------------------------------------------------
# probes


@dataclass
class ProbeRow:
    name: str
    det_recall: float | None = None
    det_ap: float | None = None
    reid_map: float | None = None
    reid_top1: float | None = None
    error: str | None = None


@dataclass
class ProbeReport:
    rows: list[ProbeRow]
    kind: str = "layer"

    def row(self, name) -> ProbeRow:
        for r in self.rows:
            if r.name == name:
                return r
        raise KeyError(name)

    def to_tsv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, delimiter="\t", lineterminator="\n")
        w.writerow(["Layer" if self.kind == "layer" else "Timestep", "Recall", "AP", "mAP", "Top-1", "error"])
        for r in self.rows:
            w.writerow([r.name] + [_pct(v) for v in (r.det_recall, r.det_ap, r.reid_map, r.reid_top1)]
                       + [r.error or ""])
        return buf.getvalue()

    def to_json(self) -> str:
        return json.dumps({"kind": self.kind, "rows": [asdict(r) for r in self.rows]}, indent=2)


def _pct(v):
    return "-" if v is None else f"{100 * v:.1f}"


def probe_layers(backbone, layers, recipe=None, dataset=None, tasks=("det", "reid")) -> ProbeReport:
    """Train the light heads on one layer at a time; one row per layer."""
    from psearch.pipeline.probe import run_layer_probe

    return run_layer_probe(backbone, layers, recipe, dataset, tasks)


def probe_timesteps(backbone, timesteps, recipe=None, dataset=None, tasks=("det", "reid")) -> ProbeReport:
    """Train the standard pipeline at each timestep; one row per timestep."""
    from psearch.pipeline.probe import run_timestep_probe

    return run_timestep_probe(backbone, timesteps, recipe, dataset, tasks)
