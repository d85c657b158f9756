"""Training loop (joint or per-branch), evaluation and checkpoints."""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from psearch.backbone import (
    BackboneCatalog,
    FeatureSelection,
    SyntheticBackbone,
    default_catalog,
)
from psearch.dgrpn import AnchorConfig, DgrpnParams
from psearch.errors import ConfigError, TrainingError
from psearch.evaluation import (
    GalleryScene,
    SearchProtocol,
    SearchQuery,
    ap_small,
    detection_ap_recall,
    search_map_top1,
)
from psearch.heads import BoxHeadConfig, ReidHeadConfig
from psearch.model import (
    DetectionBranch,
    PersonSearchModel,
    ReidBranch,
    component_seed,
    group_by_level,
    reid_level_channels,
    trainable_overlap,
)
from psearch.pipeline.config import PipelineConfig
from psearch.pipeline.data import Protocol, ToyDataset, build_protocol, generate_toy_dataset
from psearch.pipeline.features import FeatureStore, cached_prompt_embeddings

MODES = ("joint", "detection_only", "reid_only")
LOSS_NAMES = ("rpn_cls", "rpn_reg", "det_cls", "det_reg", "oim")
COMPONENT_FILES = ("dgrpn.pt", "msfrn.pt", "sfan.pt", "heads.pt", "oim.pt")


def configure_determinism():
    torch.set_num_threads(1)
    torch.use_deterministic_algorithms(True)


# ---------------------------------------------------------------------------
# builders


def load_dataset(cfg: PipelineConfig) -> ToyDataset:
    d = cfg.data
    if d.path:
        return ToyDataset.load(d.path)
    return generate_toy_dataset(d.num_scenes, d.num_identities, (d.persons_min, d.persons_max), d.seed,
                                tuple(d.image_size), d.unlabeled_fraction, d.test_fraction)


def build_catalog(cfg: PipelineConfig) -> BackboneCatalog:
    if cfg.backbone.catalog:
        return BackboneCatalog.load(cfg.backbone.catalog)
    return default_catalog(cfg.backbone.channels, cfg.backbone.embed_dim)


def build_backbone(cfg: PipelineConfig, dataset: ToyDataset) -> SyntheticBackbone:
    b = cfg.backbone
    return SyntheticBackbone(dataset.annotations(), build_catalog(cfg), b.seed,
                             num_appearances=dataset.num_appearances, signature_dim=b.signature_dim,
                             signature_amp=b.signature_amp, semantic_amp=b.semantic_amp, nuisance=b.nuisance,
                             latent_scale=b.latent_scale,
                             prompts=tuple(cfg.sfan.prompts) if len(cfg.sfan.prompts) == 4 else
                             ("head", "shirts", "pants", "shoes"))


def build_model(cfg: PipelineConfig, backbone, num_identities: int,
                selection: FeatureSelection | None = None, up_stage_only: bool = True) -> PersonSearchModel:
    selection = selection or cfg.selection.build()
    catalog = backbone.catalog
    selection.validate(catalog, up_stage_only)
    det_spec = catalog.spec(selection.detection_layer)
    g = cfg.dgrpn
    try:
        params = DgrpnParams(g.tau, g.delta, g.peak_radius, None, g.beta_init, g.gamma_init)
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc
    anchors = AnchorConfig(widths=tuple(g.anchor_widths), aspect_ratios=(g.anchor_aspect,),
                           post_nms_top_n=g.post_nms_top_n)
    h = cfg.heads
    box_cfg = BoxHeadConfig(roi_size=tuple(h.det_roi), hidden=h.det_hidden)
    detection = DetectionBranch(det_spec.channels, det_spec.downscale, params, anchors, box_cfg,
                                enabled=g.enabled, seed=cfg.seed)
    reid_layers = list(selection.reid_layers)
    stride = min(catalog.spec(l).downscale for l in reid_layers)
    if len(cfg.sfan.prompts) < 2 and cfg.sfan.enabled:
        raise ConfigError("SFAN needs at least two part prompts")
    embeddings = (cached_prompt_embeddings(backbone, cfg.sfan.prompts, cfg.sfan.cache_dir)
                  if cfg.sfan.enabled else None)
    head_cfg = ReidHeadConfig(tuple(h.reid_roi), h.stripes, h.embed_dim, h.queue_size, h.momentum,
                              h.oim_temperature)
    reid = ReidBranch(reid_level_channels(catalog, reid_layers), stride, num_identities, cfg.msfrn.width,
                      embeddings, cfg.sfan.temperature, head_cfg, cfg.msfrn.enabled, cfg.sfan.enabled,
                      cfg.msfrn.gamma_init, cfg.msfrn.frequency_refinement, seed=cfg.seed)
    return PersonSearchModel(detection, reid, selection, reid_layers,
                             cfg.backbone.det_timestep, cfg.backbone.reid_timestep)


# ---------------------------------------------------------------------------
# checkpoints


def _state(module):
    return {} if module is None else {k: v.detach().clone() for k, v in module.state_dict().items()}


def save_checkpoint(model: PersonSearchModel, directory, cfg: PipelineConfig, meta: dict | None = None):
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    det, reid = model.detection, model.reid
    torch.save(_state(det.dgrpn), d / "dgrpn.pt")
    torch.save(_state(reid.refiner), d / "msfrn.pt")
    torch.save(_state(reid.sfan), d / "sfan.pt")
    torch.save({"box_head": _state(det.box_head), "stripe_encoder": _state(reid.head.encoder)}, d / "heads.pt")
    torch.save(_state(reid.head.oim), d / "oim.pt")
    cfg.save(d / "config.yaml")
    (d / "meta.json").write_text(json.dumps(meta or {}, indent=2, sort_keys=True))
    return d


def restore(model: PersonSearchModel, directory, branch: str = "all"):
    """Load the detection branch, the re-ID branch, or both from a checkpoint directory."""
    d = Path(directory)
    missing = [f for f in COMPONENT_FILES if not (d / f).is_file()]
    if missing:
        raise ConfigError(f"checkpoint {directory} lacks {missing}")
    heads = torch.load(d / "heads.pt")
    if branch in ("all", "detection"):
        model.detection.dgrpn.load_state_dict(torch.load(d / "dgrpn.pt"))
        model.detection.box_head.load_state_dict(heads["box_head"])
    if branch in ("all", "reid"):
        model.reid.refiner.load_state_dict(torch.load(d / "msfrn.pt"))
        if model.reid.sfan is not None:
            model.reid.sfan.load_state_dict(torch.load(d / "sfan.pt"))
        model.reid.head.encoder.load_state_dict(heads["stripe_encoder"])
        model.reid.head.oim.load_state_dict(torch.load(d / "oim.pt"))
    return model


def load_checkpoint(directory, dataset: ToyDataset | None = None, backbone=None):
    cfg = PipelineConfig.load(Path(directory) / "config.yaml")
    dataset = dataset or load_dataset(cfg)
    backbone = backbone or build_backbone(cfg, dataset)
    model = build_model(cfg, backbone, dataset.num_identities)
    return restore(model, directory), cfg, dataset, backbone


# ---------------------------------------------------------------------------
# training


@dataclass
class TrainResult:
    model: PersonSearchModel
    metrics: dict
    checkpoint: Path | None = None
    log_lines: list[str] = field(default_factory=list)


def lr_at(step: int, steps_per_epoch: int, cfg: PipelineConfig) -> float:
    o = cfg.optim
    warm = o.warmup_epochs * steps_per_epoch
    if step < warm:
        return o.warmup_start + (o.lr - o.warmup_start) * (step + 1) / warm
    epoch = step // steps_per_epoch
    passed = sum(epoch >= int(round(m * o.epochs)) for m in o.milestones)
    return o.lr * o.decay ** passed


def _fmt(x) -> str:
    return "-" if x is None else f"{x:.8e}"


def _det_batch(store, views, model, t):
    sel = model.selection
    feats = torch.stack([store.features(v.scene_id, v.flipped, t, [sel.detection_layer])[sel.detection_layer]
                         for v in views])
    attention = [store.attention(v.scene_id, v.flipped, t, sel) for v in views]
    targets = [torch.as_tensor(v.boxes, dtype=torch.float32) for v in views]
    return feats, attention, targets


def _reid_maps(store, views, layers, t):
    per = [store.features(v.scene_id, v.flipped, t, layers) for v in views]
    stacked = {l: torch.stack([p[l] for p in per]) for l in layers}
    return group_by_level(layers, stacked)


def train(cfg: PipelineConfig, mode: str = "joint", out_dir=None, dataset: ToyDataset | None = None,
          backbone=None, store: FeatureStore | None = None, evaluate: bool = True,
          selection: FeatureSelection | None = None, up_stage_only: bool = True) -> TrainResult:
    if mode not in MODES:
        raise ConfigError(f"mode must be one of {MODES}, got {mode!r}")
    configure_determinism()
    dataset = dataset or load_dataset(cfg)
    backbone = backbone or build_backbone(cfg, dataset)
    store = store or FeatureStore(backbone, dataset)
    digest = backbone.parameter_digest()
    model = build_model(cfg, backbone, dataset.num_identities, selection, up_stage_only)
    if trainable_overlap(model):
        raise TrainingError("detection and re-ID branches share trainable parameters")
    train_det = mode in ("joint", "detection_only")
    train_reid = mode in ("joint", "reid_only")
    o = cfg.optim
    optimizers = []
    if train_det:
        optimizers.append(torch.optim.Adam(model.detection_parameters(), lr=o.lr, betas=tuple(o.betas),
                                           weight_decay=o.weight_decay))
    if train_reid:
        optimizers.append(torch.optim.Adam(model.reid_parameters(), lr=o.lr, betas=tuple(o.betas),
                                           weight_decay=o.weight_decay))
    model.train()
    # data order/flips are mode independent; RoI sampling has its own stream
    data_rng = np.random.default_rng(component_seed(cfg.seed, "data"))
    det_gen = torch.Generator().manual_seed(component_seed(cfg.seed, "sampling"))
    train_ids = [s.scene_id for s in dataset.split("train")]
    steps_per_epoch = max(1, math.ceil(len(train_ids) / o.batch_size))
    log_path = None
    if out_dir is not None:
        Path(out_dir).mkdir(parents=True, exist_ok=True)
        log_path = Path(out_dir) / "metrics.tsv"
        log_path.write_text("")
    header = "\t".join(("step", "epoch", "lr", *LOSS_NAMES, "total"))
    lines = [header]
    _append(log_path, header)
    t_det, t_reid = model.det_timestep, model.reid_timestep
    step = 0
    for epoch in range(o.epochs):
        order = data_rng.permutation(len(train_ids))
        flips = data_rng.random(len(train_ids)) < 0.5 if o.flip else np.zeros(len(train_ids), bool)
        for b in range(steps_per_epoch):
            idx = order[b * o.batch_size:(b + 1) * o.batch_size]
            views = [store.view(train_ids[i], bool(flips[i])) for i in idx]
            lr = lr_at(step, steps_per_epoch, cfg)
            for opt in optimizers:
                for gparam in opt.param_groups:
                    gparam["lr"] = lr
                opt.zero_grad(set_to_none=True)
            losses = {}
            if train_det:
                feats, attention, targets = _det_batch(store, views, model, t_det)
                losses.update(model.detection.losses(feats, attention, views[0].image_hw, targets, det_gen))
            if train_reid:
                refined = model.reid.refine(_reid_maps(store, views, model.reid_layers, t_reid))
                losses.update(model.reid.loss(refined, [torch.as_tensor(v.boxes, dtype=torch.float32)
                                                        for v in views], [v.identities for v in views]))
            total = sum(losses.values())
            values = {k: float(v.detach()) for k, v in losses.items()}
            if not all(math.isfinite(v) for v in values.values()):
                _dump_nan(out_dir, step, epoch, views, values)
                raise TrainingError(f"non-finite loss at step {step}: {values}")
            total.backward()
            for opt in optimizers:
                opt.step()
            line = "\t".join([str(step), str(epoch), _fmt(lr), *(_fmt(values.get(k)) for k in LOSS_NAMES),
                              _fmt(float(total.detach()))])
            lines.append(line)
            _append(log_path, line)
            step += 1
    if backbone.parameter_digest() != digest:
        raise TrainingError("backbone parameters changed during training")
    model.eval()
    metrics = {"mode": mode, "steps": step}
    if evaluate:
        tasks = (("det",) if train_det else ()) + (("reid",) if train_reid else ())
        metrics.update(evaluate_model(model, store, dataset, build_protocol(dataset, cfg.data.gallery_size,
                                                                          cfg.data.seed), tasks))
    ckpt = None
    if out_dir is not None:
        ckpt = save_checkpoint(model, Path(out_dir) / "checkpoint", cfg,
                               {"mode": mode, "backbone_digest": digest, "steps": step})
        (Path(out_dir) / "results.json").write_text(json.dumps(metrics, indent=2, sort_keys=True))
    return TrainResult(model, metrics, ckpt, lines)


def _append(path, line):
    if path is not None:
        with open(path, "a") as fh:
            fh.write(line + "\n")


def _dump_nan(out_dir, step, epoch, views, values):
    if out_dir is None:
        return
    dump = {"step": step, "epoch": epoch, "losses": {k: repr(v) for k, v in values.items()},
            "batch": [{"scene": v.scene_id, "flipped": v.flipped, "boxes": v.boxes.tolist(),
                       "identities": v.identities.tolist()} for v in views]}
    Path(out_dir, "nan_dump.json").write_text(json.dumps(dump, indent=2))


# ---------------------------------------------------------------------------
# evaluation


@torch.no_grad()
def evaluate_model(model: PersonSearchModel, store: FeatureStore, dataset: ToyDataset, protocol: Protocol,
                   tasks=("det", "reid")) -> dict:
    """Detection AP/recall on test scenes; re-ID mAP/Top-1 on ground-truth boxes;
    full-search mAP/Top-1 on detected boxes when both branches are evaluated."""
    model.eval()
    test = dataset.split("test")
    out = {}
    detections = {}
    if "det" in tasks:
        sel = model.selection
        preds, gts = [], []
        for s in test:
            f = store.features(s.scene_id, False, model.det_timestep, [sel.detection_layer])[sel.detection_layer]
            attn = store.attention(s.scene_id, False, model.det_timestep, sel)
            boxes, scores = model.detection.detect(f, attn, tuple(s.image.shape[1:]))
            detections[s.scene_id] = (boxes, scores)
            preds.append((boxes.numpy(), scores.numpy()))
            gts.append(s.boxes)
        out["det_ap"], out["det_recall"] = detection_ap_recall(preds, gts)
        out["det_ap_small"] = ap_small(preds, gts)
    if "reid" in tasks:
        refined = {}
        for s in test:
            maps = _reid_maps(store, [store.view(s.scene_id)], model.reid_layers, model.reid_timestep)
            refined[s.scene_id] = model.reid.refine(maps)[0]
        queries = []
        for q in protocol.queries:
            s = dataset[q.scene_id]
            emb = model.reid.embed(refined[q.scene_id], torch.as_tensor(s.boxes[q.person:q.person + 1],
                                                                     dtype=torch.float32))[0]
            queries.append(SearchQuery(emb.numpy(), q.identity, q.scene_id))
        needed = sorted({sid for g in protocol.galleries for sid in g})
        gt_gallery = {}
        for sid in needed:
            s = dataset[sid]
            emb = model.reid.embed(refined[sid], torch.as_tensor(s.boxes, dtype=torch.float32)).numpy()
            gt_gallery[sid] = GalleryScene(s.boxes, emb, s.boxes, s.identities)
        res = search_map_top1(queries, gt_gallery, SearchProtocol(protocol.galleries))
        out["reid_map"], out["reid_top1"] = res.mAP, res.top1
        if "det" in tasks:
            det_gallery = {}
            for sid in needed:
                s = dataset[sid]
                boxes, _ = detections[sid]
                emb = (model.reid.embed(refined[sid], boxes).numpy() if len(boxes)
                       else np.zeros((0, model.reid.head.cfg.embed_dim)))
                det_gallery[sid] = GalleryScene(boxes.numpy(), emb, s.boxes, s.identities)
            res = search_map_top1(queries, det_gallery, SearchProtocol(protocol.galleries))
            out["search_map"], out["search_top1"] = res.mAP, res.top1
    return out
