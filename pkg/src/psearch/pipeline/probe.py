"""Per-layer and per-timestep probes: retrain the light heads and report one row each."""
from __future__ import annotations

import copy

from psearch.backbone import DEFAULT_ATTENTION_LAYER, FeatureSelection, LayerId
from psearch.errors import PersonSearchError
from psearch.evaluation import ProbeReport, ProbeRow
from psearch.pipeline.config import PipelineConfig
from psearch.pipeline.data import ToyDataset
from psearch.pipeline.features import FeatureStore
from psearch.pipeline.train import load_dataset, train


def _setup(backbone, recipe, dataset):
    recipe = recipe or PipelineConfig.toy()
    dataset = dataset or load_dataset(recipe)
    return recipe, dataset, FeatureStore(backbone, dataset)


def _mode(tasks):
    tasks = set(tasks)
    if tasks == {"det"}:
        return "detection_only"
    if tasks == {"reid"}:
        return "reid_only"
    return "joint"


def _row(name, metrics):
    return ProbeRow(name, metrics.get("det_recall"), metrics.get("det_ap"),
                    metrics.get("reid_map"), metrics.get("reid_top1"))


def run_layer_probe(backbone, layers, recipe: PipelineConfig | None = None,
                    dataset: ToyDataset | None = None, tasks=("det", "reid")) -> ProbeReport:
    """Each row feeds a single catalog layer to both heads (DGRPN prior still
    comes from the default attention layer)."""
    recipe, dataset, store = _setup(backbone, recipe, dataset)
    rows = []
    for layer in layers:
        name = str(layer)
        try:
            lid = layer if isinstance(layer, LayerId) else LayerId.parse(str(layer))
            backbone.catalog.spec(lid)
            selection = FeatureSelection(lid, DEFAULT_ATTENTION_LAYER, (lid,))
            cfg = copy.deepcopy(recipe)
            cfg.msfrn.enabled = False
            cfg.sfan.enabled = False
            res = train(cfg, _mode(tasks), dataset=dataset, backbone=backbone, store=store,
                        selection=selection, up_stage_only=False)
            rows.append(_row(lid.pretty, res.metrics))
        except (PersonSearchError, ValueError, KeyError) as exc:
            rows.append(ProbeRow(name, error=str(exc)))
    return ProbeReport(rows, "layer")


def run_timestep_probe(backbone, timesteps, recipe: PipelineConfig | None = None,
                       dataset: ToyDataset | None = None, tasks=("det", "reid")) -> ProbeReport:
    recipe, dataset, store = _setup(backbone, recipe, dataset)
    rows = []
    for t in timesteps:
        try:
            t = int(t)
            if not 0 <= t <= backbone.schedule.num_steps:
                raise ValueError(f"timestep {t} outside [0, {backbone.schedule.num_steps}]")
            cfg = copy.deepcopy(recipe)
            cfg.backbone.det_timestep = t
            cfg.backbone.reid_timestep = t
            res = train(cfg, _mode(tasks), dataset=dataset, backbone=backbone, store=store)
            rows.append(_row(str(t), res.metrics))
        except (PersonSearchError, ValueError) as exc:
            rows.append(ProbeRow(str(t), error=str(exc)))
    return ProbeReport(rows, "timestep")
