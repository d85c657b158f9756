"""Module on/off ablations under a shared seed."""
from __future__ import annotations

import copy
import csv
import io
import itertools
import json
from dataclasses import asdict, dataclass

from psearch.pipeline.config import PipelineConfig
from psearch.pipeline.data import ToyDataset
from psearch.pipeline.features import FeatureStore
from psearch.pipeline.train import build_backbone, load_dataset, train

TOGGLES = ("dgrpn", "msfrn", "sfan")


@dataclass
class AblationRow:
    dgrpn: bool
    msfrn: bool
    sfan: bool
    seed: int
    det_ap: float | None = None
    det_recall: float | None = None
    reid_map: float | None = None
    reid_top1: float | None = None

    @property
    def key(self):
        return (self.dgrpn, self.msfrn, self.sfan)


@dataclass
class AblationReport:
    rows: list[AblationRow]

    def find(self, dgrpn=None, msfrn=None, sfan=None, seed=None) -> list[AblationRow]:
        want = {"dgrpn": dgrpn, "msfrn": msfrn, "sfan": sfan, "seed": seed}
        return [r for r in self.rows if all(v is None or getattr(r, k) == v for k, v in want.items())]

    def to_tsv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, delimiter="\t", lineterminator="\n")
        w.writerow(["dgrpn", "msfrn", "sfan", "seed", "det_ap", "det_recall", "reid_map", "reid_top1"])
        for r in self.rows:
            w.writerow([int(r.dgrpn), int(r.msfrn), int(r.sfan), r.seed]
                       + ["-" if v is None else f"{v:.6f}" for v in (r.det_ap, r.det_recall, r.reid_map, r.reid_top1)])
        return buf.getvalue()

    def to_json(self) -> str:
        return json.dumps([asdict(r) for r in self.rows], indent=2)


def all_combinations():
    return [dict(zip(TOGGLES, bits)) for bits in itertools.product((True, False), repeat=3)]


def ablate(cfg: PipelineConfig, combinations=None, seeds=None, mode: str = "joint",
           dataset: ToyDataset | None = None, store: FeatureStore | None = None) -> AblationReport:
    """Train once per toggle combination (and seed) and collect the metrics.

    Disabled modules fall back to: plain RPN features (DGRPN off), the
    aggregate-only refiner (MSFRN off), an identity pass (SFAN off).
    """
    combinations = combinations if combinations is not None else all_combinations()
    seeds = list(seeds) if seeds is not None else [cfg.seed]
    dataset = dataset or load_dataset(cfg)
    store = store or FeatureStore(build_backbone(cfg, dataset), dataset)
    rows = []
    for seed in seeds:
        for combo in combinations:
            unknown = set(combo) - set(TOGGLES)
            if unknown:
                raise KeyError(f"unknown toggle(s) {sorted(unknown)}")
            run = copy.deepcopy(cfg)
            run.seed = seed
            flags = {k: bool(combo.get(k, True)) for k in TOGGLES}
            run.dgrpn.enabled = flags["dgrpn"]
            run.msfrn.enabled = flags["msfrn"]
            run.sfan.enabled = flags["sfan"]
            m = train(run, mode, dataset=dataset, backbone=store.backbone, store=store).metrics
            rows.append(AblationRow(flags["dgrpn"], flags["msfrn"], flags["sfan"], seed,
                                    m.get("det_ap"), m.get("det_recall"), m.get("reid_map"), m.get("reid_top1")))
    return AblationReport(rows)
