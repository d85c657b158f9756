"""Pipeline configuration: nested dataclasses loaded from YAML with strict keys."""
from __future__ import annotations

import dataclasses
import typing
from dataclasses import dataclass, field
from pathlib import Path

import yaml

from psearch.backbone import FeatureSelection, LayerId
from psearch.errors import CatalogError, ConfigError


@dataclass
class BackboneConfig:
    seed: int = 0
    channels: int = 32
    embed_dim: int = 16
    signature_dim: int = 16
    signature_amp: float = 1.0
    semantic_amp: float = 3.0
    nuisance: float = 0.8
    latent_scale: float = 4.6  # 1 / std of clean toy latents, so noise meets unit-scale data
    det_timestep: int = 0
    reid_timestep: int = 0
    catalog: str | None = None  # optional catalog YAML


@dataclass
class SelectionConfig:
    detection_layer: str = "up.3.vit_key.0"
    detection_attention_layer: str = "up.3.vit.0"
    reid_layers: list[str] = field(default_factory=lambda: [
        "up.3.vit_key.1", "up.3.vit_key.0", "up.3.vit_value.0", "up.3.vit_query.0",
        "up.2.vit_query.2", "up.2.vit_value.1", "up.1.vit_query.2"])

    def build(self) -> FeatureSelection:
        try:
            return FeatureSelection(
                LayerId.parse(self.detection_layer),
                LayerId.parse(self.detection_attention_layer),
                tuple(LayerId.parse(s) for s in self.reid_layers),
            )
        except (ValueError, CatalogError) as exc:
            raise ConfigError(str(exc)) from exc


@dataclass
class DataConfig:
    path: str | None = None  # dataset directory; generated in memory when unset
    num_scenes: int = 200
    num_identities: int = 20
    persons_min: int = 1
    persons_max: int = 3
    image_size: list[int] = field(default_factory=lambda: [128, 128])
    unlabeled_fraction: float = 0.1
    test_fraction: float = 0.25
    gallery_size: int = 10
    seed: int = 0


@dataclass
class DgrpnConfig:
    enabled: bool = True
    tau: float = 0.5
    delta: float = 5.0
    peak_radius: int = 3
    beta_init: float = 2.0
    gamma_init: float = 0.0
    anchor_widths: list[float] = field(default_factory=lambda: [16.0, 24.0, 32.0])
    anchor_aspect: float = 2.2
    post_nms_top_n: int = 128


@dataclass
class MsfrnConfig:
    enabled: bool = True
    width: int = 256
    gamma_init: float = 1.0
    frequency_refinement: bool = True


@dataclass
class SfanConfig:
    enabled: bool = True
    prompts: list[str] = field(default_factory=lambda: ["head", "shirts", "pants", "shoes"])
    temperature: float = 1.0
    cache_dir: str | None = None  # prompt embeddings are encoded once and stored here


@dataclass
class HeadsConfig:
    stripes: int = 4
    embed_dim: int = 256
    queue_size: int = 500
    momentum: float = 0.5
    oim_temperature: float = 1.0 / 30
    reid_roi: list[int] = field(default_factory=lambda: [8, 4])
    det_roi: list[int] = field(default_factory=lambda: [7, 7])
    det_hidden: int = 256


@dataclass
class OptimConfig:
    epochs: int = 20
    batch_size: int = 5
    lr: float = 1e-4
    warmup_start: float = 1e-7
    warmup_epochs: int = 1
    milestones: list[float] = field(default_factory=lambda: [0.6, 0.85])
    decay: float = 0.1
    betas: list[float] = field(default_factory=lambda: [0.9, 0.999])
    weight_decay: float = 0.0
    flip: bool = True


@dataclass
class PipelineConfig:
    seed: int = 0
    backbone: BackboneConfig = field(default_factory=BackboneConfig)
    selection: SelectionConfig = field(default_factory=SelectionConfig)
    data: DataConfig = field(default_factory=DataConfig)
    dgrpn: DgrpnConfig = field(default_factory=DgrpnConfig)
    msfrn: MsfrnConfig = field(default_factory=MsfrnConfig)
    sfan: SfanConfig = field(default_factory=SfanConfig)
    heads: HeadsConfig = field(default_factory=HeadsConfig)
    optim: OptimConfig = field(default_factory=OptimConfig)

    @classmethod
    def toy(cls) -> "PipelineConfig":
        """Minute-scale settings for CPU runs."""
        cfg = cls()
        cfg.msfrn.width = 64
        cfg.heads.embed_dim = 128
        cfg.heads.queue_size = 50
        cfg.heads.det_hidden = 128
        cfg.dgrpn.post_nms_top_n = 64
        cfg.optim.epochs = 5
        cfg.optim.lr = 1e-3
        cfg.optim.batch_size = 4
        return cfg

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def dump(self) -> str:
        return yaml.safe_dump(self.to_dict(), sort_keys=False)

    def save(self, path):
        Path(path).write_text(self.dump())

    @classmethod
    def from_dict(cls, data) -> "PipelineConfig":
        return _build(cls, data, "config")

    @classmethod
    def load(cls, path, preset: str = "default") -> "PipelineConfig":
        p = Path(path)
        if not p.is_file():
            raise ConfigError(f"config file not found: {path}")
        try:
            data = yaml.safe_load(p.read_text()) or {}
        except yaml.YAMLError as exc:
            raise ConfigError(f"cannot parse {path}: {exc}") from exc
        base = preset_config(preset).to_dict()
        return cls.from_dict(_merge(base, data))


def preset_config(name: str) -> PipelineConfig:
    if name == "toy":
        return PipelineConfig.toy()
    if name == "default":
        return PipelineConfig()
    raise ConfigError(f"unknown preset {name!r}")


def _merge(base, override):
    if not isinstance(override, dict):
        return override
    out = dict(base) if isinstance(base, dict) else {}
    for k, v in override.items():
        out[k] = _merge(out.get(k), v) if isinstance(v, dict) else v
    return out


def _build(cls, data, where):
    if not isinstance(data, dict):
        raise ConfigError(f"{where}: expected a mapping, got {type(data).__name__}")
    hints = typing.get_type_hints(cls)
    fields = {f.name for f in dataclasses.fields(cls)}
    unknown = sorted(set(data) - fields)
    if unknown:
        raise ConfigError(f"{where}: unknown key(s) {unknown}")
    kwargs = {}
    for name, value in data.items():
        tp = hints[name]
        if dataclasses.is_dataclass(tp):
            kwargs[name] = _build(tp, value, f"{where}.{name}")
        else:
            kwargs[name] = _coerce(tp, value, f"{where}.{name}")
    return cls(**kwargs)


def _coerce(tp, value, where):
    origin = typing.get_origin(tp)
    args = typing.get_args(tp)
    if origin is typing.Union or (origin is not None and type(None) in args):
        if value is None:
            return None
        inner = [a for a in args if a is not type(None)]
        return _coerce(inner[0], value, where)
    if origin is list:
        if not isinstance(value, (list, tuple)):
            raise ConfigError(f"{where}: expected a list")
        return [_coerce(args[0], v, where) for v in value]
    if tp is bool:
        if not isinstance(value, bool):
            raise ConfigError(f"{where}: expected true/false")
        return value
    if tp in (int, float, str):
        if isinstance(value, bool) or (tp is not str and not isinstance(value, (int, float))):
            raise ConfigError(f"{where}: expected {tp.__name__}, got {value!r}")
        if tp is int and isinstance(value, float) and not value.is_integer():
            raise ConfigError(f"{where}: expected an integer, got {value!r}")
        return tp(value)
    return value
