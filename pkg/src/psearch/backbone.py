"""Frozen hierarchical feature backbone.

The :class:`Backbone` interface hands out per-layer feature maps, the
"person" cross-attention map and prompt embeddings.  :class:`SyntheticBackbone`
is a deterministic stand-in for a text-conditioned UNet that works at desk
scale: it builds a latent from the image plus identity and body-part channels
inside annotated person boxes, forward-noises that latent at the requested
timestep and reads every catalog layer out through a fixed random projection.
"""
from __future__ import annotations

import abc
import hashlib
import json
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np
import torch
import yaml

from psearch.errors import (
    BackboneUnavailableError,
    CatalogError,
    ConfigError,
    ContractError,
    GenerationError,
)

STAGES = ("down", "mid", "up")
BLOCKS = ("res", "vit", "vit_query", "vit_key", "vit_value", "sampler")
DEFAULT_PROMPTS = ("head", "shirts", "pants", "shoes")
PART_BANDS = ((0.0, 0.18), (0.18, 0.55), (0.55, 0.9), (0.9, 1.0))


@dataclass(frozen=True, order=True)
class LayerId:
    stage: str
    level: int | None
    block: str
    index: int = 0

    def __post_init__(self):
        if self.stage not in STAGES:
            raise ValueError(f"unknown stage {self.stage!r}")
        if self.block not in BLOCKS:
            raise ValueError(f"unknown block {self.block!r}")
        if self.stage == "mid":
            if self.level is not None:
                raise ValueError("mid-stage layers have no level")
        elif self.level is None or not 0 <= self.level <= 3:
            raise ValueError(f"{self.stage}-stage layers need a level in [0, 3]")
        if self.index < 0:
            raise ValueError("layer index must be >= 0")

    def __str__(self):
        if self.stage == "mid":
            return f"mid.{self.block}.{self.index}"
        return f"{self.stage}.{self.level}.{self.block}.{self.index}"

    @classmethod
    def parse(cls, text: str) -> "LayerId":
        parts = text.strip().split(".")
        try:
            if parts[0] == "mid" and len(parts) == 3:
                return cls("mid", None, parts[1], int(parts[2]))
            if len(parts) == 4:
                return cls(parts[0], int(parts[1]), parts[2], int(parts[3]))
        except ValueError as exc:
            raise CatalogError(f"malformed layer id {text!r}: {exc}") from None
        raise CatalogError(f"malformed layer id {text!r}")

    @property
    def pretty(self) -> str:
        """Table-style name, e.g. ``Up-stage Level3 ViT0 key``."""
        stage = {"down": "Down-stage", "mid": "Mid-stage", "up": "Up-stage"}[self.stage]
        level = "" if self.level is None else f" Level{self.level}"
        if self.block == "sampler":
            kind = "Downsampler" if self.stage == "down" else "Upsampler"
            return f"{stage}{level} {kind}"
        if self.block == "res":
            return f"{stage}{level} Res{self.index}"
        suffix = {"vit": "", "vit_query": " query", "vit_key": " key", "vit_value": " value"}
        return f"{stage}{level} ViT{self.index}{suffix[self.block]}"


@dataclass(frozen=True)
class LayerSpec:
    channels: int
    downscale: int


@dataclass
class BackboneCatalog:
    layers: dict[LayerId, LayerSpec]
    embed_dim: int = 16
    latent_stride: int = 8
    input_size: tuple[int, int] | None = None

    def __contains__(self, layer):
        return layer in self.layers

    def spec(self, layer: LayerId) -> LayerSpec:
        try:
            return self.layers[layer]
        except KeyError:
            raise CatalogError(f"layer {layer} is not in the backbone catalog") from None

    def check_image(self, image_hw, layers: Iterable[LayerId] = ()):
        h, w = image_hw
        if self.input_size is not None and tuple(self.input_size) != (h, w):
            raise ContractError(f"image is {h}x{w}, catalog expects {self.input_size}")
        factors = [self.latent_stride] + [self.spec(l).downscale for l in layers]
        for f in factors:
            if h % f or w % f:
                raise ContractError(f"image {h}x{w} is not divisible by downscale factor {f}")

    def to_dict(self) -> dict:
        return {
            "embed_dim": self.embed_dim,
            "latent_stride": self.latent_stride,
            "input_size": list(self.input_size) if self.input_size else None,
            "layers": [
                {"id": str(l), "channels": s.channels, "downscale": s.downscale}
                for l, s in self.layers.items()
            ],
        }

    @classmethod
    def from_dict(cls, data: Mapping) -> "BackboneCatalog":
        try:
            layers = {
                LayerId.parse(row["id"]): LayerSpec(int(row["channels"]), int(row["downscale"]))
                for row in data["layers"]
            }
            size = data.get("input_size")
            return cls(
                layers=layers,
                embed_dim=int(data.get("embed_dim", 16)),
                latent_stride=int(data.get("latent_stride", 8)),
                input_size=tuple(size) if size else None,
            )
        except (KeyError, TypeError) as exc:
            raise ConfigError(f"invalid catalog config: {exc}") from None

    def save(self, path):
        Path(path).write_text(yaml.safe_dump(self.to_dict(), sort_keys=False))

    @classmethod
    def load(cls, path) -> "BackboneCatalog":
        try:
            data = yaml.safe_load(Path(path).read_text())
        except FileNotFoundError:
            raise ConfigError(f"catalog file {path} not found") from None
        return cls.from_dict(data)


def level_downscale(stage: str, level: int | None, latent_stride: int = 8) -> int:
    """Spatial downscale of a UNet level relative to the input image.

    Down-stage level 0 and up-stage level 3 run at latent resolution; each
    step towards the bottleneck halves the resolution.
    """
    if stage == "mid":
        return latent_stride * 8
    if stage == "down":
        return latent_stride * 2**level
    return latent_stride * 2 ** (3 - level)


def _vit_layers(stage, level, index):
    return [LayerId(stage, level, b, index) for b in ("vit_query", "vit_key", "vit_value", "vit")]


def default_catalog(channels: int | Mapping[int, int] = 32, embed_dim: int = 16,
                    latent_stride: int = 8, input_size=None) -> BackboneCatalog:
    """SD-style UNet taxonomy: four down levels, a mid block, four up levels."""
    if isinstance(channels, int):
        channels = {lvl: channels for lvl in range(4)}
    ids: list[LayerId] = []
    for lvl in range(4):
        if lvl < 3:
            for i in range(2):
                ids.append(LayerId("down", lvl, "res", i))
                ids.extend(_vit_layers("down", lvl, i))
            ids.append(LayerId("down", lvl, "sampler", 0))
        else:
            ids += [LayerId("down", 3, "res", 0), LayerId("down", 3, "res", 1)]
    ids += [LayerId("mid", None, "res", 0), *_vit_layers("mid", None, 0), LayerId("mid", None, "res", 1)]
    for lvl in range(4):
        for i in range(3):
            ids.append(LayerId("up", lvl, "res", i))
            if lvl > 0:
                ids.extend(_vit_layers("up", lvl, i))
        if lvl < 3:
            ids.append(LayerId("up", lvl, "sampler", 0))
    layers = {}
    for l in ids:
        ch = channels[3] if l.stage == "mid" else channels[l.level if l.stage == "down" else 3 - l.level]
        layers[l] = LayerSpec(ch, level_downscale(l.stage, l.level, latent_stride))
    return BackboneCatalog(layers, embed_dim, latent_stride, tuple(input_size) if input_size else None)


DEFAULT_DETECTION_LAYER = LayerId("up", 3, "vit_key", 0)
DEFAULT_ATTENTION_LAYER = LayerId("up", 3, "vit", 0)
DEFAULT_REID_LAYERS = (
    LayerId("up", 3, "vit_key", 1),
    LayerId("up", 3, "vit_key", 0),
    LayerId("up", 3, "vit_value", 0),
    LayerId("up", 3, "vit_query", 0),
    LayerId("up", 2, "vit_query", 2),
    LayerId("up", 2, "vit_value", 1),
    LayerId("up", 1, "vit_query", 2),
)


@dataclass
class FeatureSelection:
    detection_layer: LayerId = DEFAULT_DETECTION_LAYER
    detection_attention_layer: LayerId = DEFAULT_ATTENTION_LAYER
    reid_layers: tuple[LayerId, ...] = DEFAULT_REID_LAYERS

    @property
    def counts_per_level(self) -> dict[int, int]:
        counts: dict[int, int] = {}
        for l in self.reid_layers:
            counts[l.level] = counts.get(l.level, 0) + 1
        return counts

    def reid_by_level(self) -> dict[int, list[LayerId]]:
        out: dict[int, list[LayerId]] = {}
        for l in self.reid_layers:
            out.setdefault(l.level, []).append(l)
        return dict(sorted(out.items()))

    @property
    def all_layers(self) -> list[LayerId]:
        seen = dict.fromkeys([self.detection_layer, *self.reid_layers])
        return list(seen)

    def validate(self, catalog: BackboneCatalog, up_stage_only: bool = True):
        for l in [self.detection_layer, self.detection_attention_layer, *self.reid_layers]:
            catalog.spec(l)
        for l in self.reid_layers:
            if up_stage_only and l.stage != "up":
                raise ConfigError(f"re-ID layer {l} must come from the up-stage")

    def to_dict(self):
        return {
            "detection_layer": str(self.detection_layer),
            "detection_attention_layer": str(self.detection_attention_layer),
            "reid_layers": [str(l) for l in self.reid_layers],
        }

    @classmethod
    def from_dict(cls, data):
        return cls(
            LayerId.parse(data.get("detection_layer", str(DEFAULT_DETECTION_LAYER))),
            LayerId.parse(data.get("detection_attention_layer", str(DEFAULT_ATTENTION_LAYER))),
            tuple(LayerId.parse(s) for s in data.get("reid_layers", [str(l) for l in DEFAULT_REID_LAYERS])),
        )


@dataclass
class FeatureMap:
    data: torch.Tensor  # [C, H, W]
    layer: LayerId
    timestep: int = 0

    @property
    def shape(self):
        return tuple(self.data.shape)


@dataclass
class AttentionMap:
    scores: np.ndarray  # [H, W], >= 0
    token: str
    layer: LayerId


@dataclass
class TextEmbedding:
    vector: np.ndarray
    prompt: str


@dataclass
class BackboneOutput:
    features: dict[LayerId, FeatureMap]
    attention: AttentionMap | None = None


# ---------------------------------------------------------------------------
# forward noising


@dataclass(frozen=True)
class NoiseSchedule:
    betas: np.ndarray

    @classmethod
    def linear(cls, beta_start=1e-4, beta_end=2e-2, num_steps=1000):
        return cls(np.linspace(beta_start, beta_end, num_steps, dtype=np.float64))

    @property
    def num_steps(self) -> int:
        return len(self.betas)

    @property
    def alphas_cumprod(self) -> np.ndarray:
        """``abar[t]`` for t in [0, T]; ``abar[0] == 1``."""
        return np.concatenate([[1.0], np.cumprod(1.0 - self.betas)])


def add_noise(x0, t: int, schedule: NoiseSchedule | None = None, seed: int = 0):
    """Sample ``x_t = sqrt(abar_t) x0 + sqrt(1 - abar_t) eps`` with seeded eps.

    ``t == 0`` returns ``x0`` unchanged.
    """
    schedule = schedule or NoiseSchedule.linear()
    if not 0 <= t <= schedule.num_steps:
        raise ValueError(f"timestep {t} outside [0, {schedule.num_steps}]")
    x0 = np.asarray(x0)
    if t == 0:
        return x0.copy()
    abar = schedule.alphas_cumprod[t]
    eps = np.random.default_rng(seed).standard_normal(x0.shape)
    out = np.sqrt(abar) * x0.astype(np.float64) + np.sqrt(1.0 - abar) * eps
    return out.astype(x0.dtype if np.issubdtype(x0.dtype, np.floating) else np.float64)


# ---------------------------------------------------------------------------
# backbone interface


@dataclass(frozen=True)
class PersonAnnotation:
    box: tuple[float, float, float, float]
    appearance: int  # true identity, also for persons without a label


class Backbone(abc.ABC):
    catalog: BackboneCatalog

    @abc.abstractmethod
    def extract_features(self, image, selection: FeatureSelection, t: int = 0,
                         scene=None) -> BackboneOutput:
        ...

    @abc.abstractmethod
    def encode_text_prompts(self, prompts: Sequence[str]) -> list[TextEmbedding]:
        ...

    @abc.abstractmethod
    def parameter_digest(self) -> str:
        """Hex digest over every backbone weight (for freeze checks)."""


class DiffusionUNetAdapter(Backbone):
    """Slot for a pretrained text-to-image UNet; weights are not shipped."""

    def __init__(self, checkpoint=None, catalog: BackboneCatalog | None = None):
        self.checkpoint = checkpoint
        self.catalog = catalog or default_catalog(channels={0: 320, 1: 640, 2: 1280, 3: 1280}, embed_dim=1024)

    def _unavailable(self):
        raise BackboneUnavailableError(
            "pretrained diffusion UNet backbones are not available at desk scale; "
            "use SyntheticBackbone"
        )

    def extract_features(self, image, selection, t=0, scene=None):
        self._unavailable()

    def encode_text_prompts(self, prompts):
        self._unavailable()

    def parameter_digest(self):
        self._unavailable()


def _stable_seed(*parts) -> int:
    h = hashlib.sha256("\x1f".join(str(p) for p in parts).encode()).digest()
    return int.from_bytes(h[:8], "little")


def hash_unit_vector(text: str, dim: int, salt: str = "prompt") -> np.ndarray:
    v = np.random.default_rng(_stable_seed(salt, text, dim)).standard_normal(dim)
    return v / np.linalg.norm(v)


def _avg_pool(x: np.ndarray, k: int) -> np.ndarray:
    if k == 1:
        return x
    c, h, w = x.shape
    return x.reshape(c, h // k, k, w // k, k).mean(axis=(2, 4))


# nuisance multipliers; the last up-stage layers behave like noise predictors
_BLOCK_NUISANCE = {"res": 1.0, "vit": 1.15, "vit_query": 0.9, "vit_key": 0.9,
                   "vit_value": 0.95, "sampler": 1.3}
_STAGE_NUISANCE = {"up": 1.0, "down": 1.35, "mid": 1.6}


class SyntheticBackbone(Backbone):
    """Deterministic backbone with known ground truth.

    Args:
        annotations: scene id -> persons; used when ``extract_features`` gets a
            scene id. Explicit person lists can always be passed instead.
        catalog: layer catalog; defaults to :func:`default_catalog`.
        seed: seeds every frozen weight, signature and noise draw.
        latent_scale: the latent is multiplied by this before noising and
            divided after, so forward noise is sized against unit-scale data
            rather than the raw latent (identity signatures put about
            ``1/sqrt(signature_dim)`` in each channel).
        num_appearances: number of distinct identities that need signatures.
        part_styles: vocabulary size of each body part's signature.
    """

    def __init__(self, annotations: Mapping[str, Sequence[PersonAnnotation]] | None = None,
                 catalog: BackboneCatalog | None = None, seed: int = 0,
                 num_appearances: int | None = None,
                 part_styles: Sequence[int] = (4, 6, 6, 4),
                 signature_dim: int = 16, signature_amp: float = 1.0,
                 semantic_amp: float = 1.0, nuisance: float = 0.6,
                 attention_sigma: float = 0.25,
                 latent_scale: float = 1.0,
                 schedule: NoiseSchedule | None = None,
                 prompts: Sequence[str] = DEFAULT_PROMPTS):
        self.catalog = catalog or default_catalog()
        self.seed = int(seed)
        self.annotations = {k: list(v) for k, v in (annotations or {}).items()}
        self.schedule = schedule or NoiseSchedule.linear()
        self.signature_dim = signature_dim
        self.signature_amp = signature_amp
        self.semantic_amp = semantic_amp
        self.nuisance = nuisance
        self.attention_sigma = attention_sigma
        if latent_scale <= 0:
            raise ConfigError("latent_scale must be > 0")
        self.latent_scale = float(latent_scale)
        self.part_prompts = tuple(prompts)
        if len(self.part_prompts) != len(PART_BANDS):
            raise ConfigError(f"synthetic scenes have {len(PART_BANDS)} body parts")
        if num_appearances is None:
            ids = [p.appearance for persons in self.annotations.values() for p in persons]
            num_appearances = max(ids) + 1 if ids else 1
        self.num_appearances = num_appearances
        self.part_styles = tuple(part_styles)
        self.styles = self._assign_styles(num_appearances)
        rng = np.random.default_rng(_stable_seed("signatures", self.seed))
        self.style_vectors = []
        for n in self.part_styles:
            v = rng.standard_normal((n, signature_dim))
            self.style_vectors.append(v / np.linalg.norm(v, axis=1, keepdims=True))
        self.part_embeddings = np.stack(
            [e.vector for e in self.encode_text_prompts(self.part_prompts)])
        self.latent_channels = 3 + signature_dim + self.catalog.embed_dim
        self._weights: dict[LayerId, np.ndarray] = {}
        for layer, spec in self.catalog.layers.items():
            r = np.random.default_rng(_stable_seed("layer", self.seed, layer))
            w = r.standard_normal((spec.channels, self.latent_channels)) / np.sqrt(self.latent_channels)
            self._weights[layer] = (1.5 * w).astype(np.float32)

    def _assign_styles(self, n):
        combos = int(np.prod(self.part_styles))
        rng = np.random.default_rng(_stable_seed("styles", self.seed))
        if n > combos:
            raise GenerationError(
                f"{n} identities but only {combos} distinct part signatures; signatures would collide")
        flat = rng.choice(combos, size=n, replace=False)
        styles = np.stack(np.unravel_index(flat, self.part_styles), axis=1)
        if len({tuple(s) for s in styles}) != n:
            raise GenerationError("identity signature collision")
        return styles

    def identity_signature(self, appearance: int) -> np.ndarray:
        """Per-part signature vectors, ``[num_parts, signature_dim]``."""
        if not 0 <= appearance < self.num_appearances:
            raise GenerationError(f"no signature for identity {appearance}")
        return np.stack([self.style_vectors[p][s] for p, s in enumerate(self.styles[appearance])])

    def encode_text_prompts(self, prompts):
        if len(prompts) == 0:
            raise ValueError("need at least one prompt")
        return [TextEmbedding(hash_unit_vector(p, self.catalog.embed_dim), p) for p in prompts]

    def parameter_digest(self) -> str:
        h = hashlib.sha256()
        for layer in sorted(self._weights):
            h.update(str(layer).encode())
            h.update(self._weights[layer].tobytes())
        for v in self.style_vectors:
            h.update(v.tobytes())
        h.update(self.part_embeddings.tobytes())
        return h.hexdigest()

    # -- internals -----------------------------------------------------------

    def _resolve_scene(self, scene) -> list[PersonAnnotation]:
        if scene is None:
            return []
        if isinstance(scene, str):
            if scene not in self.annotations:
                raise KeyError(f"scene {scene!r} has no registered annotations")
            return self.annotations[scene]
        return [p if isinstance(p, PersonAnnotation) else PersonAnnotation(tuple(p[0]), int(p[1]))
                for p in scene]

    def clean_latent(self, image: np.ndarray, persons: Sequence[PersonAnnotation]) -> np.ndarray:
        """Latent before noising, ``[3 + sig + d, H/s, W/s]``."""
        _, h, w = image.shape
        sig = np.zeros((self.signature_dim, h, w), dtype=np.float64)
        sem = np.zeros((self.catalog.embed_dim, h, w), dtype=np.float64)
        for p in persons:
            x1, y1, x2, y2 = p.box
            signature = self.identity_signature(p.appearance)
            bh = y2 - y1
            c0, c1 = int(round(max(0, x1))), int(round(min(w, x2)))
            for k, (a, b) in enumerate(PART_BANDS):
                r0 = int(round(max(0, y1 + a * bh)))
                r1 = int(round(min(h, y1 + b * bh)))
                if r1 <= r0 or c1 <= c0:
                    continue
                sig[:, r0:r1, c0:c1] = self.signature_amp * signature[k][:, None, None]
                sem[:, r0:r1, c0:c1] = self.semantic_amp * self.part_embeddings[k][:, None, None]
        full = np.concatenate([image.astype(np.float64), sig, sem], axis=0)
        return _avg_pool(full, self.catalog.latent_stride)

    def _nuisance(self, layer, image_key, shape):
        """Per-layer nuisance drawn at latent resolution and pooled to the layer,
        so coarse layers are blurrier but less noisy than fine ones."""
        r = np.random.default_rng(_stable_seed("nuisance", self.seed, layer, image_key))
        c, h, w = shape
        k = self.catalog.spec(layer).downscale // self.catalog.latent_stride
        lh, lw = h * k, w * k
        white = r.standard_normal((c, lh, lw))
        # add a smooth component at half latent resolution
        coarse = r.standard_normal((c, (lh + 1) // 2, (lw + 1) // 2))
        smooth = np.repeat(np.repeat(coarse, 2, axis=1), 2, axis=2)[:, :lh, :lw]
        scale = _STAGE_NUISANCE[layer.stage] * _BLOCK_NUISANCE[layer.block]
        if layer.stage == "up" and layer.level == 3 and layer.index == 2:
            scale *= 1.3
        return self.nuisance * scale * _avg_pool(0.7 * white + 0.7 * smooth, k)

    def attention_map(self, persons, layer: LayerId, image_hw, t: int = 0) -> AttentionMap:
        spec = self.catalog.spec(layer)
        h, w = image_hw[0] // spec.downscale, image_hw[1] // spec.downscale
        scores = np.zeros((h, w), dtype=np.float64)
        amp = np.sqrt(self.schedule.alphas_cumprod[t])
        yy, xx = np.mgrid[0:h, 0:w]
        for p in persons:
            x1, y1, x2, y2 = p.box
            cx = min(w - 1, max(0, int((x1 + x2) / 2 // spec.downscale)))
            cy = min(h - 1, max(0, int((y1 + y2) / 2 // spec.downscale)))
            sx = max(self.attention_sigma * (x2 - x1) / spec.downscale, 0.5)
            sy = max(self.attention_sigma * (y2 - y1) / spec.downscale, 0.5)
            blob = amp * np.exp(-0.5 * ((xx - cx) ** 2 / sx**2 + (yy - cy) ** 2 / sy**2))
            np.maximum(scores, blob, out=scores)
        return AttentionMap(scores, "person", layer)

    def extract_features(self, image, selection: FeatureSelection | None = None, t: int = 0,
                         scene=None, layers: Sequence[LayerId] | None = None) -> BackboneOutput:
        """Feature maps for ``selection`` (or an explicit ``layers`` list).

        ``scene`` is a registered scene id or an explicit list of persons.
        """
        image = np.asarray(image, dtype=np.float32)
        if image.ndim != 3:
            raise ContractError(f"image must be [C, H, W], got shape {image.shape}")
        if layers is None:
            selection = selection or FeatureSelection()
            layers = selection.all_layers
        layers = list(dict.fromkeys(layers))
        for l in layers:
            self.catalog.spec(l)
        self.catalog.check_image(image.shape[1:], layers)
        if not 0 <= t <= self.schedule.num_steps:
            raise ValueError(f"timestep {t} outside [0, {self.schedule.num_steps}]")
        persons = self._resolve_scene(scene)
        image_key = hashlib.sha256(image.tobytes()).hexdigest()[:16]
        z0 = self.clean_latent(image, persons)
        zt = z0
        if t > 0:
            seed = _stable_seed("noise", self.seed, image_key, t)
            zt = add_noise(z0 * self.latent_scale, t, self.schedule, seed=seed) / self.latent_scale
        feats = {}
        for l in layers:
            spec = self.catalog.spec(l)
            z = _avg_pool(zt, spec.downscale // self.catalog.latent_stride)
            lin = np.einsum("ck,khw->chw", self._weights[l].astype(np.float64), z)
            out = np.tanh(lin + self._nuisance(l, image_key, lin.shape)).astype(np.float32)
            feats[l] = FeatureMap(torch.from_numpy(out), l, t)
        attention = None
        if selection is not None:
            attention = self.attention_map(persons, selection.detection_attention_layer,
                                           image.shape[1:], t)
        return BackboneOutput(feats, attention)


def synthetic_backbone(annotations, catalog=None, seed=0, **kwargs) -> SyntheticBackbone:
    return SyntheticBackbone(annotations, catalog, seed, **kwargs)


# ---------------------------------------------------------------------------
# feature dumps: b"PSFD" | uint32 header length | JSON header | raw C-order data

_DUMP_MAGIC = b"PSFD"


def write_feature_dump(path, fm: FeatureMap):
    arr = np.ascontiguousarray(fm.data.detach().cpu().numpy())
    arr = arr.astype(arr.dtype.newbyteorder("<"), copy=False)
    header = json.dumps({
        "dtype": arr.dtype.str,
        "shape": list(arr.shape),
        "layer": str(fm.layer),
        "timestep": int(fm.timestep),
    }).encode()
    with open(path, "wb") as f:
        f.write(_DUMP_MAGIC)
        f.write(struct.pack("<I", len(header)))
        f.write(header)
        f.write(arr.tobytes())


def read_feature_dump(path) -> FeatureMap:
    with open(path, "rb") as f:
        if f.read(4) != _DUMP_MAGIC:
            raise ContractError(f"{path} is not a feature dump")
        (n,) = struct.unpack("<I", f.read(4))
        header = json.loads(f.read(n))
        arr = np.frombuffer(f.read(), dtype=np.dtype(header["dtype"]))
    arr = arr.reshape(header["shape"]).astype(arr.dtype.newbyteorder("="))
    return FeatureMap(torch.from_numpy(arr.copy()), LayerId.parse(header["layer"]), header["timestep"])


__all__ = [
    "AttentionMap", "Backbone", "BackboneCatalog", "BackboneOutput", "DiffusionUNetAdapter",
    "FeatureMap", "FeatureSelection", "LayerId", "LayerSpec", "NoiseSchedule", "PersonAnnotation",
    "SyntheticBackbone", "TextEmbedding", "add_noise", "default_catalog", "level_downscale",
    "read_feature_dump", "synthetic_backbone", "write_feature_dump", "DEFAULT_PROMPTS",
]
