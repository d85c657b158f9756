"""Synthetic person-search scenes, their on-disk format and the search protocol."""
from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import yaml

from psearch.backbone import PersonAnnotation
from psearch.errors import ConfigError, GenerationError

UNLABELED = -1
MANIFEST = "manifest.yaml"


@dataclass
class Person:
    box: tuple[float, float, float, float]
    identity: int  # -1 for unlabeled
    appearance: int  # identity index for labeled persons, a pool index otherwise


@dataclass
class SceneRecord:
    scene_id: str
    image: np.ndarray  # float32 [3, H, W] in [0, 1]
    persons: list[Person]
    split: str  # "train" | "test"

    def __post_init__(self):
        _, h, w = self.image.shape
        for p in self.persons:
            x1, y1, x2, y2 = p.box
            if not (0 <= x1 < x2 <= w and 0 <= y1 < y2 <= h):
                raise GenerationError(f"{self.scene_id}: box {p.box} outside {w}x{h} image")

    @property
    def boxes(self) -> np.ndarray:
        return np.array([p.box for p in self.persons], dtype=np.float64).reshape(-1, 4)

    @property
    def identities(self) -> np.ndarray:
        return np.array([p.identity for p in self.persons], dtype=np.int64)

    def annotations(self) -> list[PersonAnnotation]:
        return [PersonAnnotation(tuple(p.box), p.appearance) for p in self.persons]


@dataclass
class ToyDataset:
    scenes: list[SceneRecord]
    num_identities: int
    num_appearances: int
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self._index = {s.scene_id: s for s in self.scenes}

    def __getitem__(self, scene_id) -> SceneRecord:
        return self._index[scene_id]

    def __len__(self):
        return len(self.scenes)

    def split(self, name) -> list[SceneRecord]:
        return [s for s in self.scenes if s.split == name]

    @property
    def image_size(self) -> tuple[int, int]:
        return tuple(self.scenes[0].image.shape[1:]) if self.scenes else (0, 0)

    def annotations(self) -> dict[str, list[PersonAnnotation]]:
        return {s.scene_id: s.annotations() for s in self.scenes}

    def save(self, directory):
        d = Path(directory)
        (d / "images").mkdir(parents=True, exist_ok=True)
        entries = []
        for s in self.scenes:
            rel = f"images/{s.scene_id}.npy"
            np.save(d / rel, s.image)
            entries.append({
                "scene_id": s.scene_id,
                "split": s.split,
                "image": rel,
                "persons": [{"box": [float(v) for v in p.box], "identity": int(p.identity),
                             "appearance": int(p.appearance)} for p in s.persons],
            })
        manifest = {
            "num_identities": self.num_identities,
            "num_appearances": self.num_appearances,
            "meta": self.meta,
            "scenes": entries,
        }
        (d / MANIFEST).write_text(yaml.safe_dump(manifest, sort_keys=False))
        return d

    @classmethod
    def load(cls, directory) -> "ToyDataset":
        d = Path(directory)
        if not (d / MANIFEST).is_file():
            raise ConfigError(f"no dataset manifest in {directory}")
        m = yaml.safe_load((d / MANIFEST).read_text())
        scenes = []
        for e in m["scenes"]:
            persons = [Person(tuple(p["box"]), p["identity"], p["appearance"]) for p in e["persons"]]
            scenes.append(SceneRecord(e["scene_id"], np.load(d / e["image"]), persons, e["split"]))
        return cls(scenes, m["num_identities"], m["num_appearances"], m.get("meta", {}))


# ---------------------------------------------------------------------------
# generation

PERSON_HEIGHT = (30, 64)
PERSON_ASPECT = (0.36, 0.46)  # width / height
PART_BANDS = ((0.0, 0.18), (0.18, 0.55), (0.55, 0.9), (0.9, 1.0))


def _appearance_colors(rng, n):
    return rng.uniform(0.05, 0.95, size=(n, len(PART_BANDS), 3))


def _place(rng, size, placed, image_hw, attempts=200, margin=2):
    h_img, w_img = image_hw
    ph = int(rng.integers(*size[0]))
    pw = max(4, int(round(ph * rng.uniform(*size[1]))))
    if ph >= h_img or pw >= w_img:
        raise GenerationError(f"a {pw}x{ph} person does not fit a {w_img}x{h_img} image")
    for _ in range(attempts):
        x1 = int(rng.integers(0, w_img - pw + 1))
        y1 = int(rng.integers(0, h_img - ph + 1))
        box = (x1, y1, x1 + pw, y1 + ph)
        if all(box[0] >= b[2] + margin or b[0] >= box[2] + margin or
               box[1] >= b[3] + margin or b[1] >= box[3] + margin for b in placed):
            return box
    return None


def _render(rng, image_hw, persons, colors, clutter=(2, 5)):
    h, w = image_hw
    base = rng.uniform(0.2, 0.8, size=3)
    coarse = rng.normal(0.0, 0.08, size=(3, h // 16 + 1, w // 16 + 1))
    smooth = np.kron(coarse, np.ones((16, 16)))[:, :h, :w]
    img = base[:, None, None] + smooth
    for _ in range(int(rng.integers(*clutter))):
        ch, cw = int(rng.integers(6, 30)), int(rng.integers(6, 30))
        y, x = int(rng.integers(0, h - ch)), int(rng.integers(0, w - cw))
        img[:, y:y + ch, x:x + cw] = rng.uniform(0, 1, size=3)[:, None, None]
    for p in persons:
        x1, y1, x2, y2 = (int(v) for v in p.box)
        bh = y2 - y1
        for k, (a, b) in enumerate(PART_BANDS):
            r0, r1 = y1 + int(round(a * bh)), y1 + int(round(b * bh))
            img[:, r0:r1, x1:x2] = colors[p.appearance, k][:, None, None]
    img += rng.normal(0.0, 0.03, size=img.shape)
    return np.clip(img, 0.0, 1.0).astype(np.float32)


def generate_toy_dataset(num_scenes: int, num_identities: int, persons_per_scene=(1, 3), seed: int = 0,
                         image_size=(128, 128), unlabeled_fraction: float = 0.1,
                         test_fraction: float = 0.25, person_height=PERSON_HEIGHT,
                         person_aspect=PERSON_ASPECT) -> ToyDataset:
    """Deterministic scenes of rectangular "persons" with four colored body parts.

    Persons per scene are uniform on ``persons_per_scene`` (inclusive).  The
    first ``num_identities`` labeled persons of the training split take every
    identity once so each identity is seen during training.
    """
    if num_identities < 2:
        raise ConfigError("need at least 2 identities")
    lo, hi = persons_per_scene
    if not 1 <= lo <= hi:
        raise ConfigError(f"bad persons-per-scene range {persons_per_scene}")
    rng = np.random.default_rng(seed)
    pool = max(2, num_identities // 2)
    colors = _appearance_colors(np.random.default_rng([seed, 1]), num_identities + pool)
    n_test = int(round(test_fraction * num_scenes)) if num_scenes > 1 else 0
    n_train = num_scenes - n_test
    cover = list(np.random.default_rng([seed, 2]).permutation(num_identities))
    scenes = []
    for i in range(num_scenes):
        split = "train" if i < n_train else "test"
        count = int(rng.integers(lo, hi + 1))
        placed, persons, used = [], [], set()
        for _ in range(count):
            box = _place(rng, (person_height, person_aspect), placed, image_size)
            if box is None:
                raise GenerationError(f"cannot place {count} persons in a {image_size} image")
            placed.append(box)
            if rng.random() < unlabeled_fraction:
                persons.append(Person(tuple(float(v) for v in box), UNLABELED,
                                      num_identities + int(rng.integers(pool))))
                continue
            if split == "train" and cover:
                ident = int(cover.pop(0))
                if ident in used:
                    cover.append(ident)
                    ident = int(rng.choice([k for k in range(num_identities) if k not in used]))
            else:
                ident = int(rng.choice([k for k in range(num_identities) if k not in used]))
            used.add(ident)
            persons.append(Person(tuple(float(v) for v in box), ident, ident))
        image = _render(rng, image_size, persons, colors)
        scenes.append(SceneRecord(f"s{i:04d}", image, persons, split))
    meta = {"seed": int(seed), "persons_per_scene": [int(lo), int(hi)],
            "image_size": [int(v) for v in image_size], "unlabeled_fraction": float(unlabeled_fraction)}
    return ToyDataset(scenes, num_identities, num_identities + pool, meta)


# ---------------------------------------------------------------------------
# search protocol


@dataclass
class QuerySpec:
    scene_id: str
    person: int
    identity: int


@dataclass
class Protocol:
    queries: list[QuerySpec]
    galleries: list[list[str]]


def build_protocol(dataset: ToyDataset, gallery_size: int = 10, seed: int = 0) -> Protocol:
    """Every labeled test person whose identity recurs in another test scene is a query.

    Its gallery holds all other test scenes with that identity plus randomly
    drawn distractor scenes, up to ``gallery_size`` scenes, in scene order.
    """
    rng = np.random.default_rng([seed, 3])
    test = dataset.split("test")
    ids_in = {s.scene_id: set(s.identities.tolist()) for s in test}
    queries, galleries = [], []
    for s in test:
        for k, p in enumerate(s.persons):
            if p.identity == UNLABELED:
                continue
            positives = [t.scene_id for t in test if t.scene_id != s.scene_id and p.identity in ids_in[t.scene_id]]
            if not positives:
                continue
            negatives = [t.scene_id for t in test if t.scene_id != s.scene_id and p.identity not in ids_in[t.scene_id]]
            n_neg = max(0, min(len(negatives), gallery_size - len(positives)))
            picked = rng.choice(len(negatives), size=n_neg, replace=False) if n_neg else []
            chosen = set(positives) | {negatives[j] for j in picked}
            queries.append(QuerySpec(s.scene_id, k, p.identity))
            galleries.append([t.scene_id for t in test if t.scene_id in chosen])
    return Protocol(queries, galleries)


def flip_image(image: np.ndarray) -> np.ndarray:
    return np.ascontiguousarray(image[:, :, ::-1])
