"""Synthetic multi-object scenes: types, generation, and on-disk format.

A scene is a flat list of objects, each carrying symbolic attributes
(shape, color, size, material), a position on the unit ground plane, and
a derived pixel bounding box.  Scenes are grouped into named datasets
with train/val/test splits; every scene additionally stores ten
ground-truth questions used for supervised learning.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Iterator, Mapping, Sequence

import numpy as np

logger = logging.getLogger(__name__)

# Canonical order of attribute dimensions, also the surface word order
# inside a question ("large red rubber cube").
ATTRIBUTE_DIMS = ("size", "color", "material", "shape")

N_MIN = 3
N_MAX = 10
IMAGE_SIZE = (480, 320)

# Rejection-sampling limits.
MAX_POSITION_ATTEMPTS = 100
MAX_SCENE_ATTEMPTS = 50
MIN_SEPARATION = 0.10


class GenerationError(RuntimeError):
    """Scene or dataset generation failed after exhausting retries."""


class SceneFormatError(ValueError):
    """A scene file is malformed or references unknown attribute values."""


@dataclass(frozen=True)
class AttributeSpace:
    """Value lists per attribute dimension plus the set of active dimensions.

    Inactive dimensions have exactly one value, which every object takes;
    they never appear in question descriptors.
    """

    shapes: tuple[str, ...]
    colors: tuple[str, ...]
    sizes: tuple[str, ...]
    materials: tuple[str, ...]
    active: tuple[str, ...]

    def __post_init__(self) -> None:
        for dim in self.active:
            if dim not in ATTRIBUTE_DIMS:
                raise ValueError(f"unknown attribute dimension {dim!r}")
        for dim in ATTRIBUTE_DIMS:
            vals = self.values(dim)
            if not vals:
                raise ValueError(f"dimension {dim!r} has no values")
            if len(set(vals)) != len(vals):
                raise ValueError(f"dimension {dim!r} has duplicate values")
            if dim not in self.active and len(vals) != 1:
                raise ValueError(
                    f"inactive dimension {dim!r} must have exactly one value, got {vals}"
                )

    def values(self, dim: str) -> tuple[str, ...]:
        try:
            return {
                "shape": self.shapes,
                "color": self.colors,
                "size": self.sizes,
                "material": self.materials,
            }[dim]
        except KeyError:
            raise ValueError(f"unknown attribute dimension {dim!r}") from None

    def is_active(self, dim: str) -> bool:
        return dim in self.active

    @property
    def onehot_width(self) -> int:
        return sum(len(self.values(dim)) for dim in ATTRIBUTE_DIMS)


def ask3_space() -> AttributeSpace:
    """Three active dimensions; material is fixed to rubber."""
    return AttributeSpace(
        shapes=("cube", "sphere", "cylinder"),
        colors=("red", "blue", "green", "yellow"),
        sizes=("small", "large"),
        materials=("rubber",),
        active=("size", "color", "shape"),
    )


def ask4_space() -> AttributeSpace:
    """All four dimensions active; material gains a second value."""
    return AttributeSpace(
        shapes=("cube", "sphere", "cylinder"),
        colors=("red", "blue", "green", "yellow"),
        sizes=("small", "large"),
        materials=("rubber", "metal"),
        active=("size", "color", "material", "shape"),
    )


def space_for(name: str) -> AttributeSpace:
    if name == "ask3":
        return ask3_space()
    if name == "ask4":
        return ask4_space()
    raise ValueError(f"unknown dataset name {name!r}, expected 'ask3' or 'ask4'")


@dataclass(frozen=True)
class SceneObject:
    """One object: symbolic attributes, ground-plane position, pixel bbox.

    ``position`` is (x, y) in the unit square; x grows to the viewer's
    right and y grows toward the viewer.  ``bbox`` is (x_c, y_c, w, h) in
    pixels with the image origin at the top-left corner.
    """

    id: int
    shape: str
    color: str
    size: str
    material: str
    position: tuple[float, float]
    bbox: tuple[float, float, float, float]

    def __post_init__(self) -> None:
        if self.id < 0:
            raise ValueError(f"object id must be non-negative, got {self.id}")
        if len(self.position) != 2:
            raise ValueError("position must be (x, y)")
        if len(self.bbox) != 4:
            raise ValueError("bbox must be (x_c, y_c, w, h)")
        if self.bbox[2] <= 0 or self.bbox[3] <= 0:
            raise ValueError(f"bbox must have positive extent, got {self.bbox}")

    def attribute(self, dim: str) -> str:
        return {
            "shape": self.shape,
            "color": self.color,
            "size": self.size,
            "material": self.material,
        }[dim]

    @property
    def attribute_tuple(self) -> tuple[str, str, str, str]:
        return tuple(self.attribute(d) for d in ATTRIBUTE_DIMS)


@dataclass(frozen=True)
class Scene:
    scene_id: str
    split: str
    image_size: tuple[int, int]
    objects: tuple[SceneObject, ...]

    def __post_init__(self) -> None:
        n = len(self.objects)
        if not N_MIN <= n <= N_MAX:
            raise ValueError(f"scene {self.scene_id!r} has {n} objects, expected {N_MIN}..{N_MAX}")
        ids = [o.id for o in self.objects]
        if ids != list(range(n)):
            raise ValueError(f"scene {self.scene_id!r} object ids must be 0..{n - 1}, got {ids}")
        positions = {o.position for o in self.objects}
        if len(positions) != n:
            raise ValueError(f"scene {self.scene_id!r} has objects sharing a position")

    def __len__(self) -> int:
        return len(self.objects)

    def validate_against(self, space: AttributeSpace) -> None:
        """Check every attribute value exists in the given space."""
        for obj in self.objects:
            for dim in ATTRIBUTE_DIMS:
                val = obj.attribute(dim)
                if val not in space.values(dim):
                    raise SceneFormatError(
                        f"scene {self.scene_id!r} object {obj.id}: "
                        f"unknown {dim} value {val!r}"
                    )


@dataclass(frozen=True)
class GameInstance:
    """A scene plus the id of the goal object the questioner must find."""

    scene: Scene
    goal_id: int

    def __post_init__(self) -> None:
        if not 0 <= self.goal_id < len(self.scene):
            raise ValueError(
                f"goal id {self.goal_id} out of range for scene {self.scene.scene_id!r}"
            )

    @property
    def goal(self) -> SceneObject:
        return self.scene.objects[self.goal_id]


@dataclass(frozen=True)
class DatasetConfig:
    name: str
    n_train: int
    n_val: int
    n_test: int
    min_objects: int = N_MIN
    max_objects: int = N_MAX
    duplicate_pressure: float = 0.5
    gt_questions_per_scene: int = 10
    seed: int = 0

    def __post_init__(self) -> None:
        space_for(self.name)  # raises on unknown name
        if not N_MIN <= self.min_objects <= self.max_objects <= N_MAX:
            raise ValueError(
                f"object count range {self.min_objects}..{self.max_objects} "
                f"must lie within {N_MIN}..{N_MAX}"
            )
        if not 0.0 <= self.duplicate_pressure <= 1.0:
            raise ValueError(f"duplicate_pressure must be in [0, 1], got {self.duplicate_pressure}")
        if min(self.n_train, self.n_val, self.n_test) < 0:
            raise ValueError("split sizes must be non-negative")

    @property
    def space(self) -> AttributeSpace:
        return space_for(self.name)

    def to_json(self) -> dict:
        return {
            "name": self.name,
            "n_train": self.n_train,
            "n_val": self.n_val,
            "n_test": self.n_test,
            "min_objects": self.min_objects,
            "max_objects": self.max_objects,
            "duplicate_pressure": self.duplicate_pressure,
            "gt_questions_per_scene": self.gt_questions_per_scene,
            "seed": self.seed,
        }

    @classmethod
    def from_json(cls, data: Mapping) -> "DatasetConfig":
        return cls(**dict(data))


def mini_config(name: str, seed: int = 7) -> DatasetConfig:
    """Desk-scale dataset preset: 200/50/50 scenes of 3 to 5 objects.

    Light duplicate pressure keeps some scenes that demand relational
    questions while leaving most goals reachable by attribute questions,
    which is what makes a CPU-sized model trainable in minutes.
    """
    return DatasetConfig(
        name=name,
        n_train=200,
        n_val=50,
        n_test=50,
        max_objects=5,
        duplicate_pressure=0.2,
        seed=seed,
    )


def _bbox_edges(space: AttributeSpace) -> dict[str, float]:
    """Pixel edge length per size name, smallest size first."""
    sizes = space.sizes
    if len(sizes) == 1:
        return {sizes[0]: 46.0}
    edges = np.linspace(30.0, 62.0, len(sizes))
    return {name: float(e) for name, e in zip(sizes, edges)}


def _bbox_for(position: tuple[float, float], size: str, space: AttributeSpace) -> tuple[float, float, float, float]:
    # Keep the whole box inside the frame for any size.
    w, h = IMAGE_SIZE
    pad = 35.0
    edge = _bbox_edges(space)[size]
    x_c = pad + position[0] * (w - 2 * pad)
    # Larger y means closer to the viewer, which sits lower in the image.
    y_c = pad + position[1] * (h - 2 * pad)
    return (x_c, y_c, edge, edge)


def generate_scene(
    config: DatasetConfig,
    rng: np.random.Generator,
    scene_id: str = "scene_000000",
    split: str = "train",
) -> Scene:
    """Sample one scene.

    ``duplicate_pressure`` is the probability that each object after the
    first copies the full attribute tuple of an earlier object instead of
    sampling attributes independently; this keeps scenes ambiguous enough
    that single-attribute questions rarely isolate the goal.
    """
    space = config.space
    n = int(rng.integers(config.min_objects, config.max_objects + 1))

    tuples: list[tuple[str, str, str, str]] = []
    for i in range(n):
        if i > 0 and rng.random() < config.duplicate_pressure:
            tuples.append(tuples[int(rng.integers(len(tuples)))])
        else:
            tuples.append(
                tuple(
                    str(rng.choice(space.values(dim))) for dim in ATTRIBUTE_DIMS
                )
            )

    positions: list[tuple[float, float]] = []
    for i in range(n):
        for _ in range(MAX_POSITION_ATTEMPTS):
            cand = (float(rng.random()), float(rng.random()))
            if all(
                (cand[0] - p[0]) ** 2 + (cand[1] - p[1]) ** 2 >= MIN_SEPARATION**2
                for p in positions
            ):
                positions.append(cand)
                break
        else:
            raise GenerationError(
                f"could not place object {i} of {n} after {MAX_POSITION_ATTEMPTS} "
                f"attempts (dataset {config.name!r}, scene {scene_id!r})"
            )

    objects = []
    for i, (attrs, pos) in enumerate(zip(tuples, positions)):
        size, color, material, shape = attrs
        objects.append(
            SceneObject(
                id=i,
                shape=shape,
                color=color,
                size=size,
                material=material,
                position=pos,
                bbox=_bbox_for(pos, size, space),
            )
        )
    return Scene(scene_id=scene_id, split=split, image_size=IMAGE_SIZE, objects=tuple(objects))


@dataclass
class Dataset:
    """Generated scenes by split plus ground-truth questions per scene."""

    config: DatasetConfig
    scenes: dict[str, tuple[Scene, ...]]
    gt_questions: dict[str, tuple[str, ...]]

    @property
    def space(self) -> AttributeSpace:
        return self.config.space

    def split(self, name: str) -> tuple[Scene, ...]:
        if name not in self.scenes:
            raise ValueError(f"unknown split {name!r}, expected one of {sorted(self.scenes)}")
        return self.scenes[name]

    def all_scenes(self) -> Iterator[Scene]:
        for name in ("train", "val", "test"):
            yield from self.scenes.get(name, ())

    def questions_for(self, scene: Scene) -> tuple[str, ...]:
        return self.gt_questions[scene.scene_id]


_SPLIT_CODES = {"train": 0, "val": 1, "test": 2}


def _scene_rng(seed: int, split: str, index: int, attempt: int) -> np.random.Generator:
    return np.random.default_rng(
        np.random.SeedSequence([seed, _SPLIT_CODES[split], index, attempt])
    )


def generate_dataset(config: DatasetConfig) -> Dataset:
    """Generate all splits deterministically from ``config.seed``.

    Each scene draws from its own seed stream keyed by (seed, split,
    index, attempt), so regeneration is reproducible and independent of
    iteration order.  Scenes admitting no informative ground-truth
    question are dropped and resampled with the attempt counter bumped.
    """
    from . import oracle  # deferred: oracle builds on scenes and grammar

    counts = {"train": config.n_train, "val": config.n_val, "test": config.n_test}
    scenes: dict[str, tuple[Scene, ...]] = {}
    gt: dict[str, tuple[str, ...]] = {}

    for split, count in counts.items():
        rows: list[Scene] = []
        for index in range(count):
            for attempt in range(MAX_SCENE_ATTEMPTS):
                rng = _scene_rng(config.seed, split, index, attempt)
                scene_id = f"{config.name}_{split}_{index:06d}"
                scene = generate_scene(config, rng, scene_id=scene_id, split=split)
                try:
                    questions = oracle.sample_gt_questions(
                        scene, config.space, rng, config.gt_questions_per_scene
                    )
                except oracle.NoInformativeQuestion:
                    logger.info(
                        "resampling scene %s (attempt %d): no informative question",
                        scene_id,
                        attempt,
                    )
                    continue
                rows.append(scene)
                gt[scene_id] = questions
                break
            else:
                raise GenerationError(
                    f"no valid scene for {config.name!r} {split} index {index} "
                    f"after {MAX_SCENE_ATTEMPTS} attempts"
                )
        scenes[split] = tuple(rows)
    return Dataset(config=config, scenes=scenes, gt_questions=gt)


def _object_to_json(obj: SceneObject) -> dict:
    return {
        "id": obj.id,
        "shape": obj.shape,
        "color": obj.color,
        "size": obj.size,
        "material": obj.material,
        "position": list(obj.position),
        "bbox": list(obj.bbox),
    }


_REQUIRED_SCENE_KEYS = ("scene_id", "split", "image_size", "objects", "gt_questions")
_REQUIRED_OBJECT_KEYS = ("id", "shape", "color", "size", "material", "position", "bbox")


def _object_from_json(data: Mapping, scene_id: str, line_no: int) -> SceneObject:
    for key in _REQUIRED_OBJECT_KEYS:
        if key not in data:
            raise SceneFormatError(
                f"line {line_no}: object in scene {scene_id!r} missing key {key!r}"
            )
    return SceneObject(
        id=int(data["id"]),
        shape=str(data["shape"]),
        color=str(data["color"]),
        size=str(data["size"]),
        material=str(data["material"]),
        position=tuple(float(v) for v in data["position"]),
        bbox=tuple(float(v) for v in data["bbox"]),
    )


def save_scenes(
    scenes: Sequence[Scene],
    path: Path | str,
    gt_questions: Mapping[str, Sequence[str]] | None = None,
) -> None:
    """Write scenes as JSON lines; one record per scene."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    gt_questions = gt_questions or {}
    with path.open("w", encoding="utf-8") as fh:
        for scene in scenes:
            record = {
                "scene_id": scene.scene_id,
                "split": scene.split,
                "image_size": list(scene.image_size),
                "objects": [_object_to_json(o) for o in scene.objects],
                "gt_questions": list(gt_questions.get(scene.scene_id, ())),
            }
            fh.write(json.dumps(record) + "\n")


def load_scenes(
    path: Path | str, space: AttributeSpace | None = None
) -> tuple[tuple[Scene, ...], dict[str, tuple[str, ...]]]:
    """Read scenes from a JSON-lines file.

    Returns (scenes, gt_questions).  Malformed lines and attribute values
    missing from ``space`` raise :class:`SceneFormatError` naming the
    offending line number.
    """
    path = Path(path)
    scenes: list[Scene] = []
    gt: dict[str, tuple[str, ...]] = {}
    seen_ids: set[str] = set()
    with path.open("r", encoding="utf-8") as fh:
        for line_no, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                data = json.loads(line)
            except json.JSONDecodeError as exc:
                raise SceneFormatError(f"line {line_no}: invalid JSON: {exc}") from exc
            if not isinstance(data, dict):
                raise SceneFormatError(f"line {line_no}: expected a JSON object")
            for key in _REQUIRED_SCENE_KEYS:
                if key not in data:
                    raise SceneFormatError(f"line {line_no}: missing key {key!r}")
            scene_id = str(data["scene_id"])
            if scene_id in seen_ids:
                raise SceneFormatError(f"line {line_no}: duplicate scene_id {scene_id!r}")
            seen_ids.add(scene_id)
            try:
                scene = Scene(
                    scene_id=scene_id,
                    split=str(data["split"]),
                    image_size=tuple(int(v) for v in data["image_size"]),
                    objects=tuple(
                        _object_from_json(o, scene_id, line_no) for o in data["objects"]
                    ),
                )
            except (ValueError, TypeError) as exc:
                raise SceneFormatError(f"line {line_no}: {exc}") from exc
            if space is not None:
                try:
                    scene.validate_against(space)
                except SceneFormatError as exc:
                    raise SceneFormatError(f"line {line_no}: {exc}") from exc
            scenes.append(scene)
            gt[scene_id] = tuple(str(q) for q in data["gt_questions"])
    return tuple(scenes), gt


def save_dataset(dataset: Dataset, out_dir: Path | str) -> None:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    for split, rows in dataset.scenes.items():
        save_scenes(rows, out_dir / f"{split}.jsonl", dataset.gt_questions)
    manifest = {
        "config": dataset.config.to_json(),
        "counts": {split: len(rows) for split, rows in dataset.scenes.items()},
        "object_count_hist": _object_count_hist(dataset),
        "attribute_hist": _attribute_hist(dataset),
    }
    (out_dir / "manifest.json").write_text(json.dumps(manifest, indent=2) + "\n")


def load_dataset(out_dir: Path | str) -> Dataset:
    out_dir = Path(out_dir)
    manifest = json.loads((out_dir / "manifest.json").read_text())
    config = DatasetConfig.from_json(manifest["config"])
    scenes: dict[str, tuple[Scene, ...]] = {}
    gt: dict[str, tuple[str, ...]] = {}
    for split in ("train", "val", "test"):
        path = out_dir / f"{split}.jsonl"
        if path.exists():
            rows, split_gt = load_scenes(path, config.space)
            scenes[split] = rows
            gt.update(split_gt)
    return Dataset(config=config, scenes=scenes, gt_questions=gt)


def _object_count_hist(dataset: Dataset) -> dict[str, int]:
    hist: dict[str, int] = {}
    for scene in dataset.all_scenes():
        key = str(len(scene))
        hist[key] = hist.get(key, 0) + 1
    return dict(sorted(hist.items(), key=lambda kv: int(kv[0])))


def _attribute_hist(dataset: Dataset) -> dict[str, dict[str, int]]:
    hist: dict[str, dict[str, int]] = {dim: {} for dim in ATTRIBUTE_DIMS}
    for scene in dataset.all_scenes():
        for obj in scene.objects:
            for dim in ATTRIBUTE_DIMS:
                val = obj.attribute(dim)
                hist[dim][val] = hist[dim].get(val, 0) + 1
    return {dim: dict(sorted(vals.items())) for dim, vals in hist.items()}
