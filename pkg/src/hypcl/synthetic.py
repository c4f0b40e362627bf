"""Deterministic desk-scale scene generator and the crop-to-feature map.

Instead of pixels, every object carries a feature vector: its class
prototype plus Gaussian noise.  Classes are grouped into contexts;
a scene draws its objects from one context, except for deliberately
planted out-of-context objects drawn from a different one (and flagged
in the ground-truth table).  A crop of a scene is realized as the
intersection-weighted mean of the object features it covers plus a
fixed per-scene context offset, so every downstream claim can be
checked against exact ground truth.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass

import numpy as np

from .hierarchy import ObjectBox, SceneRecord, _rect_intersection_area

__all__ = [
    "EmptyCropError",
    "GeneratorConfig",
    "ObjectTruth",
    "augment_view",
    "crop_feature",
    "crop_features_batch",
    "generate_dataset",
    "read_truth",
    "write_truth",
]

# Geometry of generated boxes (pixels); sides clear the small-box filter.
BOX_SIDE_RANGE = (90.0, 280.0)

# Feature-space layout relative to `separation`: context centers sit at
# CONTEXT_SCALE * separation from the origin, class prototypes at
# `separation` from their center; the per-scene offset points along the
# scene's context center with random magnitude and a small isotropic
# wobble.  Scenes with more objects span more distinct classes (that is
# the compositional signal every hierarchy claim rests on), the class
# mix cycles so it stays balanced at every count, and the random offset
# magnitude decorrelates feature norms from the count.
CONTEXT_SCALE = 1.5
OFFSET_RANGE = (0.0, 2.2)
OFFSET_NOISE = 0.1


def distinct_class_count(object_count: int, pool_size: int) -> int:
    """Distinct classes in a scene: grows with object count, capped by
    the context's class pool."""
    return min(pool_size, 1 + (object_count - 1) // 2)


class EmptyCropError(ValueError):
    """The rectangle intersects no object box."""


@dataclass(frozen=True)
class GeneratorConfig:
    class_count: int = 10
    feature_dim: int = 64
    objects_min: int = 1
    objects_max: int = 8
    separation: float = 1.0
    noise_sigma: float = 0.02
    ooc_rate: float = 0.0
    context_count: int = 3
    scene_count: int = 2000
    extent: tuple = (1024.0, 1024.0)
    seed: int = 0

    def __post_init__(self):
        if self.class_count < 2:
            raise ValueError("need at least 2 classes")
        if self.separation <= 0:
            raise ValueError("separation must be positive")
        if not 0.0 <= self.ooc_rate < 1.0:
            raise ValueError("ooc_rate must lie in [0, 1)")
        if not 1 <= self.objects_min <= self.objects_max:
            raise ValueError("objects-per-scene range must satisfy 1 <= lo <= hi")
        if self.context_count < 1 or self.class_count < self.context_count:
            raise ValueError("need at least one class per context")
        if self.ooc_rate > 0 and self.context_count < 2:
            raise ValueError("planting out-of-context objects needs >= 2 contexts")
        if self.scene_count < 1:
            raise ValueError("scene_count must be positive")


@dataclass(frozen=True)
class ObjectTruth:
    scene_id: str
    object_index: int
    is_out_of_context: bool
    class_id: int
    object_count: int


def _unit(v: np.ndarray) -> np.ndarray:
    return v / np.linalg.norm(v)


def class_context(class_id: int, cfg: GeneratorConfig) -> int:
    return class_id % cfg.context_count


def _prototypes(cfg: GeneratorConfig, rng: np.random.Generator):
    centers = np.stack([
        CONTEXT_SCALE * cfg.separation * _unit(rng.standard_normal(cfg.feature_dim))
        for _ in range(cfg.context_count)
    ])
    protos = np.stack([
        centers[class_context(c, cfg)]
        + cfg.separation * _unit(rng.standard_normal(cfg.feature_dim))
        for c in range(cfg.class_count)
    ])
    return centers, protos


def generate_dataset(cfg: GeneratorConfig):
    """Scenes plus the complete ground-truth table, all from cfg.seed.

    Per-scene randomness comes from spawned child seeds, so generation
    is bit-reproducible and partitionable by scene id.
    """
    root = np.random.SeedSequence(cfg.seed)
    master = np.random.default_rng(root.spawn(1)[0])
    centers, protos = _prototypes(cfg, master)
    by_context = [
        [c for c in range(cfg.class_count) if class_context(c, cfg) == k]
        for k in range(cfg.context_count)
    ]
    scenes, truth = [], []
    width, height = cfg.extent
    for scene_idx, child in enumerate(root.spawn(cfg.scene_count + 1)[1:]):
        rng = np.random.default_rng(child)
        scene_id = f"scene-{scene_idx:06d}"
        context = int(rng.integers(cfg.context_count))
        count = int(rng.integers(cfg.objects_min, cfg.objects_max + 1))
        offset = float(rng.uniform(*OFFSET_RANGE)) * cfg.separation \
            * _unit(centers[context]) \
            + OFFSET_NOISE * cfg.separation * rng.standard_normal(cfg.feature_dim)
        pool = by_context[context]
        n_distinct = distinct_class_count(count, len(pool))
        scene_classes = [
            pool[i] for i in rng.choice(len(pool), size=n_distinct, replace=False)
        ]
        objects = []
        for obj_idx in range(count):
            is_ooc = bool(rng.random() < cfg.ooc_rate)
            if is_ooc:
                other = [c for c in range(cfg.class_count)
                         if class_context(c, cfg) != context]
                cls = int(other[rng.integers(len(other))])
            else:
                # cycle the scene's classes so the class mix is balanced
                # for every object count
                cls = int(scene_classes[obj_idx % n_distinct])
            feature = protos[cls] + cfg.noise_sigma * rng.standard_normal(
                cfg.feature_dim
            )
            w = float(rng.uniform(*BOX_SIDE_RANGE))
            h = float(rng.uniform(*BOX_SIDE_RANGE))
            x = float(rng.uniform(0.0, width - w))
            y = float(rng.uniform(0.0, height - h))
            objects.append(
                ObjectBox(x=x, y=y, width=w, height=h, class_id=cls,
                          source="ground_truth", feature=feature,
                          is_out_of_context=is_ooc)
            )
            truth.append(
                ObjectTruth(scene_id, obj_idx, is_ooc, cls, count)
            )
        scene = SceneRecord(
            scene_id=scene_id, width=width, height=height, objects=objects,
            context_id=context, offset=offset,
        )
        scene.feature = crop_feature(scene, (0.0, 0.0, width, height))
        scenes.append(scene)
    return scenes, truth


def crop_feature(scene: SceneRecord, rect, mask_index: int | None = None):
    """Intersection-weighted mean of covered object features plus the
    per-scene offset; `mask_index` excludes one object entirely."""
    weights, feats = [], []
    for i, box in enumerate(scene.objects):
        if i == mask_index:
            continue
        if box.feature is None:
            raise ValueError(f"object {i} in {scene.scene_id} has no feature")
        w = _rect_intersection_area(box.rect, tuple(rect)) / box.area
        if w > 0.0:
            weights.append(w)
            feats.append(box.feature)
    if not weights:
        raise EmptyCropError(
            f"rectangle {tuple(rect)} covers no object in {scene.scene_id}"
        )
    weights = np.asarray(weights, dtype=np.float64)
    mean = weights @ np.stack(feats) / weights.sum()
    if scene.offset is not None:
        mean = mean + scene.offset
    return mean


def unit_feature(feature) -> np.ndarray:
    """Scale a crop feature to unit norm (the encoders' input convention).

    Feature energy varies with how many class deviations average out in
    a crop, which is an artifact of the feature stand-in rather than
    content; direction carries all of the class/context information.
    """
    f = np.asarray(feature, dtype=np.float64)
    n = np.linalg.norm(f, axis=-1, keepdims=True)
    if np.any(n < 1e-12):
        raise ValueError("cannot normalize a zero feature")
    return f / n


def crop_features_batch(specs_with_scenes, view_noise: float = 0.05,
                        view_dropout: float = 0.1,
                        normalize: bool = False) -> np.ndarray:
    """crop_feature over many (CropSpec, SceneRecord) pairs at once.

    Semantically identical to calling crop_feature per spec (with unit
    normalization, when requested, applied before the optional view
    augmentation); scenes are grouped so the weighted means run as one
    matrix product per scene.
    """
    out = [None] * len(specs_with_scenes)
    by_scene = {}
    for pos, (spec, scene) in enumerate(specs_with_scenes):
        by_scene.setdefault(id(scene), (scene, []))[1].append((pos, spec))
    for scene, entries in by_scene.values():
        boxes = np.array([b.rect for b in scene.objects])          # (n, 4)
        areas = boxes[:, 2] * boxes[:, 3]
        feats = np.stack([b.feature for b in scene.objects])       # (n, d)
        rects = np.array([spec.rect for _, spec in entries])       # (m, 4)
        x0 = np.maximum(rects[:, None, 0], boxes[None, :, 0])
        y0 = np.maximum(rects[:, None, 1], boxes[None, :, 1])
        x1 = np.minimum(rects[:, None, 0] + rects[:, None, 2],
                        boxes[None, :, 0] + boxes[None, :, 2])
        y1 = np.minimum(rects[:, None, 1] + rects[:, None, 3],
                        boxes[None, :, 1] + boxes[None, :, 3])
        w = np.maximum(x1 - x0, 0.0) * np.maximum(y1 - y0, 0.0) / areas[None, :]
        total = w.sum(axis=1)
        if np.any(total <= 0.0):
            bad = int(np.argmax(total <= 0.0))
            raise EmptyCropError(
                f"rectangle {entries[bad][1].rect} covers no object "
                f"in {scene.scene_id}"
            )
        mean = (w @ feats) / total[:, None]
        if scene.offset is not None:
            mean = mean + scene.offset
        if normalize:
            mean = unit_feature(mean)
        for row, (pos, spec) in enumerate(entries):
            f = mean[row]
            if spec.view_seed is not None:
                f = augment_view(f, spec.view_seed, view_noise, view_dropout)
            out[pos] = f
    return np.stack(out)


def augment_view(feature, seed: int, noise_sigma: float = 0.05,
                 dropout_rate: float = 0.1):
    """The desk-scale stand-in for view augmentation: additive Gaussian
    noise plus random coordinate dropout, fully determined by the seed."""
    rng = np.random.default_rng(seed)
    f = np.asarray(feature, dtype=np.float64)
    out = f + noise_sigma * rng.standard_normal(f.shape)
    if dropout_rate > 0:
        out = out * (rng.random(f.shape) >= dropout_rate)
    return out


_TRUTH_FIELDS = ["scene_id", "object_index", "is_out_of_context",
                 "class_id", "object_count"]


def write_truth(path, rows) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, delimiter="\t", lineterminator="\n")
        writer.writerow(_TRUTH_FIELDS)
        for r in rows:
            writer.writerow([
                r.scene_id, r.object_index, int(r.is_out_of_context),
                r.class_id, r.object_count,
            ])


def read_truth(path) -> list:
    rows = []
    with open(path, "r", newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh, delimiter="\t")
        for rec in reader:
            rows.append(ObjectTruth(
                scene_id=rec["scene_id"],
                object_index=int(rec["object_index"]),
                is_out_of_context=bool(int(rec["is_out_of_context"])),
                class_id=int(rec["class_id"]),
                object_count=int(rec["object_count"]),
            ))
    return rows
