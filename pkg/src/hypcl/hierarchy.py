"""Object-centric scene hierarchy: boxes, regions, pair sampling.

A scene holds object boxes; a region is the union of some of them; the
hierarchy connects nodes whose object sets are nested.  The contrastive
sampler draws, per scene, one jittered object crop for the Euclidean
branch (two views of it) and one region/object pair for the hyperbolic
branch, where the positive object must be a member of the anchor region
and negatives must not be.

Box preprocessing mirrors the proposal-cleaning pipeline: drop tiny
boxes by area, filter proposals by minimum side / aspect ratio / IoU
overlap, expand small boxes toward 256x256 and jitter their sides.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, replace

import numpy as np

__all__ = [
    "HierarchyEdge",
    "HierarchyNode",
    "CropSpec",
    "ObjectBox",
    "PairBatch",
    "Region",
    "SceneRecord",
    "UnusableSceneError",
    "box_iou",
    "build_hierarchy",
    "convert_detection_annotations",
    "drop_small_boxes",
    "eligible_objects",
    "expand_and_jitter",
    "filter_proposals",
    "read_scenes_jsonl",
    "sample_pairs",
    "sample_scene_region",
    "write_scenes_jsonl",
]

MIN_SIDE = 96.0
ASPECT_RANGE = (1.0 / 3.0, 3.0)
IOU_LIMIT = 0.5
MAX_PROPOSALS = 100
SMALL_AREA = 56.0 * 56.0
EXPAND_TARGET = 256.0
JITTER_RANGE = (0.9, 1.1)
REGION_EXTRA_RANGE = (1, 5)


class UnusableSceneError(ValueError):
    """No object survives filtering, so the scene cannot be sampled."""


@dataclass
class ObjectBox:
    x: float
    y: float
    width: float
    height: float
    class_id: int
    source: str = "ground_truth"          # "ground_truth" | "proposal"
    feature: np.ndarray | None = None
    is_out_of_context: bool = False

    def __post_init__(self):
        if self.width <= 0 or self.height <= 0:
            raise ValueError("box sides must be positive")
        if self.source not in ("ground_truth", "proposal"):
            raise ValueError(f"unknown box source {self.source!r}")

    @property
    def area(self) -> float:
        return self.width * self.height

    @property
    def rect(self) -> tuple:
        return (self.x, self.y, self.width, self.height)


@dataclass
class SceneRecord:
    scene_id: str
    width: float
    height: float
    objects: list                          # of ObjectBox
    context_id: int | None = None
    offset: np.ndarray | None = None       # per-scene context offset
    feature: np.ndarray | None = None      # whole-scene crop feature

    @property
    def extent(self) -> tuple:
        return (self.width, self.height)


@dataclass(frozen=True)
class Region:
    members: frozenset                     # object indices within the scene
    rect: tuple                            # union rectangle (x, y, w, h)

    def __post_init__(self):
        if not self.members:
            raise ValueError("a region needs at least one member object")


@dataclass(frozen=True)
class HierarchyNode:
    kind: str                              # "object" | "region" | "scene"
    index: int                             # position within its kind
    members: frozenset


@dataclass(frozen=True)
class HierarchyEdge:
    parent: int                            # node index (the superset side)
    child: int


@dataclass(frozen=True)
class CropSpec:
    """A crop the feature pipeline can realize deterministically."""

    scene_id: str
    rect: tuple
    members: tuple                         # object indices covered, () = whole scene
    view_seed: int | None = None           # None: raw crop, no view augmentation


@dataclass
class PairBatch:
    euclidean_anchor: CropSpec
    euclidean_positive: CropSpec
    hyperbolic_anchors: list                # of CropSpec
    hyperbolic_positives: list              # of CropSpec, aligned with anchors
    hyperbolic_negatives: list              # per-anchor lists of in-scene CropSpecs
    use_queue_negatives: bool = True
    mode: str = "object_centric"


def _rect_intersection_area(a: tuple, b: tuple) -> float:
    ax, ay, aw, ah = a
    bx, by, bw, bh = b
    w = min(ax + aw, bx + bw) - max(ax, bx)
    h = min(ay + ah, by + bh) - max(ay, by)
    return max(w, 0.0) * max(h, 0.0)


def box_iou(a: tuple, b: tuple) -> float:
    inter = _rect_intersection_area(a, b)
    union = a[2] * a[3] + b[2] * b[3] - inter
    return inter / union if union > 0 else 0.0


def _rect_union(rects) -> tuple:
    x0 = min(r[0] for r in rects)
    y0 = min(r[1] for r in rects)
    x1 = max(r[0] + r[2] for r in rects)
    y1 = max(r[1] + r[3] for r in rects)
    return (x0, y0, x1 - x0, y1 - y0)


def _clamp_rect(rect: tuple, extent: tuple) -> tuple:
    x, y, w, h = rect
    ww, hh = extent
    w = min(w, ww)
    h = min(h, hh)
    x = min(max(x, 0.0), ww - w)
    y = min(max(y, 0.0), hh - h)
    return (x, y, w, h)


def drop_small_boxes(boxes) -> list:
    """Remove boxes with width*height <= 56*56 px^2 (inclusive)."""
    return [b for b in boxes if b.area > SMALL_AREA]


def filter_proposals(boxes, extent) -> list:
    """Proposal cleaning: minimum side 96, aspect within [1/3, 3], greedy
    IoU > 0.5 suppression in descending-area order, at most 100 kept."""
    kept = []
    candidates = [
        b for b in boxes
        if min(b.width, b.height) >= MIN_SIDE
        and ASPECT_RANGE[0] <= b.width / b.height <= ASPECT_RANGE[1]
    ]
    for b in sorted(candidates, key=lambda b: (-b.area, b.x, b.y)):
        if all(box_iou(b.rect, k.rect) <= IOU_LIMIT for k in kept):
            kept.append(b)
        if len(kept) == MAX_PROPOSALS:
            break
    return kept


def expand_and_jitter(box: ObjectBox, extent, rng: np.random.Generator) -> ObjectBox:
    """Grow boxes of area <= 256*256 toward 256x256 about their center,
    capped by the extent, then jitter both sides by U[0.9, 1.1]."""
    x, y, w, h = box.rect
    ww, hh = extent
    if w * h <= EXPAND_TARGET * EXPAND_TARGET:
        new_w = min(max(w, EXPAND_TARGET), ww)
        new_h = min(max(h, EXPAND_TARGET), hh)
        cx, cy = x + w / 2.0, y + h / 2.0
        x, y, w, h = _clamp_rect(
            (cx - new_w / 2.0, cy - new_h / 2.0, new_w, new_h), extent
        )
    fw = rng.uniform(*JITTER_RANGE)
    fh = rng.uniform(*JITTER_RANGE)
    cx, cy = x + w / 2.0, y + h / 2.0
    w, h = w * fw, h * fh
    x, y, w, h = _clamp_rect((cx - w / 2.0, cy - h / 2.0, w, h), extent)
    return replace(box, x=x, y=y, width=w, height=h)


def eligible_objects(scene: SceneRecord) -> list:
    """Indices of objects that survive preprocessing.

    Proposal boxes additionally pass the proposal filter; every box must
    clear the small-area rule.
    """
    proposals = [
        (i, b) for i, b in enumerate(scene.objects) if b.source == "proposal"
    ]
    keep_proposal_ids = set()
    if proposals:
        kept = filter_proposals([b for _, b in proposals], scene.extent)
        kept_ids = {id(b) for b in kept}
        keep_proposal_ids = {i for i, b in proposals if id(b) in kept_ids}
    out = []
    for i, b in enumerate(scene.objects):
        if b.source == "proposal" and i not in keep_proposal_ids:
            continue
        if b.area <= SMALL_AREA:
            continue
        out.append(i)
    return out


def sample_scene_region(
    scene: SceneRecord,
    anchor_object: int,
    rng: np.random.Generator,
    candidates=None,
) -> Region:
    """Merge the anchor box with 1..5 other boxes drawn without replacement."""
    pool = [i for i in (candidates if candidates is not None
                        else range(len(scene.objects))) if i != anchor_object]
    want = int(rng.integers(REGION_EXTRA_RANGE[0], REGION_EXTRA_RANGE[1] + 1))
    take = min(want, len(pool))
    extra = (
        [int(i) for i in rng.choice(len(pool), size=take, replace=False)]
        if take > 0 else []
    )
    members = frozenset([anchor_object, *(pool[i] for i in extra)])
    rect = _rect_union([scene.objects[i].rect for i in sorted(members)])
    return Region(members=members, rect=rect)


def _whole_scene_spec(scene: SceneRecord) -> CropSpec:
    return CropSpec(
        scene_id=scene.scene_id,
        rect=(0.0, 0.0, scene.width, scene.height),
        members=(),
    )


def sample_pairs(
    scene: SceneRecord,
    mode: str,
    rng: np.random.Generator,
    whole_scene_prob: float = 0.3,
    hyperbolic_anchors: int = 1,
) -> PairBatch:
    """One Euclidean pair and `hyperbolic_anchors` hyperbolic pairs.

    object_centric: each hyperbolic anchor is a scene region (or the
    whole scene), its positive an object inside it, its in-scene
    negatives the objects outside it.  scene_centric flips the roles:
    the anchor is an object, the positive a region containing it, and
    the in-scene negatives are objects whose singleton sets the region
    does not contain.
    """
    if mode not in ("object_centric", "scene_centric"):
        raise ValueError(f"unknown hierarchy mode {mode!r}")
    usable = eligible_objects(scene)
    if not usable:
        raise UnusableSceneError(f"scene {scene.scene_id} has no usable object")

    # Euclidean branch: two augmented views of one expanded+jittered crop.
    obj_idx = usable[int(rng.integers(len(usable)))]
    jittered = expand_and_jitter(scene.objects[obj_idx], scene.extent, rng)
    seed_a, seed_b = int(rng.integers(2**31)), int(rng.integers(2**31))
    euc_anchor = CropSpec(scene.scene_id, jittered.rect, (obj_idx,), seed_a)
    euc_positive = CropSpec(scene.scene_id, jittered.rect, (obj_idx,), seed_b)

    anchors, positives, negatives = [], [], []
    for _ in range(hyperbolic_anchors):
        anchor_obj = usable[int(rng.integers(len(usable)))]
        if rng.random() < whole_scene_prob or len(usable) == 1:
            region_members = frozenset(usable)
            region_spec = _whole_scene_spec(scene)
        else:
            region = sample_scene_region(scene, anchor_obj, rng, candidates=usable)
            region_members = region.members
            region_spec = CropSpec(
                scene.scene_id, region.rect, tuple(sorted(region.members))
            )
        members_sorted = sorted(region_members)
        pos_idx = members_sorted[int(rng.integers(len(members_sorted)))]
        pos_spec = CropSpec(
            scene.scene_id, scene.objects[pos_idx].rect, (pos_idx,)
        )
        outside = [i for i in usable if i not in region_members]
        neg_specs = [
            CropSpec(scene.scene_id, scene.objects[i].rect, (i,))
            for i in outside
        ]
        if mode == "object_centric":
            anchors.append(region_spec)
            positives.append(pos_spec)
        else:
            anchors.append(pos_spec)
            positives.append(region_spec)
        negatives.append(neg_specs)

    return PairBatch(
        euclidean_anchor=euc_anchor,
        euclidean_positive=euc_positive,
        hyperbolic_anchors=anchors,
        hyperbolic_positives=positives,
        hyperbolic_negatives=negatives,
        mode=mode,
    )


def build_hierarchy(scene: SceneRecord, regions=()) -> tuple:
    """Nodes (objects, regions, the scene) and subset-inclusion edges.

    Returns (nodes, edges); the parent side of an edge is the larger
    object set (the whole scene sits above everything).  Equal sets are
    oriented scene > region > object, then by index.
    """
    rank = {"scene": 2, "region": 1, "object": 0}
    nodes = [
        HierarchyNode("object", i, frozenset([i]))
        for i in range(len(scene.objects))
    ]
    nodes.extend(
        HierarchyNode("region", j, frozenset(r.members))
        for j, r in enumerate(regions)
    )
    nodes.append(
        HierarchyNode("scene", 0, frozenset(range(len(scene.objects))))
    )
    edges = []
    for a in range(len(nodes)):
        for b in range(a + 1, len(nodes)):
            na, nb = nodes[a], nodes[b]
            if na.members < nb.members:
                edges.append(HierarchyEdge(parent=b, child=a))
            elif nb.members < na.members:
                edges.append(HierarchyEdge(parent=a, child=b))
            elif na.members == nb.members:
                hi, lo = (
                    (a, b)
                    if (rank[na.kind], -a) >= (rank[nb.kind], -b)
                    else (b, a)
                )
                edges.append(HierarchyEdge(parent=hi, child=lo))
    return nodes, edges


def _box_to_dict(b: ObjectBox) -> dict:
    d = {
        "x": b.x, "y": b.y, "w": b.width, "h": b.height,
        "class_id": b.class_id, "source": b.source,
    }
    if b.feature is not None:
        d["feature"] = [float(v) for v in b.feature]
    if b.is_out_of_context:
        d["is_out_of_context"] = True
    return d


def _box_from_dict(d: dict) -> ObjectBox:
    return ObjectBox(
        x=float(d["x"]), y=float(d["y"]),
        width=float(d["w"]), height=float(d["h"]),
        class_id=int(d["class_id"]), source=d.get("source", "ground_truth"),
        feature=(np.asarray(d["feature"], dtype=np.float64)
                 if "feature" in d else None),
        is_out_of_context=bool(d.get("is_out_of_context", False)),
    )


def write_scenes_jsonl(path, scenes) -> None:
    """One scene per line; key order is fixed so output is byte-stable."""
    with open(path, "w", encoding="utf-8") as fh:
        for s in scenes:
            rec = {
                "scene_id": s.scene_id,
                "width": s.width,
                "height": s.height,
                "objects": [_box_to_dict(b) for b in s.objects],
            }
            if s.context_id is not None:
                rec["context_id"] = s.context_id
            if s.offset is not None:
                rec["offset"] = [float(v) for v in s.offset]
            fh.write(json.dumps(rec, sort_keys=True) + "\n")


def read_scenes_jsonl(path) -> list:
    scenes = []
    with open(path, "r", encoding="utf-8") as fh:
        for line in fh:
            line = line.strip()
            if not line:
                continue
            rec = json.loads(line)
            scenes.append(
                SceneRecord(
                    scene_id=str(rec["scene_id"]),
                    width=float(rec["width"]),
                    height=float(rec["height"]),
                    objects=[_box_from_dict(d) for d in rec["objects"]],
                    context_id=rec.get("context_id"),
                    offset=(np.asarray(rec["offset"], dtype=np.float64)
                            if "offset" in rec else None),
                )
            )
    return scenes


def convert_detection_annotations(data: dict, source: str = "ground_truth") -> list:
    """Common detection layout (images + annotations with bbox quadruples)
    into SceneRecords; features stay empty for external ingestion."""
    by_image = {}
    for img in data.get("images", []):
        by_image[img["id"]] = SceneRecord(
            scene_id=str(img["id"]),
            width=float(img["width"]),
            height=float(img["height"]),
            objects=[],
        )
    for ann in data.get("annotations", []):
        scene = by_image.get(ann["image_id"])
        if scene is None:
            raise ValueError(f"annotation references unknown image {ann['image_id']}")
        x, y, w, h = (float(v) for v in ann["bbox"])
        x = min(max(x, 0.0), scene.width)
        y = min(max(y, 0.0), scene.height)
        w = min(w, scene.width - x)
        h = min(h, scene.height - y)
        if w <= 0 or h <= 0:
            continue
        scene.objects.append(
            ObjectBox(x=x, y=y, width=w, height=h,
                      class_id=int(ann.get("category_id", -1)), source=source)
        )
    return [by_image[k] for k in sorted(by_image)]
