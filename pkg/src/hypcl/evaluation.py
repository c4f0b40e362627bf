"""Zero-shot evaluations: norm ranking, NDCG, Borda, out-of-context
detection, hyperbolic prototypes, entropy baseline.

Everything operates on frozen encoder parameters; rankings are made
deterministic by breaking every tie on the identifier.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .encoder import EncoderParams, forward, project_hyperbolic
from .geometry import (
    BallConfig,
    clip_to_ball,
    distance,
    distance_matrix,
    grad_distance,
    inverse_conformal_factor,
)
from .hierarchy import SceneRecord
from .synthetic import crop_feature, unit_feature

__all__ = [
    "BallEmbedder",
    "average_precision",
    "borda_ensemble",
    "classify",
    "entropy_indicator",
    "fit_prototypes",
    "mean_average_precision",
    "ndcg",
    "out_of_context_scores",
    "rank_by_norm",
]


@dataclass
class BallEmbedder:
    """Frozen encoder plus ball config; the evaluation-side feature path.

    Crop features are unit-normalized before the encoder, matching the
    training pipeline.
    """

    params: EncoderParams
    ball: BallConfig

    def raw(self, features, branch: str = "hyperbolic") -> np.ndarray:
        emb, _ = forward(
            self.params,
            unit_feature(np.asarray(features, dtype=np.float64)),
            branch=branch,
        )
        return emb

    def points(self, features) -> np.ndarray:
        return project_hyperbolic(self.raw(features), self.ball)

    def embed_scene(self, scene: SceneRecord, mask_index=None):
        feat = crop_feature(
            scene, (0.0, 0.0, scene.width, scene.height), mask_index
        )
        return self.raw(feat)

    def embed_object(self, scene: SceneRecord, index: int):
        return self.raw(crop_feature(scene, scene.objects[index].rect))


def rank_by_norm(representations) -> list:
    """Ids ordered by descending Euclidean norm of the raw embedding;
    ties broken by id ascending."""
    keyed = [
        (-float(np.linalg.norm(np.asarray(vec, dtype=np.float64))), str(rid), rid)
        for rid, vec in representations
    ]
    keyed.sort(key=lambda t: (t[0], t[1]))
    return [rid for _, _, rid in keyed]


def ndcg(ranked_ids, relevance, cutoff: int | None = None) -> float:
    """Discounted cumulative gain with gain = relevance and discount
    1/log2(rank + 1), normalized by the ideal ordering.

    All-zero relevance is defined as 0.  Every ranked id must have a
    relevance value.
    """
    rels = [float(relevance[rid]) for rid in ranked_ids]
    if any(r < 0 for r in rels):
        raise ValueError("relevance must be nonnegative")
    k = len(rels) if cutoff is None else min(cutoff, len(rels))

    def dcg(values):
        return sum(v / math.log2(i + 2) for i, v in enumerate(values[:k]))

    ideal = dcg(sorted(rels, reverse=True))
    if ideal == 0.0:
        return 0.0
    return dcg(rels) / ideal


def borda_ensemble(ranking_a, ranking_b) -> list:
    """Positional-score rank aggregation: score(id) = (N - rank_A) +
    (N - rank_B) with 1-based ranks; sorted by descending score, ties
    broken by id."""
    if set(ranking_a) != set(ranking_b):
        raise ValueError("rankings must cover the same id set")
    if len(set(ranking_a)) != len(ranking_a):
        raise ValueError("duplicate ids in ranking")
    n = len(ranking_a)
    score = {}
    for rank, rid in enumerate(ranking_a, start=1):
        score[rid] = n - rank
    for rank, rid in enumerate(ranking_b, start=1):
        score[rid] += n - rank
    return sorted(score, key=lambda rid: (-score[rid], str(rid)))


def entropy_indicator(probabilities) -> float:
    """Shannon entropy (nats) of a class distribution; the classifier
    baseline that Borda combines with the norm ranking."""
    p = np.asarray(probabilities, dtype=np.float64)
    if np.any(p < 0):
        raise ValueError("probabilities must be nonnegative")
    if abs(float(p.sum()) - 1.0) > 1e-6:
        raise ValueError("probabilities must sum to 1")
    nz = p[p > 0]
    return float(-np.sum(nz * np.log(nz)))


def average_precision(ranking, positives) -> float:
    """AP of one ranked list against a set of positive ids."""
    positives = set(positives)
    if not positives:
        raise ValueError("average precision needs at least one positive")
    hits = 0
    total = 0.0
    for rank, rid in enumerate(ranking, start=1):
        if rid in positives:
            hits += 1
            total += hits / rank
    if hits == 0:
        return 0.0
    return total / len(positives)


def mean_average_precision(rankings, positive_sets) -> float:
    """Mean AP over scenes; scenes without positives are excluded."""
    scores = [
        average_precision(r, p)
        for r, p in zip(rankings, positive_sets)
        if p
    ]
    if not scores:
        raise ValueError("no scene has a labeled positive")
    return float(np.mean(scores))


def out_of_context_scores(scene: SceneRecord, embedder: BallEmbedder):
    """Per object: ball distance between the object crop and the whole
    scene with that object masked out.  Larger distance reads as more
    out of context.  Returns None for single-object scenes (masking
    would leave nothing)."""
    if len(scene.objects) < 2:
        return None
    obj_feats = np.stack([
        crop_feature(scene, b.rect) for b in scene.objects
    ])
    masked_feats = np.stack([
        crop_feature(scene, (0.0, 0.0, scene.width, scene.height), mask_index=i)
        for i in range(len(scene.objects))
    ])
    z_obj = embedder.points(obj_feats)
    z_masked = embedder.points(masked_feats)
    dists = distance(z_obj, z_masked, embedder.ball)
    return [(i, float(d)) for i, d in enumerate(dists)]


def ooc_ranking(scores) -> list:
    """Object indices by descending distance, ties by index."""
    return [i for i, _ in sorted(scores, key=lambda t: (-t[1], t[0]))]


def fit_prototypes(points_by_class: dict, ball: BallConfig,
                   tol: float = 1e-8, max_steps: int = 2000,
                   lr: float = 0.2) -> dict:
    """Per-class hyperbolic centroid: the minimizer of the mean squared
    ball distance, found by Riemannian-scaled descent to tolerance tol.

    There is no closed form in the ball; a single point is its own
    centroid, and symmetric configurations balance at the origin.
    """
    prototypes = {}
    for cls, pts in sorted(points_by_class.items()):
        pts = np.atleast_2d(np.asarray(pts, dtype=np.float64))
        if pts.shape[0] == 0:
            raise ValueError(f"class {cls} has no labeled points")
        if pts.shape[0] == 1:
            prototypes[cls] = pts[0].copy()
            continue
        c = clip_to_ball(pts.mean(axis=0), ball)
        for _ in range(max_steps):
            d = distance(c[None, :], pts, ball)
            gc, _, degen = grad_distance(
                np.broadcast_to(c, pts.shape), pts, ball
            )
            grad = np.mean(2.0 * d[:, None] * gc, axis=0)
            step = lr * float(inverse_conformal_factor(c, ball)) * grad
            c_new = clip_to_ball(c - step, ball)
            if np.linalg.norm(c_new - c) < tol:
                c = c_new
                break
            c = c_new
        prototypes[cls] = c
    return prototypes


def classify(point, prototypes: dict, ball: BallConfig):
    """Nearest prototype under the ball distance; ties by class id."""
    if not prototypes:
        raise ValueError("no prototypes")
    classes = sorted(prototypes)
    protos = np.stack([prototypes[c] for c in classes])
    d = distance_matrix(np.atleast_2d(np.asarray(point, dtype=np.float64)),
                        protos, ball)[0]
    return classes[int(np.argmin(d))]


def norm_count_evaluation(scenes, embedder: BallEmbedder) -> dict:
    """Whole-scene raw embedding norms against object counts.

    Returns the Spearman correlation, the norm ranking, and the NDCG of
    that ranking with gain = object count - 1 (scenes with one object
    carry no relevance).
    """
    from scipy.stats import spearmanr

    feats = np.stack([s.feature for s in scenes])
    emb = embedder.raw(feats)
    norms = np.linalg.norm(emb, axis=-1)
    counts = np.array([len(s.objects) for s in scenes], dtype=float)
    ranking = rank_by_norm(list(zip([s.scene_id for s in scenes], emb)))
    relevance = {s.scene_id: float(len(s.objects) - 1) for s in scenes}
    rho = float(spearmanr(norms, counts)[0])
    return {
        "spearman_norm_count": rho,
        "ndcg_object_count": ndcg(ranking, relevance),
        "mean_scene_norm": float(np.mean(norms)),
        "ranking": ranking,
    }


def ooc_evaluation(scenes, embedder: BallEmbedder,
                   baseline_seed: int = 0, baseline_rounds: int = 20) -> dict:
    """Out-of-context detection over all scenes with planted objects.

    Scores every multi-object scene, ranks objects by distance, and
    computes mAP over scenes holding at least one planted object; the
    random baseline reshuffles the same rankings.
    """
    rankings, positives, skipped = [], [], 0
    for scene in scenes:
        planted = {i for i, b in enumerate(scene.objects) if b.is_out_of_context}
        if not planted:
            continue
        scores = out_of_context_scores(scene, embedder)
        if scores is None:
            skipped += 1
            continue
        rankings.append(ooc_ranking(scores))
        positives.append(planted)
    if not rankings:
        raise ValueError("no scene with planted out-of-context objects")
    model_map = mean_average_precision(rankings, positives)
    rng = np.random.default_rng(baseline_seed)
    baseline = []
    for _ in range(baseline_rounds):
        shuffled = [list(rng.permutation(r)) for r in rankings]
        baseline.append(mean_average_precision(shuffled, positives))
    return {
        "map": model_map,
        "random_map": float(np.mean(baseline)),
        "scenes_scored": len(rankings),
        "single_object_skipped": skipped,
    }


def prototype_evaluation(scenes, embedder: BallEmbedder,
                         train_fraction: float = 0.5) -> dict:
    """Nearest-prototype classification of object crops in the ball.

    Prototypes are fitted on the leading fraction of scenes and applied
    to the rest; reports accuracy against the majority-class baseline.
    """
    split = max(1, int(len(scenes) * train_fraction))
    train, test = scenes[:split], scenes[split:]

    def gather(part):
        feats, labels = [], []
        for scene in part:
            for box in scene.objects:
                feats.append(crop_feature(scene, box.rect))
                labels.append(box.class_id)
        return np.stack(feats), labels

    feats, labels = gather(train)
    points = embedder.points(feats)
    by_class = {}
    for z, cls in zip(points, labels):
        by_class.setdefault(cls, []).append(z)
    prototypes = fit_prototypes(
        {c: np.stack(v) for c, v in by_class.items()}, embedder.ball
    )
    feats, labels = gather(test)
    if not labels:
        raise ValueError("no test objects")
    points = embedder.points(feats)
    correct = total = 0
    label_counts = {}
    for z, cls in zip(points, labels):
        pred = classify(z, prototypes, embedder.ball)
        correct += pred == cls
        total += 1
        label_counts[cls] = label_counts.get(cls, 0) + 1
    majority = max(label_counts.values()) / total
    return {
        "accuracy": correct / total,
        "majority_baseline": majority,
        "test_objects": total,
        "classes": len(prototypes),
    }
