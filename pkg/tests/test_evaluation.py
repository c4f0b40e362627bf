"""Ranking metrics against brute-force oracles; prototypes; OOC scores."""

import itertools
import math

import numpy as np
import pytest

from hypcl.encoder import EncoderParams, Layer
from hypcl.evaluation import (
    BallEmbedder,
    average_precision,
    borda_ensemble,
    classify,
    entropy_indicator,
    fit_prototypes,
    mean_average_precision,
    ndcg,
    ooc_ranking,
    out_of_context_scores,
    rank_by_norm,
)
from hypcl.geometry import BallConfig, distance, exp_map_origin, random_points
from hypcl.hierarchy import ObjectBox, SceneRecord

BALL = BallConfig(radius=4.5, clip_epsilon=1e-5, dimension=4)


def brute_force_ndcg(ranked_ids, relevance):
    """Oracle: IDCG found by enumerating every permutation."""
    rels = [relevance[r] for r in ranked_ids]

    def dcg(vals):
        return sum(v / math.log2(i + 2) for i, v in enumerate(vals))

    best = max(dcg(p) for p in itertools.permutations(rels))
    return dcg(rels) / best if best > 0 else 0.0


def brute_force_ap(ranking, positives):
    """Oracle: AP by explicit precision-at-cut counting."""
    total, hits = 0.0, 0
    for k in range(1, len(ranking) + 1):
        if ranking[k - 1] in positives:
            hits += 1
            inside = sum(1 for r in ranking[:k] if r in positives)
            total += inside / k
    return total / len(positives) if positives else 0.0


class TestRankByNorm:
    def test_descending_norms(self):
        reps = [("a", [3.0, 0]), ("b", [1.0, 0]), ("c", [2.0, 0])]
        assert rank_by_norm(reps) == ["a", "c", "b"]

    def test_ties_by_id(self):
        reps = [("b", [1.0, 0]), ("a", [0, 1.0]), ("c", [1.0, 0])]
        assert rank_by_norm(reps) == ["a", "b", "c"]

    def test_scale_invariance(self):
        rng = np.random.default_rng(0)
        reps = [(i, rng.standard_normal(6)) for i in range(20)]
        scaled = [(i, 7.3 * v) for i, v in reps]
        assert rank_by_norm(reps) == rank_by_norm(scaled)


class TestNdcg:
    def test_ideal_ordering_is_one(self):
        ids = ["a", "b", "c"]
        rel = {"a": 3.0, "b": 2.0, "c": 0.0}
        assert ndcg(ids, rel) == pytest.approx(1.0)

    def test_worst_first_two_items(self):
        # relevances (0, 1) ranked worst-first: DCG = 1/log2(3), IDCG = 1
        val = ndcg(["z", "y"], {"z": 0.0, "y": 1.0})
        assert val == pytest.approx(1.0 / math.log2(3.0), rel=1e-12)

    def test_all_zero_relevance_is_zero(self):
        assert ndcg(["a", "b"], {"a": 0.0, "b": 0.0}) == 0.0

    def test_in_unit_interval_and_one_iff_sorted(self):
        rng = np.random.default_rng(1)
        for _ in range(200):
            n = int(rng.integers(2, 9))
            ids = list(range(n))
            rel = {i: float(rng.integers(0, 5)) for i in ids}
            rng.shuffle(ids)
            val = ndcg(ids, rel)
            assert 0.0 <= val <= 1.0 + 1e-12
            rels = [rel[i] for i in ids]
            if all(a >= b for a, b in zip(rels, rels[1:])) and any(rels):
                assert val == pytest.approx(1.0)

    def test_matches_brute_force_oracle(self):
        rng = np.random.default_rng(2)
        for _ in range(300):
            n = int(rng.integers(2, 9))
            ids = list(range(n))
            rel = {i: float(np.round(rng.random() * 4, 3)) for i in ids}
            rng.shuffle(ids)
            assert ndcg(ids, rel) == pytest.approx(
                brute_force_ndcg(ids, rel), rel=1e-12
            )

    def test_cutoff(self):
        ids = ["a", "b", "c"]
        rel = {"a": 0.0, "b": 5.0, "c": 1.0}
        # cutoff 1 sees only 'a' with gain 0 -> 0 against ideal 5
        assert ndcg(ids, rel, cutoff=1) == 0.0


class TestBorda:
    def test_identical_rankings_unchanged(self):
        a = ["x", "y", "z"]
        assert borda_ensemble(a, list(a)) == a

    def test_reversed_two_items_tie_by_id(self):
        assert borda_ensemble(["b", "a"], ["a", "b"]) == ["a", "b"]

    def test_three_item_hand_values(self):
        # A=(x,y,z), B=(y,x,z): scores x:3, y:3, z:0 -> (x, y, z)
        assert borda_ensemble(["x", "y", "z"], ["y", "x", "z"]) == ["x", "y", "z"]

    def test_mismatched_ids_rejected(self):
        with pytest.raises(ValueError):
            borda_ensemble(["a", "b"], ["a", "c"])


class TestEntropy:
    def test_one_hot_zero(self):
        assert entropy_indicator([0.0, 1.0, 0.0]) == 0.0

    def test_uniform_log_k(self):
        assert entropy_indicator(np.full(5, 0.2)) == pytest.approx(math.log(5))

    def test_fair_coin(self):
        assert entropy_indicator([0.5, 0.5]) == pytest.approx(math.log(2))

    def test_invalid_distribution(self):
        with pytest.raises(ValueError):
            entropy_indicator([0.5, 0.4])
        with pytest.raises(ValueError):
            entropy_indicator([1.5, -0.5])


class TestAveragePrecision:
    def test_positive_first_is_one(self):
        assert average_precision(["p", "n1", "n2"], {"p"}) == 1.0

    def test_matches_brute_force_oracle(self):
        rng = np.random.default_rng(3)
        for _ in range(300):
            n = int(rng.integers(2, 9))
            ranking = list(rng.permutation(n))
            k = int(rng.integers(1, n + 1))
            positives = set(int(i) for i in rng.choice(n, size=k, replace=False))
            assert average_precision(ranking, positives) == pytest.approx(
                brute_force_ap(ranking, positives), rel=1e-12
            )

    def test_exhaustive_permutations_small(self):
        for n in range(2, 6):
            for positives in [{0}, {0, 1}]:
                for perm in itertools.permutations(range(n)):
                    assert average_precision(perm, positives) == pytest.approx(
                        brute_force_ap(perm, positives), rel=1e-12
                    )

    def test_random_expected_value_one_in_four(self):
        # E[AP] for 1 positive among 4 = (1/4)(1 + 1/2 + 1/3 + 1/4)
        rng = np.random.default_rng(4)
        vals = []
        for _ in range(10000):
            perm = list(rng.permutation(4))
            vals.append(average_precision(perm, {0}))
        want = 0.25 * (1 + 0.5 + 1 / 3 + 0.25)
        assert abs(float(np.mean(vals)) - want) < 0.01

    def test_mean_excludes_sceneless_positives(self):
        rankings = [["a", "b"], ["c", "d"]]
        positives = [{"b"}, set()]
        assert mean_average_precision(rankings, positives) == pytest.approx(0.5)

    def test_no_positives_at_all_rejected(self):
        with pytest.raises(ValueError):
            mean_average_precision([["a"]], [set()])


class TestPrototypes:
    def test_single_point_is_its_own_prototype(self):
        p = np.array([0.5, 0.2, 0.0, -0.1])
        protos = fit_prototypes({0: p[None, :]}, BALL)
        np.testing.assert_array_equal(protos[0], p)

    def test_antipodal_pair_centroid_at_origin(self):
        p = exp_map_origin(np.array([1.0, 0.5, 0.0, 0.0]), BALL)
        protos = fit_prototypes({0: np.stack([p, -p])}, BALL)
        np.testing.assert_allclose(protos[0], 0.0, atol=1e-6)

    def test_centroid_beats_sample_points(self):
        rng = np.random.default_rng(5)
        pts = random_points(rng, 12, BALL, max_radius_fraction=0.5)

        def objective(c):
            return float(np.mean(distance(
                np.broadcast_to(c, pts.shape), pts, BALL
            ) ** 2))

        proto = fit_prototypes({0: pts}, BALL)[0]
        best_sample = min(objective(p) for p in pts)
        assert objective(proto) <= best_sample + 1e-9

    def test_empty_class_rejected(self):
        with pytest.raises(ValueError):
            fit_prototypes({0: np.zeros((0, 4))}, BALL)

    def test_classify_nearest(self):
        protos = {
            0: exp_map_origin(np.array([1.0, 0, 0, 0]), BALL),
            1: exp_map_origin(np.array([-1.0, 0, 0, 0]), BALL),
        }
        assert classify(np.array([0.5, 0, 0, 0]), protos, BALL) == 0
        assert classify(np.array([-0.5, 0, 0, 0]), protos, BALL) == 1

    def test_classify_tie_by_class_id(self):
        protos = {
            3: exp_map_origin(np.array([1.0, 0, 0, 0]), BALL),
            1: exp_map_origin(np.array([-1.0, 0, 0, 0]), BALL),
        }
        assert classify(np.zeros(4), protos, BALL) == 1


def one_object_scene(feature, n=1):
    objs = [
        ObjectBox(x=10 + 200 * i, y=10, width=100, height=100, class_id=0,
                  feature=np.asarray(feature, dtype=np.float64))
        for i in range(n)
    ]
    return SceneRecord("s", 1024.0, 1024.0, objs)


class TestOutOfContext:
    def embedder(self):
        # identity-ish encoder: trunk-free linear head mapping 4 -> 4
        params = EncoderParams(
            trunk=[],
            heads={"shared": Layer(np.eye(4), np.zeros(4), "identity")},
            head_mode="shared",
        )
        return BallEmbedder(params, BALL)

    def test_single_object_scene_skipped(self):
        assert out_of_context_scores(one_object_scene([1, 0, 0, 0]), self.embedder()) is None

    def test_duplicated_object_near_zero_distance(self):
        scene = one_object_scene([0.5, 0.1, 0.0, 0.0], n=3)
        scores = out_of_context_scores(scene, self.embedder())
        assert scores is not None
        for _, d in scores:
            assert d < 1e-9

    def test_odd_object_scores_highest(self):
        objs = [
            ObjectBox(x=10, y=10, width=100, height=100, class_id=0,
                      feature=np.array([1.0, 0, 0, 0])),
            ObjectBox(x=300, y=10, width=100, height=100, class_id=0,
                      feature=np.array([1.0, 0.1, 0, 0])),
            ObjectBox(x=600, y=10, width=100, height=100, class_id=1,
                      feature=np.array([-2.0, 3.0, 0, 0])),
        ]
        scene = SceneRecord("s", 1024.0, 1024.0, objs)
        scores = out_of_context_scores(scene, self.embedder())
        ranking = ooc_ranking(scores)
        assert ranking[0] == 2

    def test_symmetry_and_determinism(self):
        scene = one_object_scene([0.3, -0.2, 0.1, 0.0], n=4)
        e = self.embedder()
        s1 = out_of_context_scores(scene, e)
        s2 = out_of_context_scores(scene, e)
        assert s1 == s2
