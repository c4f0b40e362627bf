"""Contrastive losses: closed-form values, gradients, queue semantics."""

import math

import numpy as np
import pytest

from _finite_diff import fd_grad, rel_err
from hypcl.geometry import BallConfig, distance, exp_map_origin, random_points
from hypcl.objectives import (
    LossConfig,
    NegativeQueue,
    combined_loss,
    euclidean_infonce,
    euclidean_infonce_batch,
    hyperbolic_infonce,
    hyperbolic_infonce_batch,
)

CFG = BallConfig(radius=4.5, clip_epsilon=1e-5, dimension=4)


def unit(v):
    v = np.asarray(v, dtype=np.float64)
    return v / np.linalg.norm(v)


class TestEuclideanInfonce:
    def test_hand_value_single_negative(self):
        # pos logit 1, neg logit 0, tau=1 -> log(1 + e^-1)
        z1 = unit([1.0, 0.0, 0.0, 0.0])
        z2 = z1.copy()
        neg = unit([0.0, 1.0, 0.0, 0.0])
        loss, _ = euclidean_infonce(z1, z2, [neg], temperature=1.0)
        assert loss == pytest.approx(math.log(1 + math.exp(-1)), rel=1e-12)

    def test_saturates_to_zero_at_low_temperature(self):
        z1 = unit([1.0, 0.0, 0.0, 0.0])
        neg = unit([0.0, 1.0, 0.0, 0.0])
        loss, _ = euclidean_infonce(z1, z1.copy(), [neg], temperature=0.01)
        assert loss < 1e-10

    def test_permutation_invariance(self):
        rng = np.random.default_rng(0)
        z1 = unit(rng.standard_normal(4))
        z2 = unit(rng.standard_normal(4))
        negs = [unit(rng.standard_normal(4)) for _ in range(6)]
        l1, g1 = euclidean_infonce(z1, z2, negs, 0.2)
        perm = [negs[i] for i in [3, 0, 5, 1, 4, 2]]
        l2, g2 = euclidean_infonce(z1, z2, perm, 0.2)
        assert l1 == pytest.approx(l2, rel=1e-12)
        np.testing.assert_allclose(g1, g2, rtol=1e-12)

    def test_empty_negatives_rejected(self):
        z = unit([1.0, 0, 0, 0])
        with pytest.raises(ValueError):
            euclidean_infonce(z, z, np.zeros((0, 4)), 0.2)

    def test_non_unit_rejected(self):
        z = unit([1.0, 0, 0, 0])
        with pytest.raises(ValueError):
            euclidean_infonce(z, 2.0 * z, [z], 0.2)

    def test_gradient_matches_finite_differences(self):
        # FD moves z1 off the sphere, so compare against the composed map
        # z1(raw) = raw/||raw|| to keep the precondition satisfied.
        rng = np.random.default_rng(1)
        worst = 0.0
        for _ in range(30):
            raw = rng.standard_normal(4) * 2.0
            z2 = unit(rng.standard_normal(4))
            negs = np.stack([unit(rng.standard_normal(4)) for _ in range(5)])

            def loss_of(rawv):
                z = rawv / np.linalg.norm(rawv)
                return euclidean_infonce(z, z2, negs, 0.2)[0]

            z1 = unit(raw)
            _, g = euclidean_infonce(z1, z2, negs, 0.2)
            n = np.linalg.norm(raw)
            g_raw = (g - (g @ z1) * z1) / n  # chain through normalization
            fd = fd_grad(loss_of, raw)
            worst = max(worst, rel_err(g_raw, fd))
        assert worst < 1e-6

    def test_gradient_step_increases_positive_similarity(self):
        rng = np.random.default_rng(2)
        z1 = unit(rng.standard_normal(4))
        z2 = unit(rng.standard_normal(4))
        negs = np.stack([unit(rng.standard_normal(4)) for _ in range(4)])
        _, g = euclidean_infonce(z1, z2, negs, 0.2)
        stepped = unit(z1 - 1e-3 * g)
        assert stepped @ z2 > z1 @ z2

    def test_batch_matches_single(self):
        rng = np.random.default_rng(3)
        Z1 = np.stack([unit(rng.standard_normal(4)) for _ in range(7)])
        Z2 = np.stack([unit(rng.standard_normal(4)) for _ in range(7)])
        negs = np.stack([unit(rng.standard_normal(4)) for _ in range(9)])
        losses, grads = euclidean_infonce_batch(Z1, Z2, negs, 0.2)
        for i in range(7):
            l, g = euclidean_infonce(Z1[i], Z2[i], negs, 0.2)
            assert losses[i] == pytest.approx(l, rel=1e-12)
            np.testing.assert_allclose(grads[i], g, rtol=1e-12)


class TestHyperbolicInfonce:
    def test_distant_negatives_drive_loss_to_zero(self):
        z = np.zeros(4)
        pos = np.zeros(4)
        far = exp_map_origin(np.array([30.0, 0, 0, 0]), CFG)
        loss, _ = hyperbolic_infonce(z, pos, [far], 0.2, CFG)
        assert loss < 1e-10

    def test_equal_distances_give_log_k_plus_one(self):
        # positive and N negatives all at the same distance: loss = log(1 + N)
        directions = np.eye(4)
        pts = exp_map_origin(directions * 0.7, CFG)
        loss, _ = hyperbolic_infonce(np.zeros(4), pts[0], pts[1:], 0.2, CFG)
        assert loss == pytest.approx(math.log(4), rel=1e-10)

    def test_gradient_matches_finite_differences(self):
        rng = np.random.default_rng(4)
        worst = 0.0
        for _ in range(30):
            z1 = random_points(rng, 1, CFG, max_radius_fraction=0.8)[0]
            z2 = random_points(rng, 1, CFG, max_radius_fraction=0.8)[0]
            negs = random_points(rng, 5, CFG, max_radius_fraction=0.8)
            _, g = hyperbolic_infonce(z1, z2, negs, 0.2, CFG)
            fd = fd_grad(
                lambda x: hyperbolic_infonce(x, z2, negs, 0.2, CFG)[0], z1
            )
            worst = max(worst, rel_err(g, fd))
        assert worst < 1e-6

    def test_batch_matches_single(self):
        rng = np.random.default_rng(5)
        Z1 = random_points(rng, 6, CFG, max_radius_fraction=0.8)
        Z2 = random_points(rng, 6, CFG, max_radius_fraction=0.8)
        negs = random_points(rng, 8, CFG, max_radius_fraction=0.8)
        losses, grads = hyperbolic_infonce_batch(Z1, Z2, negs, 0.2, CFG)
        for i in range(6):
            l, g = hyperbolic_infonce(Z1[i], Z2[i], negs, 0.2, CFG)
            assert losses[i] == pytest.approx(l, rel=1e-12)
            np.testing.assert_allclose(grads[i], g, rtol=1e-10, atol=1e-14)

    def test_local_flatness_matches_euclidean_value(self):
        # Shrunk toward the origin the ball is flat with metric scale 2, so
        # the loss approaches the cosine-free Euclidean-distance softmax.
        rng = np.random.default_rng(6)
        scale = 1e-4 * CFG.radius
        z1 = unit(rng.standard_normal(4)) * scale
        z2 = unit(rng.standard_normal(4)) * scale * 0.5
        negs = np.stack([unit(rng.standard_normal(4)) for _ in range(5)]) * scale
        tau = 0.2 * scale  # temperature on the same scale as the distances
        loss, _ = hyperbolic_infonce(z1, z2, negs, tau, CFG)
        d_pos = 2 * np.linalg.norm(z1 - z2)
        d_negs = 2 * np.linalg.norm(z1 - negs, axis=1)
        logits = -np.concatenate([[d_pos], d_negs]) / tau
        want = float(np.log(np.sum(np.exp(logits - logits.max()))) - (
            logits[0] - logits.max()
        ))
        assert loss == pytest.approx(want, rel=1e-3)

    def test_loss_decreases_as_positive_approaches(self):
        rng = np.random.default_rng(7)
        z2 = exp_map_origin(np.array([0.5, 0.5, 0, 0]), CFG)
        negs = random_points(rng, 6, CFG, max_radius_fraction=0.6)
        losses = []
        for t in np.linspace(0.0, 0.9, 8):
            z1 = t * z2  # slides along the ray toward the positive
            losses.append(hyperbolic_infonce(z1, z2, negs, 0.2, CFG)[0])
        assert losses[-1] < losses[0]


class TestCombinedLoss:
    def test_lambda_zero(self):
        cfg = LossConfig(lam=0.0)
        assert combined_loss(0.42, float("nan"), cfg) == 0.42

    def test_lambda_one_equal_terms(self):
        cfg = LossConfig(lam=1.0)
        assert combined_loss(0.3, 0.3, cfg) == pytest.approx(0.6)

    def test_default_lambda_hand_value(self):
        cfg = LossConfig(lam=0.1)
        assert combined_loss(0.3133, 0.6931, cfg) == pytest.approx(0.38261)

    def test_bad_config_rejected(self):
        with pytest.raises(ValueError):
            LossConfig(temperature=0.0)
        with pytest.raises(ValueError):
            LossConfig(lam=-0.1)
        with pytest.raises(ValueError):
            LossConfig(scene_loss_space="spherical")


class TestNegativeQueue:
    def test_fifo_eviction(self):
        q = NegativeQueue(capacity=4, dim=2)
        for i in range(5):
            v = unit([1.0, float(i + 1)])
            q.push(v)
        negs = q.negatives()
        assert len(q) == 4
        first = unit([1.0, 1.0])
        assert not any(np.allclose(row, first) for row in negs)

    def test_fresh_queue_empty(self):
        q = NegativeQueue(capacity=8, dim=3)
        assert len(q) == 0
        assert q.negatives().shape == (0, 3)

    def test_push_then_read_order_stable(self):
        q = NegativeQueue(capacity=8, dim=2)
        vs = [unit([1.0, i]) for i in range(3)]
        q.push(np.stack(vs))
        np.testing.assert_array_equal(q.negatives(), np.stack(vs))

    def test_wraparound_order_oldest_first(self):
        q = NegativeQueue(capacity=3, dim=2)
        vs = [unit([1.0, i]) for i in range(5)]
        for v in vs:
            q.push(v)
        np.testing.assert_array_equal(q.negatives(), np.stack(vs[2:]))

    def test_dimension_mismatch(self):
        q = NegativeQueue(capacity=4, dim=3)
        with pytest.raises(ValueError):
            q.push(unit([1.0, 2.0]))

    def test_euclidean_queue_rejects_non_unit(self):
        q = NegativeQueue(capacity=4, dim=2)
        with pytest.raises(ValueError):
            q.push(np.array([2.0, 0.0]))

    def test_hyperbolic_queue_rejects_out_of_ball(self):
        q = NegativeQueue(capacity=4, dim=4, kind="hyperbolic", cfg=CFG)
        q.push(np.zeros(4))
        with pytest.raises(ValueError):
            q.push(np.full(4, 10.0))

    def test_state_round_trip(self):
        q = NegativeQueue(capacity=3, dim=2)
        for i in range(5):
            q.push(unit([1.0, i]))
        state = q.state_dict()
        q2 = NegativeQueue(capacity=3, dim=2)
        q2.load_state_dict(state)
        np.testing.assert_array_equal(q.negatives(), q2.negatives())
