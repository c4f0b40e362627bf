"""Ball geometry: closed-form values, gyrogroup identities, invariants."""

import math

import numpy as np
import pytest

from hypcl.geometry import (
    BallConfig,
    BallDomainError,
    clip_to_ball,
    conformal_factor,
    distance,
    distance_matrix,
    exp_map,
    exp_map_origin,
    inverse_conformal_factor,
    mobius_add,
    random_points,
)

UNIT = BallConfig(radius=1.0, clip_epsilon=1e-6, dimension=2)
DEFAULT = BallConfig(radius=4.5, clip_epsilon=1e-5, dimension=8)


class TestBallConfig:
    def test_curvature_is_inverse_square_radius(self):
        assert BallConfig(radius=4.5).curvature == pytest.approx(1 / 4.5**2)
        assert BallConfig(radius=1.0).curvature == 1.0

    @pytest.mark.parametrize(
        "kwargs",
        [
            {"radius": 0.0},
            {"radius": -1.0},
            {"clip_epsilon": 0.0},
            {"clip_epsilon": 5.0, "radius": 4.5},
            {"dimension": 1},
        ],
    )
    def test_rejects_bad_fields(self, kwargs):
        with pytest.raises(ValueError):
            BallConfig(**kwargs)


class TestMobiusAdd:
    def test_left_identity(self):
        rng = np.random.default_rng(7)
        q = random_points(rng, 1000, DEFAULT, max_radius_fraction=0.999)
        out = mobius_add(np.zeros_like(q), q, DEFAULT)
        np.testing.assert_allclose(out, q, atol=1e-9)

    def test_left_inverse(self):
        rng = np.random.default_rng(8)
        p = random_points(rng, 1000, DEFAULT, max_radius_fraction=0.999)
        out = mobius_add(-p, p, DEFAULT)
        np.testing.assert_allclose(out, 0.0, atol=1e-9)

    def test_collinear_hand_value(self):
        # (0.3 + 0.4) / (1 + 0.3*0.4) = 0.625 on the x-axis, unit ball.
        out = mobius_add([0.3, 0.0], [0.4, 0.0], UNIT)
        np.testing.assert_allclose(out, [0.625, 0.0], rtol=1e-14)

    def test_result_stays_in_ball(self):
        rng = np.random.default_rng(9)
        p = random_points(rng, 500, DEFAULT, max_radius_fraction=0.9999)
        q = random_points(rng, 500, DEFAULT, max_radius_fraction=0.9999)
        out = mobius_add(p, q, DEFAULT)
        assert np.all(np.linalg.norm(out, axis=-1) < DEFAULT.radius)

    def test_large_radius_approaches_vector_addition(self):
        big = BallConfig(radius=1e8, clip_epsilon=1e-3, dimension=2)
        out = mobius_add([0.3, 0.1], [0.4, -0.2], big)
        np.testing.assert_allclose(out, [0.7, -0.1], atol=1e-12)

    def test_rejects_out_of_ball(self):
        with pytest.raises(BallDomainError):
            mobius_add([1.1, 0.0], [0.0, 0.0], UNIT)
        with pytest.raises(BallDomainError):
            mobius_add([0.0, 0.0], [0.0, 1.0], UNIT)


class TestDistance:
    def test_zero_iff_equal(self):
        rng = np.random.default_rng(10)
        p = random_points(rng, 1000, DEFAULT)
        np.testing.assert_allclose(distance(p, p, DEFAULT), 0.0, atol=1e-9)

    def test_symmetry(self):
        rng = np.random.default_rng(11)
        p = random_points(rng, 1000, DEFAULT, max_radius_fraction=0.999)
        q = random_points(rng, 1000, DEFAULT, max_radius_fraction=0.999)
        np.testing.assert_allclose(
            distance(p, q, DEFAULT), distance(q, p, DEFAULT), rtol=0, atol=1e-9
        )

    def test_positive_off_diagonal(self):
        rng = np.random.default_rng(12)
        p = random_points(rng, 500, DEFAULT)
        q = random_points(rng, 500, DEFAULT)
        d = distance(p, q, DEFAULT)
        moved = np.linalg.norm(p - q, axis=-1) > 1e-9
        assert np.all(d[moved] > 0)

    def test_origin_closed_form(self):
        # d(0, q) = 2r atanh(||q||/r); at r=1, ||q||=0.5 this is ln 3.
        d = distance([0.0, 0.0], [0.5, 0.0], UNIT)
        assert d == pytest.approx(math.log(3.0), rel=1e-12)
        rng = np.random.default_rng(13)
        q = random_points(rng, 200, DEFAULT, max_radius_fraction=0.999)
        want = 2 * DEFAULT.radius * np.arctanh(
            np.linalg.norm(q, axis=-1) / DEFAULT.radius
        )
        np.testing.assert_allclose(
            distance(np.zeros_like(q), q, DEFAULT), want, rtol=1e-12
        )

    def test_through_origin_ratio_below_one_and_growing(self):
        # Perpendicular points of equal norm: the detour through the origin
        # overshoots less and less as the norms grow toward the boundary.
        def ratio(s):
            p = np.array([s, 0.0])
            q = np.array([0.0, s])
            return distance(p, q, UNIT) / (
                distance(p, [0.0, 0.0], UNIT) + distance([0.0, 0.0], q, UNIT)
            )

        assert ratio(0.9) < 1.0
        assert ratio(0.9) > ratio(0.5)

    def test_small_norm_locally_euclidean(self):
        rng = np.random.default_rng(14)
        scale = 1e-4 * DEFAULT.radius
        p = rng.standard_normal((500, DEFAULT.dimension))
        q = rng.standard_normal((500, DEFAULT.dimension))
        p *= scale / np.linalg.norm(p, axis=-1, keepdims=True)
        q *= scale * rng.random((500, 1)) / np.linalg.norm(q, axis=-1, keepdims=True)
        d = distance(p, q, DEFAULT)
        flat = 2.0 * np.linalg.norm(p - q, axis=-1)
        err = np.abs(d - flat) / np.maximum(flat, 1e-12)
        assert np.max(err) < 1e-3

    def test_matrix_agrees_with_pairwise(self):
        rng = np.random.default_rng(15)
        P = random_points(rng, 40, DEFAULT, max_radius_fraction=0.99)
        Q = random_points(rng, 60, DEFAULT, max_radius_fraction=0.99)
        want = np.array([[distance(p, q, DEFAULT) for q in Q] for p in P])
        np.testing.assert_allclose(distance_matrix(P, Q, DEFAULT), want, atol=1e-9)


class TestExpMap:
    def test_zero_tangent_returns_base(self):
        rng = np.random.default_rng(16)
        p = random_points(rng, 300, DEFAULT)
        out = exp_map(p, np.zeros_like(p), DEFAULT)
        np.testing.assert_allclose(out, p, rtol=0, atol=1e-15)

    def test_origin_closed_form(self):
        out = exp_map([0.0, 0.0], [0.25, 0.0], UNIT)
        np.testing.assert_allclose(out, [math.tanh(0.25), 0.0], rtol=1e-14)
        np.testing.assert_allclose(
            exp_map_origin([0.25, 0.0], UNIT), [math.tanh(0.25), 0.0], rtol=1e-14
        )

    def test_output_strictly_inside_ball(self):
        rng = np.random.default_rng(17)
        p = random_points(rng, 300, DEFAULT, max_radius_fraction=0.99)
        v = rng.standard_normal(p.shape) * 50.0
        out = exp_map(p, v, DEFAULT)
        assert np.all(np.linalg.norm(out, axis=-1) < DEFAULT.radius)

    def test_distance_monotone_in_tangent_norm(self):
        rng = np.random.default_rng(18)
        for _ in range(10):
            p = random_points(rng, 1, DEFAULT, max_radius_fraction=0.5)[0]
            direction = rng.standard_normal(DEFAULT.dimension)
            direction /= np.linalg.norm(direction)
            sizes = np.linspace(0.05, 1.5, 12)
            dists = [
                float(distance(p, exp_map(p, s * direction, DEFAULT), DEFAULT))
                for s in sizes
            ]
            assert np.all(np.diff(dists) > 0)

    def test_geodesic_distance_matches_metric_tangent_norm(self):
        # d(p, exp_p(v)) = lambda_p ||v|| with lambda_p = 2/(1 - ||p||^2/r^2).
        rng = np.random.default_rng(19)
        p = random_points(rng, 50, DEFAULT, max_radius_fraction=0.6)
        v = 0.1 * rng.standard_normal(p.shape)
        lam = 2.0 / (1.0 - np.sum(p * p, axis=-1) * DEFAULT.curvature)
        want = lam * np.linalg.norm(v, axis=-1)
        got = distance(p, exp_map(p, v, DEFAULT), DEFAULT)
        np.testing.assert_allclose(got, want, rtol=1e-9)


class TestClipToBall:
    def test_inside_unchanged(self):
        x = np.array([0.1, 0.0])
        np.testing.assert_array_equal(clip_to_ball(x, DEFAULT), x)

    def test_outside_rescaled_to_margin(self):
        out = clip_to_ball([9.0, 0.0], DEFAULT)
        np.testing.assert_allclose(out, [4.5 - 1e-5, 0.0], rtol=1e-15)

    def test_zero_unchanged(self):
        np.testing.assert_array_equal(
            clip_to_ball(np.zeros(8), DEFAULT), np.zeros(8)
        )

    def test_direction_preserved_and_norm_exact(self):
        rng = np.random.default_rng(20)
        x = rng.standard_normal((200, DEFAULT.dimension)) * 20.0
        out = clip_to_ball(x, DEFAULT)
        norms = np.linalg.norm(out, axis=-1)
        assert np.all(norms <= DEFAULT.max_norm * (1 + 1e-15))
        big = np.linalg.norm(x, axis=-1) > DEFAULT.max_norm
        np.testing.assert_allclose(norms[big], DEFAULT.max_norm, rtol=1e-14)
        cross = np.cross(x[big][:, :2], out[big][:, :2]) if DEFAULT.dimension == 2 else None
        cos = np.sum(x[big] * out[big], axis=-1) / (
            np.linalg.norm(x[big], axis=-1) * norms[big]
        )
        np.testing.assert_allclose(cos, 1.0, rtol=1e-12)


class TestConformalFactor:
    def test_at_origin(self):
        assert conformal_factor(np.zeros(2), UNIT) == pytest.approx(4.0)

    def test_at_r_over_sqrt2(self):
        p = np.array([DEFAULT.radius / math.sqrt(2), 0, 0, 0, 0, 0, 0, 0])
        assert conformal_factor(p, DEFAULT) == pytest.approx(16.0, rel=1e-12)

    def test_inverse_near_margin_is_order_eps_squared(self):
        r, eps = DEFAULT.radius, DEFAULT.clip_epsilon
        p = np.zeros(8)
        p[0] = r - eps
        exact = (1 - (r - eps) ** 2 / r**2) ** 2 / 4.0
        got = float(inverse_conformal_factor(p, DEFAULT))
        assert got == pytest.approx(exact, rel=1e-12)
        # leading order eps^2/r^2 ~ 4.94e-12
        assert got == pytest.approx(eps**2 / r**2, rel=1e-2)

    def test_domain_error_outside(self):
        with pytest.raises(BallDomainError):
            conformal_factor([1.0, 0.0], UNIT)


class TestThroughOriginRatioGrid:
    def test_strictly_increasing_over_norm_grid(self):
        fractions = [0.1, 0.5, 0.9, 0.99, 0.999]
        ratios = []
        for f in fractions:
            s = f * DEFAULT.radius
            p = np.zeros(DEFAULT.dimension)
            q = np.zeros(DEFAULT.dimension)
            p[0] = s
            q[1] = s
            o = np.zeros(DEFAULT.dimension)
            ratios.append(
                float(
                    distance(p, q, DEFAULT)
                    / (distance(p, o, DEFAULT) + distance(o, q, DEFAULT))
                )
            )
        assert all(b > a for a, b in zip(ratios, ratios[1:]))
        assert ratios[-1] < 1.0
