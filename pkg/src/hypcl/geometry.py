"""Poincare-ball geometry on a ball of radius r.

The model is the open ball {p in R^n : ||p|| < r} carrying the metric
g(p) = 4 / (1 - ||p||^2/r^2)^2 * g_E, i.e. constant curvature -1/r^2.
Distances use the gyrovector form

    d(p, q) = 2r * atanh(||(-p) (+) q|| / r)

where (+) is the Mobius addition on the radius-r ball.

Everything here is plain float64 numpy, operating on arrays of shape
(..., n) with the point coordinates on the last axis.  All functions are
pure; gradients are analytic (no autodiff anywhere in this package).
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

__all__ = [
    "ATANH_GUARD",
    "BallConfig",
    "BallDomainError",
    "clip_to_ball",
    "clip_to_ball_vjp",
    "conformal_factor",
    "distance",
    "distance_matrix",
    "exp_map",
    "exp_map_origin",
    "exp_map_origin_vjp",
    "grad_distance",
    "grad_exp_map",
    "inverse_conformal_factor",
    "mobius_add",
    "random_points",
]

# atanh argument is clamped to 1 - ATANH_GUARD.  This is a floating-point
# guard against rounding pushing the gyro-norm onto the boundary; it is
# unrelated to the clip margin epsilon, which is a modelling choice.
ATANH_GUARD = 1e-12

# Squared gyro-norm below this is treated as p == q (degenerate gradient).
_DEGENERATE_SQ = 1e-28

_TINY = 1e-300


class BallDomainError(ValueError):
    """An input lies outside the open ball where the operation is defined."""


@dataclass(frozen=True)
class BallConfig:
    """Radius, clip margin and dimension of one Poincare ball.

    The curvature magnitude is c = 1/radius^2; radius sweeps in the
    ablation tooling are indexed by either quantity.
    """

    radius: float = 4.5
    clip_epsilon: float = 1e-5
    dimension: int = 32

    def __post_init__(self):
        if not self.radius > 0:
            raise ValueError(f"radius must be positive, got {self.radius}")
        if not 0 < self.clip_epsilon < self.radius:
            raise ValueError(
                f"clip_epsilon must lie in (0, radius), got {self.clip_epsilon}"
            )
        if self.dimension < 2:
            raise ValueError(f"dimension must be >= 2, got {self.dimension}")

    @property
    def curvature(self) -> float:
        """Curvature magnitude c = 1/r^2."""
        return 1.0 / (self.radius * self.radius)

    @property
    def max_norm(self) -> float:
        """Largest norm clip_to_ball allows: r - epsilon."""
        return self.radius - self.clip_epsilon

    def with_clip_epsilon(self, clip_epsilon: float) -> "BallConfig":
        return replace(self, clip_epsilon=clip_epsilon)


def _as_points(x) -> np.ndarray:
    return np.asarray(x, dtype=np.float64)

def _sq_norm(x: np.ndarray) -> np.ndarray:
    return np.sum(x * x, axis=-1)

def _check_in_ball(x: np.ndarray, cfg: BallConfig, name: str) -> None:
    if np.any(_sq_norm(x) >= cfg.radius * cfg.radius):
        raise BallDomainError(f"{name} has norm >= radius {cfg.radius}")


def _boundary_guard(x: np.ndarray, cfg: BallConfig) -> np.ndarray:
    """Pull rounding overshoots back to norm r*(1 - ATANH_GUARD).

    Only reachable when tanh has already saturated, i.e. the exact result
    is itself within ~1e-14 of the boundary.
    """
    n = np.sqrt(_sq_norm(x))[..., None]
    bound = cfg.radius * (1.0 - ATANH_GUARD)
    scale = np.where(n > bound, bound / np.maximum(n, _TINY), 1.0)
    return x * scale


def random_points(
    rng: np.random.Generator,
    count: int,
    cfg: BallConfig,
    max_radius_fraction: float = 0.9,
) -> np.ndarray:
    """Points drawn uniformly from the sub-ball of radius fraction*r.

    Test/check helper; uniform in Euclidean volume, not hyperbolic volume.
    """
    d = rng.standard_normal((count, cfg.dimension))
    d /= np.linalg.norm(d, axis=-1, keepdims=True)
    radii = cfg.radius * max_radius_fraction * rng.random((count, 1)) ** (
        1.0 / cfg.dimension
    )
    return d * radii


def mobius_add(p, q, cfg: BallConfig) -> np.ndarray:
    """Mobius addition p (+) q on the radius-r ball.

    p (+) q = ((1 + 2<p,q>/r^2 + ||q||^2/r^2) p + (1 - ||p||^2/r^2) q)
              / (1 + 2<p,q>/r^2 + ||p||^2 ||q||^2/r^4)

    Reduces to p + q as r -> inf.  Raises BallDomainError if either
    argument has norm >= r.
    """
    p = _as_points(p)
    q = _as_points(q)
    _check_in_ball(p, cfg, "p")
    _check_in_ball(q, cfg, "q")
    c = cfg.curvature
    a = _sq_norm(p)[..., None]
    b = _sq_norm(q)[..., None]
    t = np.sum(p * q, axis=-1)[..., None]
    num = (1.0 + 2.0 * c * t + c * b) * p + (1.0 - c * a) * q
    den = 1.0 + 2.0 * c * t + c * c * a * b
    return num / den


def distance(p, q, cfg: BallConfig) -> np.ndarray:
    """Riemannian distance d(p, q) = 2r * atanh(||(-p) (+) q|| / r)."""
    p = _as_points(p)
    q = _as_points(q)
    gyro = mobius_add(-p, q, cfg)
    s = np.sqrt(_sq_norm(gyro)) / cfg.radius
    s = np.minimum(s, 1.0 - ATANH_GUARD)
    return 2.0 * cfg.radius * np.arctanh(s)


def distance_matrix(P, Q, cfg: BallConfig) -> np.ndarray:
    """All-pairs distances between rows of P (B, n) and Q (K, n).

    Uses the gyro-norm identity

        ||(-p) (+) q||^2 = ||p - q||^2 / (1 - 2<p,q>/r^2 + ||p||^2||q||^2/r^4)

    so the whole matrix falls out of one gemm.  Agrees with `distance`
    to rounding; the subtractive numerator costs absolute accuracy only
    for pairs closer than ~1e-7 * r, which the losses never resolve.
    """
    P = _as_points(P)
    Q = _as_points(Q)
    _check_in_ball(P, cfg, "P")
    _check_in_ball(Q, cfg, "Q")
    c = cfg.curvature
    a = _sq_norm(P)[:, None]
    b = _sq_norm(Q)[None, :]
    t = P @ Q.T
    num = np.maximum(a - 2.0 * t + b, 0.0)
    den = 1.0 - 2.0 * c * t + c * c * a * b
    s = np.sqrt(c * num / den)
    s = np.minimum(s, 1.0 - ATANH_GUARD)
    return 2.0 * cfg.radius * np.arctanh(s)


def exp_map(p, v, cfg: BallConfig) -> np.ndarray:
    """Exponential map: exp_p(v) = p (+) (tanh(r||v|| / (r^2 - ||p||^2)) * r v/||v||).

    exp_p(0) = p.  Output is strictly inside the ball for finite v.
    """
    p = _as_points(p)
    v = _as_points(v)
    _check_in_ball(p, cfg, "p")
    r = cfg.radius
    a = _sq_norm(p)[..., None]
    n = np.sqrt(_sq_norm(v))[..., None]
    theta = r * n / (r * r - a)
    # tanh saturates to exactly 1.0 in doubles for theta > ~19, which would
    # park the intermediate on the boundary; keep it one step inside.
    tanh_t = np.minimum(np.tanh(theta), 1.0 - 1e-15)
    # kappa = r*tanh(theta)/||v||, with the ||v|| -> 0 limit r^2/(r^2 - a).
    kappa = np.where(
        n > 0.0,
        r * tanh_t / np.maximum(n, _TINY),
        r * r / (r * r - a),
    )
    return _boundary_guard(mobius_add(p, kappa * v, cfg), cfg)


def exp_map_origin(v, cfg: BallConfig) -> np.ndarray:
    """exp_0(v) = r * tanh(||v||/r) * v/||v||; the fast base-point-0 path."""
    v = _as_points(v)
    r = cfg.radius
    n = np.sqrt(_sq_norm(v))[..., None]
    tanh_t = np.minimum(np.tanh(n / r), 1.0 - 1e-15)
    kappa = np.where(n > 0.0, r * tanh_t / np.maximum(n, _TINY), 1.0)
    return kappa * v


def clip_to_ball(x, cfg: BallConfig) -> np.ndarray:
    """Rescale any vector with ||x|| > r - eps to norm exactly r - eps.

    Direction is preserved; vectors already inside the margin (and the
    zero vector) pass through unchanged.
    """
    x = _as_points(x)
    n = np.sqrt(_sq_norm(x))[..., None]
    bound = cfg.max_norm
    scale = np.where(n > bound, bound / np.maximum(n, _TINY), 1.0)
    return x * scale


def conformal_factor(p, cfg: BallConfig) -> np.ndarray:
    """Metric coefficient g(p) = 4 / (1 - ||p||^2/r^2)^2; >= 4, -> inf at the boundary."""
    p = _as_points(p)
    _check_in_ball(p, cfg, "p")
    r = cfg.radius
    u = 1.0 - _sq_norm(p) / (r * r)
    return 4.0 / (u * u)


def inverse_conformal_factor(p, cfg: BallConfig) -> np.ndarray:
    """g(p)^-1 = (1 - ||p||^2/r^2)^2 / 4, the Riemannian gradient rescaling.

    For ||p|| <= r - eps this is bounded below by roughly eps^2/r^2.
    Divides by r*r rather than multiplying by the cached curvature: the
    subtraction from 1 amplifies that last ulp a billionfold near the
    clip boundary.
    """
    p = _as_points(p)
    _check_in_ball(p, cfg, "p")
    r = cfg.radius
    u = 1.0 - _sq_norm(p) / (r * r)
    return u * u / 4.0


def _distance_coefficients(a_t, b_t, t_t, cfg: BallConfig):
    """Shared scalar chain rule for the distance gradient.

    Arguments are ||p||^2/r^2, ||q||^2/r^2 and <p,q>/r^2 (any broadcastable
    shapes).  Returns (alpha, beta, degenerate) such that

        grad_p d = alpha * p + beta * q

    and the gradient with p and q swapped follows by symmetry of the
    same scalars.  `degenerate` marks p == q, where d is not smooth;
    alpha and beta are forced to 0 there.
    """
    r = cfg.radius
    num = a_t - 2.0 * t_t + b_t          # squared gyro-norm, numerator
    den = 1.0 - 2.0 * t_t + a_t * b_t
    degenerate = num <= _DEGENERATE_SQ
    num = np.where(degenerate, 1.0, num)
    s_sq = np.minimum(num / den, (1.0 - ATANH_GUARD) ** 2)
    s = np.sqrt(s_sq)
    # d = 2r atanh(s), s^2 = num/den:
    #   dd/ds = 2r/(1-s^2), ds/dnum = 1/(2 s den), ds/dden = -s/(2 den);
    # dnum/da=1, dnum/dt=-2; dden/da=b, dden/db=a, dden/dt=-2.
    live = np.where(degenerate, 0.0, r / ((1.0 - s_sq) * den))  # dd_ds / (2 den)
    c_num = live / s                     # dd_ds * ds_dnum
    c_den = live * s                     # -dd_ds * ds_dden
    inv_r2 = 1.0 / (r * r)
    alpha = (c_num - c_den * b_t) * (2.0 * inv_r2)
    alpha_q = (c_num - c_den * a_t) * (2.0 * inv_r2)
    beta = (c_den - c_num) * (2.0 * inv_r2)
    return alpha, beta, alpha_q, degenerate


def grad_distance(p, q, cfg: BallConfig):
    """Euclidean gradients of d(p, q) w.r.t. both arguments.

    Returns (grad_p, grad_q, degenerate).  At p == q the distance has
    a cone point; both gradients are returned as zero with the
    degenerate flag set (the squared distance still has gradient zero
    there, so downstream chain rules stay consistent).
    """
    p = _as_points(p)
    q = _as_points(q)
    _check_in_ball(p, cfg, "p")
    _check_in_ball(q, cfg, "q")
    inv_r2 = cfg.curvature
    a_t = _sq_norm(p) * inv_r2
    b_t = _sq_norm(q) * inv_r2
    t_t = np.sum(p * q, axis=-1) * inv_r2
    alpha_p, beta, alpha_q, degenerate = _distance_coefficients(a_t, b_t, t_t, cfg)
    grad_p = alpha_p[..., None] * p + beta[..., None] * q
    grad_q = alpha_q[..., None] * q + beta[..., None] * p
    return grad_p, grad_q, degenerate


def _mobius_add_vjp(p, q, cfg: BallConfig):
    """mobius_add plus its VJP: vjp(u) -> (u_p, u_q)."""
    c = cfg.curvature
    a = _sq_norm(p)[..., None]
    b = _sq_norm(q)[..., None]
    t = np.sum(p * q, axis=-1)[..., None]
    A = 1.0 + 2.0 * c * t + c * b
    B = 1.0 - c * a
    D = 1.0 + 2.0 * c * t + c * c * a * b
    m = (A * p + B * q) / D

    def vjp(u):
        u = _as_points(u)
        up = np.sum(u * p, axis=-1)[..., None]
        uq = np.sum(u * q, axis=-1)[..., None]
        um = np.sum(u * m, axis=-1)[..., None]
        u_p = (2.0 * c * up * q + A * u - 2.0 * c * uq * p) / D \
            - um * (2.0 * c * q + 2.0 * c * c * b * p) / D
        u_q = (2.0 * c * up * (p + q) + B * u) / D \
            - um * (2.0 * c * p + 2.0 * c * c * a * q) / D
        return u_p, u_q

    return m, vjp


def grad_exp_map(p, v, cfg: BallConfig):
    """exp_p(v) together with its VJP: vjp(u) -> (u_p, u_v).

    This is the piece the encoder backward chains through when the
    hyperbolic branch maps features into the ball.
    """
    p = _as_points(p)
    v = _as_points(v)
    _check_in_ball(p, cfg, "p")
    r = cfg.radius
    a = _sq_norm(p)[..., None]
    n = np.sqrt(_sq_norm(v))[..., None]
    denom = r * r - a
    theta = r * n / denom
    tanh_t = np.minimum(np.tanh(theta), 1.0 - 1e-15)
    small = n < 1e-15
    n_safe = np.maximum(n, 1e-150)
    kappa = np.where(small, r * r / denom, r * tanh_t / n_safe)
    w = kappa * v
    point, mob_vjp = _mobius_add_vjp(p, w, cfg)

    # dkappa/dn = r * ((1 - tanh^2) * (r/denom) * n - tanh) / n^2 ; -> 0 as n -> 0.
    dkappa_dn = np.where(
        small,
        0.0,
        r * ((1.0 - tanh_t * tanh_t) * (r / denom) * n - tanh_t) / (n_safe * n_safe),
    )

    def vjp(u):
        u_p_mob, u_w = mob_vjp(u)
        uwv = np.sum(u_w * v, axis=-1)[..., None]
        u_v = kappa * u_w + dkappa_dn * (uwv / n_safe) * v
        u_v = np.where(small, kappa * u_w, u_v)
        # theta depends on p through ||p||^2.
        u_p_theta = 2.0 * r * r * uwv * (1.0 - tanh_t * tanh_t) / (denom * denom) * p
        u_p = u_p_mob + np.where(small, 0.0, u_p_theta)
        return u_p, u_v

    return point, vjp


def exp_map_origin_vjp(v, cfg: BallConfig):
    """exp_0(v) together with its VJP: vjp(u) -> u_v."""
    v = _as_points(v)
    r = cfg.radius
    n = np.sqrt(_sq_norm(v))[..., None]
    small = n < 1e-15
    n_safe = np.maximum(n, 1e-150)
    tanh_t = np.minimum(np.tanh(n / r), 1.0 - 1e-15)
    kappa = np.where(small, 1.0, r * tanh_t / n_safe)
    point = kappa * v
    sech_sq = 1.0 - tanh_t * tanh_t
    dkappa_dn = np.where(small, 0.0, (sech_sq - kappa) / n_safe)

    def vjp(u):
        u = _as_points(u)
        uv = np.sum(u * v, axis=-1)[..., None]
        return kappa * u + dkappa_dn * (uv / n_safe) * v

    return point, vjp


def clip_to_ball_vjp(x, cfg: BallConfig):
    """clip_to_ball plus its VJP: vjp(u) -> u_x.

    Where the clip is active the map is (r-eps) * x/||x||, whose Jacobian
    kills the radial direction and scales the tangential ones by
    (r-eps)/||x||.  On the clip boundary itself the right-limit Jacobian
    is used.
    """
    x = _as_points(x)
    n = np.sqrt(_sq_norm(x))[..., None]
    bound = cfg.max_norm
    clipped_mask = n > bound
    n_safe = np.maximum(n, 1e-150)
    scale = np.where(clipped_mask, bound / n_safe, 1.0)
    clipped = x * scale

    def vjp(u):
        u = _as_points(u)
        ux = np.sum(u * x, axis=-1)[..., None]
        tangential = u - (ux / (n_safe * n_safe)) * x
        return np.where(clipped_mask, scale * tangential, u)

    return clipped, vjp
