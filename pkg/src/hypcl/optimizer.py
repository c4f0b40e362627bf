"""SGD and the Riemannian-scaled variant used at ball points.

The model parameters live in Euclidean space; the only Riemannian step
is a rescaling of the gradient where it passes through a point of the
ball: multiply by the inverse metric coefficient g(p)^-1 before the
ordinary descent step.  Near the clip boundary ||p|| = r - eps the
factor shrinks to about eps^2/r^2, which is what makes overly strong
hyperbolic gradients stall instead of diverge.
"""

from __future__ import annotations

import numpy as np

from .geometry import BallConfig, inverse_conformal_factor

__all__ = ["rsgd_scale", "rsgd_epsilon_override", "sgd_step"]


def sgd_step(params, grads, lr: float, weight_decay: float = 0.0):
    """In-place p <- p - lr * (g + wd * p) over a list of arrays.

    Returns the mutated list for chaining.  Momentum lives with the
    caller (see trainer.SgdState) so this stays a pure recurrence.
    """
    for p, g in zip(params, grads):
        if weight_decay != 0.0:
            g = g + weight_decay * p
        p -= lr * g
    return params


def rsgd_scale(grad, p, cfg: BallConfig) -> np.ndarray:
    """Scale a gradient at ball point p by g(p)^-1 = (1 - ||p||^2/r^2)^2 / 4.

    Broadcasts over leading axes: grad (..., n) against points (..., n).
    """
    grad = np.asarray(grad, dtype=np.float64)
    return grad * inverse_conformal_factor(p, cfg)[..., None]


def rsgd_epsilon_override(cfg: BallConfig, clip_epsilon: float) -> BallConfig:
    """Config with the clip margin replaced (the SGD-ablation knob).

    The plain-SGD ablation runs with a much larger margin (1e-1 instead
    of 1e-5) so that skipping the Riemannian rescaling stays numerically
    safe.
    """
    if not 0.0 < clip_epsilon < cfg.radius:
        raise ValueError(
            f"clip_epsilon must lie in (0, radius={cfg.radius}), got {clip_epsilon}"
        )
    return cfg.with_clip_epsilon(clip_epsilon)
