"""Contrastive losses for both branches and the negative-sample queues.

The Euclidean loss is the usual temperature-scaled softmax cross-entropy
over inner products of unit vectors.  The hyperbolic loss replaces the
inner-product logits with negative ball distances, -d(z1, .)/tau.  In
both cases only the anchor z1 receives a gradient; positives and
negatives come from the momentum encoder or a queue and are detached.

Queues are fixed-capacity FIFO ring buffers storing momentum-encoder
outputs from previous batches (unit vectors for the Euclidean queue,
ball points for the hyperbolic one).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .geometry import BallConfig, _distance_coefficients, _sq_norm

__all__ = [
    "LossConfig",
    "NegativeQueue",
    "combined_loss",
    "euclidean_infonce",
    "euclidean_infonce_batch",
    "hyperbolic_infonce",
    "hyperbolic_infonce_batch",
]


@dataclass(frozen=True)
class LossConfig:
    temperature: float = 0.2
    lam: float = 0.1
    scene_loss_space: str = "hyperbolic"

    def __post_init__(self):
        if not self.temperature > 0:
            raise ValueError("temperature must be positive")
        if self.lam < 0:
            raise ValueError("lambda must be nonnegative")
        if self.scene_loss_space not in ("hyperbolic", "euclidean"):
            raise ValueError(f"unknown scene_loss_space {self.scene_loss_space!r}")


def combined_loss(l_euc: float, l_hyp: float, cfg: LossConfig) -> float:
    """L = L_euc + lambda * L_hyp; lambda = 0 disables the scene branch exactly."""
    if cfg.lam == 0.0:
        return float(l_euc)
    return float(l_euc + cfg.lam * l_hyp)


def _softmax_rows(logits: np.ndarray):
    mx = np.max(logits, axis=-1, keepdims=True)
    ex = np.exp(logits - mx)
    total = np.sum(ex, axis=-1, keepdims=True)
    # loss = logsumexp - positive logit; positives are column 0 by convention
    losses = (np.log(total) + mx)[..., 0] - logits[..., 0]
    return ex / total, losses


def _check_unit(x, name):
    n = _sq_norm(np.asarray(x, dtype=np.float64))
    if np.any(np.abs(n - 1.0) > 1e-8):
        raise ValueError(f"{name} must be unit-norm")


def euclidean_infonce_batch(z1, z2, negatives, temperature: float):
    """Batched InfoNCE on the sphere.

    z1, z2: (B, d) anchors and positives; negatives: (K, d) shared keys.
    Returns (losses (B,), grad_z1 (B, d)); gradients flow to z1 only.
    """
    z1 = np.atleast_2d(np.asarray(z1, dtype=np.float64))
    z2 = np.atleast_2d(np.asarray(z2, dtype=np.float64))
    negatives = np.asarray(negatives, dtype=np.float64)
    if negatives.ndim != 2 or negatives.shape[0] == 0:
        raise ValueError("at least one negative is required")
    _check_unit(z1, "z1")
    _check_unit(z2, "z2")
    _check_unit(negatives, "negatives")
    tau = float(temperature)
    pos = np.sum(z1 * z2, axis=-1, keepdims=True)
    neg = z1 @ negatives.T
    logits = np.concatenate([pos, neg], axis=1) / tau
    probs, losses = _softmax_rows(logits)
    coeff = probs.copy()
    coeff[:, 0] -= 1.0
    grad = (coeff[:, :1] * z2 + coeff[:, 1:] @ negatives) / tau
    return losses, grad


def euclidean_infonce(z1, z2, negatives, temperature: float):
    """Single-anchor form of euclidean_infonce_batch."""
    losses, grad = euclidean_infonce_batch(
        z1, z2, np.asarray(negatives, dtype=np.float64), temperature
    )
    return float(losses[0]), grad[0]


def hyperbolic_infonce_batch(z1, z2, negatives, temperature: float, cfg: BallConfig,
                             extra_negatives=None):
    """Batched InfoNCE with logits -d(z1, .)/tau on the ball.

    z1, z2: (B, d) in-ball anchors and positives; negatives: (K, d) ball
    points shared across the batch; extra_negatives: optional (B, M, d)
    per-anchor keys (in-scene negatives; pad rows with far-away points,
    whose softmax weight underflows to zero).  Returns (losses (B,),
    grad_z1 (B, d)); the gradient chains through the analytic distance
    gradient.
    """
    z1 = np.atleast_2d(np.asarray(z1, dtype=np.float64))
    z2 = np.atleast_2d(np.asarray(z2, dtype=np.float64))
    negatives = np.asarray(negatives, dtype=np.float64)
    if negatives.ndim != 2 or negatives.shape[0] == 0:
        raise ValueError("at least one negative is required")
    tau = float(temperature)

    # Column 0 holds the positive key, then per-anchor extras, then the
    # shared negatives; all distance scalars come from gemms, never a
    # (B, K, d) broadcast.
    inv_r2 = cfg.curvature
    b_cols = [_sq_norm(z2)[:, None]]
    t_cols = [np.sum(z1 * z2, axis=-1)[:, None]]
    n_extra = 0
    if extra_negatives is not None:
        extra_negatives = np.asarray(extra_negatives, dtype=np.float64)
        n_extra = extra_negatives.shape[1]
    if n_extra:
        b_cols.append(_sq_norm(extra_negatives))
        t_cols.append(np.einsum("bd,bmd->bm", z1, extra_negatives))
    b_cols.append(np.broadcast_to(_sq_norm(negatives)[None, :],
                                  (z1.shape[0], negatives.shape[0])))
    t_cols.append(z1 @ negatives.T)

    a_t = _sq_norm(z1)[:, None] * inv_r2                           # (B, 1)
    b_t = np.concatenate(b_cols, axis=1) * inv_r2                  # (B, 1+M+K)
    t_t = np.concatenate(t_cols, axis=1) * inv_r2

    num = np.maximum(a_t - 2.0 * t_t + b_t, 0.0)
    den = 1.0 - 2.0 * t_t + a_t * b_t
    s = np.minimum(np.sqrt(num / den), 1.0 - 1e-12)
    d = 2.0 * cfg.radius * np.arctanh(s)                           # (B, 1+M+K)

    logits = -d / tau
    probs, losses = _softmax_rows(logits)
    coeff = probs.copy()
    coeff[:, 0] -= 1.0
    gamma = -coeff / tau                       # dL/dz1 = sum_k gamma_k grad_z1 d_k

    alpha, beta, _, _ = _distance_coefficients(a_t, b_t, t_t, cfg)
    gb = gamma * beta
    grad = (
        np.sum(gamma * alpha, axis=1)[:, None] * z1
        + gb[:, :1] * z2
        + gb[:, 1 + n_extra:] @ negatives
    )
    if n_extra:
        grad += np.einsum("bm,bmd->bd", gb[:, 1:1 + n_extra], extra_negatives)
    return losses, grad


def hyperbolic_infonce(z1, z2, negatives, temperature: float, cfg: BallConfig):
    """Single-anchor form of hyperbolic_infonce_batch."""
    losses, grad = hyperbolic_infonce_batch(
        z1, z2, np.asarray(negatives, dtype=np.float64), temperature, cfg
    )
    return float(losses[0]), grad[0]


class NegativeQueue:
    """Fixed-capacity FIFO buffer of detached key vectors.

    kind="euclidean" enforces unit norms on push; kind="hyperbolic"
    enforces in-ball points (needs cfg).  negatives() returns entries
    oldest-first, so reads are order-stable.
    """

    def __init__(self, capacity: int, dim: int, kind: str = "euclidean",
                 cfg: BallConfig | None = None):
        if capacity < 1:
            raise ValueError("capacity must be positive")
        if kind not in ("euclidean", "hyperbolic"):
            raise ValueError(f"unknown queue kind {kind!r}")
        if kind == "hyperbolic" and cfg is None:
            raise ValueError("hyperbolic queue needs a BallConfig")
        self.capacity = capacity
        self.dim = dim
        self.kind = kind
        self.cfg = cfg
        self.buffer = np.zeros((capacity, dim))
        self.cursor = 0
        self.count = 0

    def __len__(self) -> int:
        return self.count

    def push(self, batch) -> None:
        batch = np.atleast_2d(np.asarray(batch, dtype=np.float64))
        if batch.shape[1] != self.dim:
            raise ValueError(
                f"queue dim {self.dim} does not match pushed dim {batch.shape[1]}"
            )
        if self.kind == "euclidean":
            _check_unit(batch, "euclidean queue entries")
        else:
            if np.any(_sq_norm(batch) >= self.cfg.radius**2):
                raise ValueError("hyperbolic queue entries must be in-ball")
        for row in batch:
            self.buffer[self.cursor] = row
            self.cursor = (self.cursor + 1) % self.capacity
            self.count = min(self.count + 1, self.capacity)

    def negatives(self) -> np.ndarray:
        """Stored entries, oldest first; empty (0, dim) when cold."""
        if self.count < self.capacity:
            return self.buffer[: self.count].copy()
        return np.concatenate(
            [self.buffer[self.cursor:], self.buffer[: self.cursor]], axis=0
        )

    def state_dict(self) -> dict:
        return {
            "buffer": self.buffer.copy(),
            "cursor": self.cursor,
            "count": self.count,
        }

    def load_state_dict(self, state: dict) -> None:
        buf = np.asarray(state["buffer"], dtype=np.float64)
        if buf.shape != self.buffer.shape:
            raise ValueError("queue state shape mismatch")
        self.buffer = buf.copy()
        self.cursor = int(state["cursor"])
        self.count = int(state["count"])
