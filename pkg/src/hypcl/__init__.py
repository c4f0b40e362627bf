"""Hyperbolic contrastive learning over scene-object hierarchies.

A small, fully self-contained stack: Poincare-ball geometry with analytic
gradients, an object-centric scene hierarchy with paired-crop sampling,
a feed-forward encoder with a momentum copy, dual Euclidean/hyperbolic
InfoNCE objectives with FIFO negative queues, Riemannian-scaled SGD, a
deterministic trainer, and zero-shot evaluations (norm ranking, NDCG,
out-of-context detection, hyperbolic prototypes, tree distortion).
"""

__version__ = "0.1.0"

from .geometry import BallConfig, BallDomainError

__all__ = ["BallConfig", "BallDomainError", "__version__"]
