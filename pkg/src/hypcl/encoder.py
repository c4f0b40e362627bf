"""Feed-forward encoder with exact manual backprop and a momentum copy.

A small relu MLP trunk plus a linear projection head stands in for the
usual convolutional backbone.  The head is either shared between the
Euclidean and hyperbolic branches or split into two heads of identical
shape.  Forward returns the raw embedding (pre-normalization,
pre-ball-projection) together with the activation cache that backward
consumes; backward produces exact gradients for every weight, bias and
the input.

The momentum copy never sees gradients; it only tracks the base encoder
through an exponential moving average.
"""

from __future__ import annotations

import copy
import json
from dataclasses import dataclass, field

import numpy as np

from .geometry import BallConfig, clip_to_ball, exp_map_origin

__all__ = [
    "CHECKPOINT_VERSION",
    "EncoderParams",
    "ForwardCache",
    "Layer",
    "MomentumState",
    "backward",
    "forward",
    "init_encoder",
    "load_params",
    "momentum_update",
    "parameter_arrays",
    "project_euclidean",
    "project_euclidean_vjp",
    "project_hyperbolic",
    "save_params",
    "zero_grads",
]

CHECKPOINT_VERSION = 1

_ACTIVATIONS = ("relu", "identity")


@dataclass
class Layer:
    weight: np.ndarray          # (out, in)
    bias: np.ndarray            # (out,)
    activation: str = "relu"

    def __post_init__(self):
        if self.activation not in _ACTIVATIONS:
            raise ValueError(f"unknown activation {self.activation!r}")
        if self.weight.shape[0] != self.bias.shape[0]:
            raise ValueError("bias length must match weight rows")


@dataclass
class EncoderParams:
    trunk: list                 # of Layer
    heads: dict                 # {"shared": Layer} or {"euclidean": .., "hyperbolic": ..}
    head_mode: str              # "shared" | "split"
    version: int = 0            # bumped by the trainer after each update

    def head_for(self, branch: str) -> Layer:
        if self.head_mode == "shared":
            return self.heads["shared"]
        return self.heads[branch]

    @property
    def input_dim(self) -> int:
        return self.trunk[0].weight.shape[1] if self.trunk else next(
            iter(self.heads.values())
        ).weight.shape[1]

    @property
    def embed_dim(self) -> int:
        return next(iter(self.heads.values())).weight.shape[0]


@dataclass
class MomentumState:
    params: EncoderParams
    momentum: float

    def __post_init__(self):
        if not 0.0 <= self.momentum <= 1.0:
            raise ValueError("momentum coefficient must lie in [0, 1]")


@dataclass
class ForwardCache:
    branch: str
    params_id: int
    params_version: int
    inputs: list = field(default_factory=list)       # input to each layer
    preacts: list = field(default_factory=list)      # pre-activation of each layer
    squeezed: bool = False


def init_encoder(
    input_dim: int = 64,
    hidden_dims: tuple = (128, 128),
    embed_dim: int = 32,
    head_mode: str = "shared",
    rng: np.random.Generator | None = None,
    weight_scale: float = 1.0,
) -> EncoderParams:
    """He-initialized relu trunk with identity linear head(s).

    weight_scale shrinks only the head, setting the initial embedding
    norm without disturbing the trunk's activation statistics.
    """
    if head_mode not in ("shared", "split"):
        raise ValueError(f"head_mode must be 'shared' or 'split', got {head_mode!r}")
    rng = rng or np.random.default_rng(0)
    dims = [input_dim, *hidden_dims]
    trunk = []
    for d_in, d_out in zip(dims[:-1], dims[1:]):
        w = rng.standard_normal((d_out, d_in)) * np.sqrt(2.0 / d_in)
        trunk.append(Layer(w, np.zeros(d_out), "relu"))
    d_last = dims[-1]

    def make_head():
        w = rng.standard_normal((embed_dim, d_last)) * weight_scale * np.sqrt(
            1.0 / d_last
        )
        return Layer(w, np.zeros(embed_dim), "identity")

    if head_mode == "shared":
        heads = {"shared": make_head()}
    else:
        heads = {"euclidean": make_head(), "hyperbolic": make_head()}
    return EncoderParams(trunk=trunk, heads=heads, head_mode=head_mode)


def _head_keys(params: EncoderParams):
    return (
        ("shared",) if params.head_mode == "shared" else ("euclidean", "hyperbolic")
    )


def parameter_arrays(params: EncoderParams) -> list:
    """All parameter tensors in a fixed order (trunk first, then heads)."""
    arrays = []
    for layer in params.trunk:
        arrays.extend((layer.weight, layer.bias))
    for key in _head_keys(params):
        layer = params.heads[key]
        arrays.extend((layer.weight, layer.bias))
    return arrays


def zero_grads(params: EncoderParams) -> list:
    return [np.zeros_like(a) for a in parameter_arrays(params)]


def _layer_forward(layer: Layer, x: np.ndarray):
    pre = x @ layer.weight.T + layer.bias
    if layer.activation == "relu":
        return pre, np.maximum(pre, 0.0)
    return pre, pre


def forward(params: EncoderParams, x, branch: str = "euclidean"):
    """Run the trunk and the branch head; returns (embedding, cache).

    Accepts a single feature vector (d,) or a batch (B, d); the output
    matches.  The cache records one entry per layer and is only valid
    for backward with the same params object at the same version.
    """
    x = np.asarray(x, dtype=np.float64)
    squeezed = x.ndim == 1
    if squeezed:
        x = x[None, :]
    if x.shape[1] != params.input_dim:
        raise ValueError(
            f"input dim {x.shape[1]} does not match encoder input {params.input_dim}"
        )
    cache = ForwardCache(
        branch=branch,
        params_id=id(params),
        params_version=params.version,
        squeezed=squeezed,
    )
    out = x
    for layer in [*params.trunk, params.head_for(branch)]:
        cache.inputs.append(out)
        pre, out = _layer_forward(layer, out)
        cache.preacts.append(pre)
    return (out[0] if squeezed else out), cache


def backward(params: EncoderParams, cache: ForwardCache, grad_out):
    """Exact gradients of a scalar loss through a cached forward pass.

    Returns (grads, grad_input) with grads aligned to parameter_arrays;
    layers not on the executed branch get zero gradients.  Raises if the
    cache does not belong to this params object and version.
    """
    if cache.params_id != id(params) or cache.params_version != params.version:
        raise ValueError("stale or foreign activation cache")
    g = np.asarray(grad_out, dtype=np.float64)
    if cache.squeezed:
        g = g[None, :]
    layers = [*params.trunk, params.head_for(cache.branch)]
    layer_grads = []
    for layer, x_in, pre in zip(
        reversed(layers), reversed(cache.inputs), reversed(cache.preacts)
    ):
        if layer.activation == "relu":
            g = g * (pre > 0.0)
        dw = g.T @ x_in
        db = g.sum(axis=0)
        g = g @ layer.weight
        layer_grads.append((dw, db))
    layer_grads.reverse()

    grads = []
    for lg in layer_grads[: len(params.trunk)]:
        grads.extend(lg)
    head_grad = layer_grads[-1]
    for key in _head_keys(params):
        if params.head_mode == "shared" or key == cache.branch:
            grads.extend(head_grad)
        else:
            layer = params.heads[key]
            grads.extend((np.zeros_like(layer.weight), np.zeros_like(layer.bias)))
    return grads, (g[0] if cache.squeezed else g)


def momentum_update(base: EncoderParams, mom: MomentumState) -> MomentumState:
    """theta_m <- m * theta_m + (1 - m) * theta_base, elementwise, in place."""
    m = mom.momentum
    for pm, pb in zip(parameter_arrays(mom.params), parameter_arrays(base)):
        pm *= m
        pm += (1.0 - m) * pb
    return mom


def make_momentum_state(base: EncoderParams, momentum: float) -> MomentumState:
    return MomentumState(params=copy.deepcopy(base), momentum=momentum)


def project_euclidean(embedding) -> np.ndarray:
    """Normalize to the unit sphere; rejects (near-)zero embeddings."""
    e = np.asarray(embedding, dtype=np.float64)
    n = np.linalg.norm(e, axis=-1, keepdims=True)
    if np.any(n < 1e-12):
        raise ValueError("cannot normalize a zero embedding")
    return e / n


def project_euclidean_vjp(embedding):
    """Normalization plus its VJP: vjp(u) = (u - <u,z>z)/||e||."""
    e = np.asarray(embedding, dtype=np.float64)
    n = np.linalg.norm(e, axis=-1, keepdims=True)
    if np.any(n < 1e-12):
        raise ValueError("cannot normalize a zero embedding")
    z = e / n

    def vjp(u):
        u = np.asarray(u, dtype=np.float64)
        uz = np.sum(u * z, axis=-1, keepdims=True)
        return (u - uz * z) / n

    return z, vjp


def project_hyperbolic(embedding, cfg: BallConfig) -> np.ndarray:
    """Clip the raw embedding to norm r - eps, then exp-map at the origin."""
    return exp_map_origin(clip_to_ball(embedding, cfg), cfg)


def save_params(path, params: EncoderParams) -> None:
    """Versioned npz dump: every tensor under its structural name."""
    arrays = {}
    meta = {
        "version": CHECKPOINT_VERSION,
        "head_mode": params.head_mode,
        "params_version": params.version,
        "trunk": [layer.activation for layer in params.trunk],
        "heads": {k: params.heads[k].activation for k in _head_keys(params)},
    }
    for i, layer in enumerate(params.trunk):
        arrays[f"trunk.{i}.weight"] = layer.weight
        arrays[f"trunk.{i}.bias"] = layer.bias
    for key in _head_keys(params):
        arrays[f"head.{key}.weight"] = params.heads[key].weight
        arrays[f"head.{key}.bias"] = params.heads[key].bias
    arrays["__meta__"] = np.frombuffer(
        json.dumps(meta, sort_keys=True).encode(), dtype=np.uint8
    )
    with open(path, "wb") as fh:
        np.savez(fh, **arrays)


def load_params(path) -> EncoderParams:
    try:
        data = np.load(path)
        meta = json.loads(bytes(data["__meta__"]).decode())
    except Exception as exc:
        raise ValueError(f"unreadable encoder checkpoint {path}: {exc}") from exc
    if meta.get("version") != CHECKPOINT_VERSION:
        raise ValueError(
            f"checkpoint version {meta.get('version')} != {CHECKPOINT_VERSION}"
        )
    trunk = [
        Layer(data[f"trunk.{i}.weight"], data[f"trunk.{i}.bias"], act)
        for i, act in enumerate(meta["trunk"])
    ]
    heads = {
        key: Layer(data[f"head.{key}.weight"], data[f"head.{key}.bias"], act)
        for key, act in meta["heads"].items()
    }
    return EncoderParams(
        trunk=trunk,
        heads=heads,
        head_mode=meta["head_mode"],
        version=meta.get("params_version", 0),
    )
