"""Momentum-encoder training loop with the dual-space objective.

Per batch and scene, the Euclidean branch contrasts two augmented views
of one object crop on the unit sphere; the hyperbolic branch contrasts
a scene-region crop (base encoder) against a contained object crop
(momentum encoder) in the ball.  Positives and negatives are detached;
only the base encoder receives gradients.  In rsgd mode the gradient
arriving at each clipped ball representation is rescaled by the inverse
metric coefficient before flowing back into the encoder weights.

Everything is driven by named generator streams spawned from one master
seed; snapshot/restore round-trips the full state (encoder, momentum
copy, queues, generator states, counters) bit-exactly.
"""

from __future__ import annotations

import copy
import json
from dataclasses import dataclass, field, asdict

import numpy as np

from .encoder import (
    EncoderParams,
    backward,
    forward,
    init_encoder,
    load_params,
    make_momentum_state,
    momentum_update,
    parameter_arrays,
)
from .geometry import (
    BallConfig,
    clip_to_ball,
    clip_to_ball_vjp,
    exp_map_origin,
    exp_map_origin_vjp,
    inverse_conformal_factor,
)
from .hierarchy import SceneRecord, UnusableSceneError, sample_pairs
from .objectives import (
    LossConfig,
    NegativeQueue,
    euclidean_infonce_batch,
    hyperbolic_infonce_batch,
)
from .optimizer import sgd_step
from .encoder import project_euclidean_vjp
from .synthetic import crop_features_batch

__all__ = [
    "STATE_VERSION",
    "TrainConfig",
    "TrainResult",
    "TrainState",
    "TrainingDiverged",
    "restore",
    "snapshot",
    "train",
]

STATE_VERSION = 1

# Collapse detector: the run counts as stalled once essentially every
# hyperbolic anchor embedding sits on the clip boundary and the
# parameter-gradient contribution of the hyperbolic loss has fallen
# below 1e-10 of its initial magnitude.
STALL_CLIP_FRACTION = 0.99
STALL_GRAD_RATIO = 1e-10


class TrainingDiverged(RuntimeError):
    """Loss became non-finite; carries a diagnostic payload."""

    def __init__(self, message: str, diagnostics: dict | None = None):
        super().__init__(message)
        self.diagnostics = diagnostics or {}


@dataclass(frozen=True)
class TrainConfig:
    lr: float | None = None          # None: 0.3 * batch_size / 256
    batch_size: int = 128
    epochs: int = 20
    lam: float = 0.1
    temperature: float = 0.2
    radius: float = 4.5
    clip_epsilon: float = 1e-5
    optimizer: str = "rsgd"                 # "rsgd" | "sgd"
    hierarchy_mode: str = "object_centric"  # | "scene_centric"
    scene_loss_space: str = "hyperbolic"    # | "euclidean"
    head_mode: str = "shared"               # | "split"
    seed: int = 0
    input_dim: int = 64
    hidden_dims: tuple = (128, 128)
    embed_dim: int = 32
    momentum: float = 0.999
    queue_capacity: int = 4096
    queue_warm: int = 256
    view_noise: float = 0.05
    view_dropout: float = 0.1
    warmup_epochs: int = 0
    weight_decay: float = 0.0
    whole_scene_prob: float = 0.3
    # Same-scene objects outside the anchor region join the negatives of
    # the hyperbolic loss.  They share the anchor's context and offset,
    # so they are the hard negatives that force composite regions
    # radially outward past their member objects.
    in_scene_negatives: bool = True
    # Region/object pairs sampled per scene per step.  One pair per step
    # shapes norms too slowly at desk scale; several independent anchors
    # per scene give the hyperbolic branch proportionally more signal
    # per epoch at small extra cost.
    hyp_anchors_per_scene: int = 4
    # Initial weight scale; keeps initial embedding norms well inside the
    # ball (~0.2-0.3 r) so the hyperbolic geometry is responsive from the
    # first step instead of saturating at the clip boundary.
    init_scale: float = 1.5

    def __post_init__(self):
        if self.optimizer not in ("rsgd", "sgd"):
            raise ValueError(f"unknown optimizer {self.optimizer!r}")
        if self.hierarchy_mode not in ("object_centric", "scene_centric"):
            raise ValueError(f"unknown hierarchy mode {self.hierarchy_mode!r}")
        if self.scene_loss_space not in ("hyperbolic", "euclidean"):
            raise ValueError(f"unknown scene loss space {self.scene_loss_space!r}")
        if self.head_mode not in ("shared", "split"):
            raise ValueError(f"unknown head mode {self.head_mode!r}")
        if self.queue_warm > self.queue_capacity:
            raise ValueError("queue_warm cannot exceed queue_capacity")
        LossConfig(self.temperature, self.lam, self.scene_loss_space)
        BallConfig(self.radius, self.clip_epsilon, max(2, self.embed_dim))

    @property
    def resolved_lr(self) -> float:
        return 0.3 * self.batch_size / 256.0 if self.lr is None else self.lr

    def ball(self) -> BallConfig:
        return BallConfig(
            radius=self.radius,
            clip_epsilon=self.clip_epsilon,
            dimension=self.embed_dim,
        )

    def to_dict(self) -> dict:
        d = asdict(self)
        d["hidden_dims"] = list(self.hidden_dims)
        return d


@dataclass
class TrainState:
    params: EncoderParams
    momentum: object                # MomentumState
    queue_euc: NegativeQueue
    queue_hyp: NegativeQueue
    rngs: dict                      # name -> np.random.Generator
    epoch: int = 0
    step: int = 0
    initial_hyp_grad: float | None = None
    stalled: bool = False
    stall_epoch: int | None = None
    metrics: list = field(default_factory=list)


@dataclass
class TrainResult:
    params: EncoderParams
    state: TrainState
    metrics: list
    stalled: bool
    stall_epoch: int | None
    config: TrainConfig


def _spawn_rngs(seed: int) -> dict:
    root = np.random.SeedSequence(seed)
    init, order, sample = root.spawn(3)
    return {
        "init": np.random.default_rng(init),
        "order": np.random.default_rng(order),
        "sample": np.random.default_rng(sample),
    }


def _init_state(cfg: TrainConfig) -> TrainState:
    rngs = _spawn_rngs(cfg.seed)
    params = init_encoder(
        input_dim=cfg.input_dim,
        hidden_dims=tuple(cfg.hidden_dims),
        embed_dim=cfg.embed_dim,
        head_mode=cfg.head_mode,
        rng=rngs["init"],
        weight_scale=cfg.init_scale,
    )
    mom = make_momentum_state(params, cfg.momentum)
    ball = cfg.ball()
    hyp_kind = "hyperbolic" if cfg.scene_loss_space == "hyperbolic" else "euclidean"
    return TrainState(
        params=params,
        momentum=mom,
        queue_euc=NegativeQueue(cfg.queue_capacity, cfg.embed_dim, "euclidean"),
        queue_hyp=NegativeQueue(cfg.queue_capacity, cfg.embed_dim, hyp_kind,
                                cfg=ball if hyp_kind == "hyperbolic" else None),
        rngs=rngs,
    )


def _realize_crops(specs_with_scenes, cfg: TrainConfig) -> np.ndarray:
    return crop_features_batch(
        specs_with_scenes, cfg.view_noise, cfg.view_dropout, normalize=True
    )


def _epoch_lr(cfg: TrainConfig, epoch: int) -> float:
    lr = cfg.resolved_lr
    if cfg.warmup_epochs > 0 and epoch < cfg.warmup_epochs:
        lr *= (epoch + 1) / (cfg.warmup_epochs + 1)
    return lr


def _grad_norm(grads) -> float:
    return float(np.sqrt(sum(float(np.sum(g * g)) for g in grads)))


def _run_batch(state: TrainState, batch_scenes, cfg: TrainConfig, lr: float):
    ball = cfg.ball()
    rng = state.rngs["sample"]
    pairs, scenes = [], []
    for scene in batch_scenes:
        try:
            pairs.append(sample_pairs(
                scene, cfg.hierarchy_mode, rng, cfg.whole_scene_prob,
                cfg.hyp_anchors_per_scene,
            ))
            scenes.append(scene)
        except UnusableSceneError:
            continue
    if not pairs:
        return None

    feats_a = _realize_crops(
        [(p.euclidean_anchor, s) for p, s in zip(pairs, scenes)], cfg
    )
    feats_b = _realize_crops(
        [(p.euclidean_positive, s) for p, s in zip(pairs, scenes)], cfg
    )
    # hyperbolic anchors flatten across scenes: row owner tracked via slots
    hyp_entries = [
        (spec, s, row)
        for row, (p, s) in enumerate(zip(pairs, scenes))
        for spec in p.hyperbolic_anchors
    ]
    feats_anchor = _realize_crops([(e[0], e[1]) for e in hyp_entries], cfg)
    pos_entries = [
        (spec, s)
        for p, s in zip(pairs, scenes)
        for spec in p.hyperbolic_positives
    ]
    feats_pos = _realize_crops(pos_entries, cfg)

    # Base encoder on anchors, momentum encoder on detached keys.
    e1, cache_euc = forward(state.params, feats_a, branch="euclidean")
    e2, _ = forward(state.momentum.params, feats_b, branch="euclidean")
    z1, norm_vjp = project_euclidean_vjp(e1)
    z2 = e2 / np.linalg.norm(e2, axis=-1, keepdims=True)

    es, cache_hyp = forward(state.params, feats_anchor, branch="hyperbolic")
    eo, _ = forward(state.momentum.params, feats_pos, branch="hyperbolic")
    hyperbolic_space = cfg.scene_loss_space == "hyperbolic"
    if hyperbolic_space:
        ws, clip_vjp = clip_to_ball_vjp(es, ball)
        zs, exp_vjp = exp_map_origin_vjp(ws, ball)
        zo = exp_map_origin(clip_to_ball(eo, ball), ball)
        if np.any(np.linalg.norm(zs, axis=-1) >= ball.radius) or np.any(
            np.linalg.norm(zo, axis=-1) >= ball.radius
        ):
            raise AssertionError("hyperbolic representation escaped the ball")
    else:
        zs, scene_norm_vjp = project_euclidean_vjp(es)
        zo = eo / np.linalg.norm(eo, axis=-1, keepdims=True)

    # In-scene negatives (objects outside the anchor region) go through
    # the momentum encoder like every other detached key; rows are
    # padded with a maximally distant point whose softmax weight
    # underflows to zero.
    extras = None
    if cfg.in_scene_negatives and hyperbolic_space and cfg.lam > 0.0:
        flat_specs = []
        slots = []
        anchor_row = 0
        for p, s in zip(pairs, scenes):
            for negs in p.hyperbolic_negatives:
                for spec in negs:
                    flat_specs.append((spec, s))
                    slots.append(anchor_row)
                anchor_row += 1
        n_anchors = anchor_row
        if flat_specs:
            feats_extra = _realize_crops(flat_specs, cfg)
            ee, _ = forward(state.momentum.params, feats_extra,
                            branch="hyperbolic")
            ze = exp_map_origin(clip_to_ball(ee, ball), ball)
            width = max(np.bincount(np.asarray(slots)).max(), 1)
            sentinel = np.zeros(cfg.embed_dim)
            sentinel[0] = ball.radius * (1.0 - 1e-12)
            extras = np.tile(sentinel, (n_anchors, width, 1))
            fill = [0] * n_anchors
            for row, z in zip(slots, ze):
                extras[row, fill[row]] = z
                fill[row] += 1

    batch = len(pairs)
    record = {
        "batch": batch,
        "object_norm_euclid": float(np.mean(np.linalg.norm(e1, axis=-1))),
        "scene_norm": float(np.mean(np.linalg.norm(es, axis=-1))),
        "object_norm_hyp": float(np.mean(np.linalg.norm(eo, axis=-1))),
        "frac_clipped": float(
            np.mean(np.linalg.norm(es, axis=-1) > ball.max_norm)
        ),
    }

    warm = (
        len(state.queue_euc) < cfg.queue_warm
        or len(state.queue_hyp) < cfg.queue_warm
    )
    if warm:
        state.queue_euc.push(z2)
        state.queue_hyp.push(zo)
        record["warm"] = True
        return record

    negs_e = state.queue_euc.negatives()
    losses_euc, g_z1 = euclidean_infonce_batch(
        z1, z2, negs_e, cfg.temperature
    )
    loss_euc = float(np.mean(losses_euc))

    loss_hyp = None
    grads_hyp = None
    if cfg.lam > 0.0:
        negs_h = state.queue_hyp.negatives()
        if hyperbolic_space:
            losses_hyp, g_zs = hyperbolic_infonce_batch(
                zs, zo, negs_h, cfg.temperature, ball, extra_negatives=extras
            )
        else:
            losses_hyp, g_zs = euclidean_infonce_batch(
                zs, zo, negs_h, cfg.temperature
            )
        loss_hyp = float(np.mean(losses_hyp))

    combined = loss_euc + (cfg.lam * loss_hyp if loss_hyp is not None else 0.0)
    if not np.isfinite(combined):
        raise TrainingDiverged(
            "non-finite loss", {
                "loss_euc": loss_euc, "loss_hyp": loss_hyp,
                "epoch": state.epoch, "step": state.step,
            },
        )

    grad_e1 = norm_vjp(g_z1 / batch)
    grads_euc, _ = backward(state.params, cache_euc, grad_e1)

    scale_mean = None
    if cfg.lam > 0.0:
        upstream = cfg.lam * g_zs / zs.shape[0]
        if hyperbolic_space:
            g_ws = exp_vjp(upstream)
            if cfg.optimizer == "rsgd":
                scales = inverse_conformal_factor(ws, ball)
                g_ws = g_ws * scales[..., None]
                scale_mean = float(np.mean(scales))
            grad_es = clip_vjp(g_ws)
        else:
            grad_es = scene_norm_vjp(upstream)
        grads_hyp, _ = backward(state.params, cache_hyp, grad_es)

    total = (
        grads_euc if grads_hyp is None
        else [a + b for a, b in zip(grads_euc, grads_hyp)]
    )
    sgd_step(parameter_arrays(state.params), total, lr, cfg.weight_decay)
    state.params.version += 1
    momentum_update(state.params, state.momentum)

    state.queue_euc.push(z2)
    state.queue_hyp.push(zo)

    hyp_grad = _grad_norm(grads_hyp) if grads_hyp is not None else None
    if hyp_grad is not None and state.initial_hyp_grad is None:
        state.initial_hyp_grad = max(hyp_grad, 1e-300)
    ratio = (
        hyp_grad / state.initial_hyp_grad
        if hyp_grad is not None and state.initial_hyp_grad else None
    )
    if (
        not state.stalled
        and ratio is not None
        and record["frac_clipped"] >= STALL_CLIP_FRACTION
        and ratio < STALL_GRAD_RATIO
    ):
        state.stalled = True
        state.stall_epoch = state.epoch

    record.update({
        "loss_euc": loss_euc,
        "loss_hyp": loss_hyp,
        "loss": combined,
        "rsgd_scale_mean": scale_mean,
        "hyp_grad_norm": hyp_grad,
        "hyp_grad_ratio": ratio,
    })
    return record


def _run_epoch(state: TrainState, scenes, cfg: TrainConfig) -> dict:
    order = state.rngs["order"].permutation(len(scenes))
    lr = _epoch_lr(cfg, state.epoch)
    sums, counts = {}, {}
    batches = warm_batches = skipped = 0
    last = {}
    for start in range(0, len(order), cfg.batch_size):
        idx = order[start:start + cfg.batch_size]
        record = _run_batch(state, [scenes[i] for i in idx], cfg, lr)
        state.step += 1
        if record is None:
            skipped += 1
            continue
        if record.get("warm"):
            warm_batches += 1
            continue
        batches += 1
        for key, val in record.items():
            if isinstance(val, (int, float)) and val is not None:
                sums[key] = sums.get(key, 0.0) + float(val)
                counts[key] = counts.get(key, 0) + 1
        last = record
    rec = {"epoch": state.epoch, "lr": lr, "batches": batches,
           "warm_batches": warm_batches, "skipped_batches": skipped}
    for key in ("loss_euc", "loss_hyp", "loss", "object_norm_euclid",
                "scene_norm", "object_norm_hyp", "frac_clipped",
                "rsgd_scale_mean"):
        rec[key] = sums[key] / counts[key] if counts.get(key) else None
    rec["hyp_grad_norm"] = last.get("hyp_grad_norm")
    rec["hyp_grad_ratio"] = last.get("hyp_grad_ratio")
    rec["stalled"] = state.stalled
    state.epoch += 1
    return rec


def train(
    scenes,
    cfg: TrainConfig,
    out_dir=None,
    resume=None,
) -> TrainResult:
    """Run (or continue) training; returns the result with per-epoch metrics.

    With out_dir set, writes metrics.jsonl and checkpoint.npz there.
    resume points at a checkpoint produced by this function; every
    config field except epochs must match.
    """
    if not scenes:
        raise ValueError("dataset is empty")
    if resume is not None:
        state = restore(resume, cfg)
    else:
        state = _init_state(cfg)
    out_path = None
    if out_dir is not None:
        import pathlib

        out_path = pathlib.Path(out_dir)
        out_path.mkdir(parents=True, exist_ok=True)
    while state.epoch < cfg.epochs:
        rec = _run_epoch(state, scenes, cfg)
        state.metrics.append(rec)
    if out_path is not None:
        with open(out_path / "metrics.jsonl", "w", encoding="utf-8") as fh:
            for rec in state.metrics:
                fh.write(json.dumps(rec, sort_keys=True) + "\n")
        snapshot(out_path / "checkpoint.npz", state, cfg)
    return TrainResult(
        params=state.params,
        state=state,
        metrics=state.metrics,
        stalled=state.stalled,
        stall_epoch=state.stall_epoch,
        config=cfg,
    )


def _rng_state_payload(rngs: dict) -> dict:
    return {name: gen.bit_generator.state for name, gen in rngs.items()}


def _restore_rngs(payload: dict) -> dict:
    rngs = {}
    for name, st in payload.items():
        gen = np.random.default_rng(0)
        gen.bit_generator.state = st
        rngs[name] = gen
    return rngs


def snapshot(path, state: TrainState, cfg: TrainConfig) -> None:
    """Full-state checkpoint: encoder, momentum copy, queues, rng, counters."""
    arrays = {}
    for prefix, params in (
        ("base", state.params), ("momentum", state.momentum.params)
    ):
        for i, arr in enumerate(parameter_arrays(params)):
            arrays[f"{prefix}.{i}"] = arr
    arrays["queue_euc.buffer"] = state.queue_euc.buffer
    arrays["queue_hyp.buffer"] = state.queue_hyp.buffer
    meta = {
        "state_version": STATE_VERSION,
        "config": cfg.to_dict(),
        "epoch": state.epoch,
        "step": state.step,
        "initial_hyp_grad": state.initial_hyp_grad,
        "stalled": state.stalled,
        "stall_epoch": state.stall_epoch,
        "metrics": state.metrics,
        "queue_euc": {"cursor": state.queue_euc.cursor,
                      "count": state.queue_euc.count},
        "queue_hyp": {"cursor": state.queue_hyp.cursor,
                      "count": state.queue_hyp.count},
        "rng": _rng_state_payload(state.rngs),
        "params_version": state.params.version,
    }
    arrays["__meta__"] = np.frombuffer(
        json.dumps(meta, sort_keys=True).encode(), dtype=np.uint8
    )
    with open(path, "wb") as fh:
        np.savez(fh, **arrays)


def restore(path, cfg: TrainConfig) -> TrainState:
    """Rebuild a TrainState from snapshot(); cfg must match except epochs."""
    try:
        data = np.load(path)
        meta = json.loads(bytes(data["__meta__"]).decode())
    except Exception as exc:
        raise ValueError(f"unreadable checkpoint {path}: {exc}") from exc
    if meta.get("state_version") != STATE_VERSION:
        raise ValueError(
            f"checkpoint state version {meta.get('state_version')} "
            f"!= {STATE_VERSION}"
        )
    saved = dict(meta["config"])
    current = cfg.to_dict()
    saved.pop("epochs"), current.pop("epochs")
    if saved != current:
        diff = {k for k in current if saved.get(k) != current.get(k)}
        raise ValueError(f"checkpoint config differs on fields: {sorted(diff)}")

    state = _init_state(cfg)
    for prefix, params in (
        ("base", state.params), ("momentum", state.momentum.params)
    ):
        for i, arr in enumerate(parameter_arrays(params)):
            arr[...] = data[f"{prefix}.{i}"]
    state.params.version = int(meta.get("params_version", 0))
    state.queue_euc.buffer[...] = data["queue_euc.buffer"]
    state.queue_euc.cursor = int(meta["queue_euc"]["cursor"])
    state.queue_euc.count = int(meta["queue_euc"]["count"])
    state.queue_hyp.buffer[...] = data["queue_hyp.buffer"]
    state.queue_hyp.cursor = int(meta["queue_hyp"]["cursor"])
    state.queue_hyp.count = int(meta["queue_hyp"]["count"])
    state.rngs = _restore_rngs(meta["rng"])
    state.epoch = int(meta["epoch"])
    state.step = int(meta["step"])
    state.initial_hyp_grad = meta["initial_hyp_grad"]
    state.stalled = bool(meta["stalled"])
    state.stall_epoch = meta["stall_epoch"]
    state.metrics = list(meta["metrics"])
    return state
