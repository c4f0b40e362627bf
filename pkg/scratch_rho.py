"""Scratch experiment: norm-count correlation trajectory under variants."""
import json
import sys
import time

import numpy as np
from scipy.stats import spearmanr

import hypcl.synthetic as syn
from hypcl.synthetic import GeneratorConfig, generate_dataset
from hypcl.trainer import TrainConfig, _init_state, _run_epoch
from hypcl.encoder import forward


def rho_trajectory(tag, scenes, cfg, epochs, every=10):
    state = _init_state(cfg)
    feats = np.stack([s.feature for s in scenes])
    counts = np.array([len(s.objects) for s in scenes])
    t0 = time.time()
    out = []
    for ep in range(epochs):
        rec = _run_epoch(state, scenes, cfg)
        if (ep + 1) % every == 0 or ep == epochs - 1:
            emb, _ = forward(state.params, feats, branch="hyperbolic")
            rho = float(spearmanr(np.linalg.norm(emb, axis=-1), counts)[0])
            out.append((ep, round(rho, 3), round(rec["scene_norm"], 3),
                        round(rec["loss_hyp"] or 0, 3)))
            print(f"[{tag}] ep={ep} rho={rho:+.3f} scene_norm={rec['scene_norm']:.3f} "
                  f"loss_hyp={rec['loss_hyp']:.3f} ({time.time()-t0:.0f}s)", flush=True)
    return out


variant = sys.argv[1]
scenes, _ = generate_dataset(GeneratorConfig(scene_count=2000, seed=0))

if variant == "A":
    rho_trajectory("A base", scenes, TrainConfig(epochs=1, seed=0), 100)
elif variant == "B":
    syn.CONTEXT_SCALE = 1.5
    scenes2, _ = generate_dataset(GeneratorConfig(scene_count=2000, seed=0))
    rho_trajectory("B ctx1.5", scenes2, TrainConfig(epochs=1, seed=0), 100)
elif variant == "C":
    rho_trajectory("C whole.7", scenes,
                   TrainConfig(epochs=1, seed=0, whole_scene_prob=0.7), 100)
elif variant == "D":
    rho_trajectory("D lam0", scenes, TrainConfig(epochs=1, seed=0, lam=0.0), 60, 20)
