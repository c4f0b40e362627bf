import time
import numpy as np
from scipy.stats import spearmanr
from hypcl.synthetic import GeneratorConfig, generate_dataset, unit_feature
from hypcl.trainer import TrainConfig, _init_state, _run_epoch
from hypcl.encoder import forward

scenes, _ = generate_dataset(GeneratorConfig(scene_count=2000, seed=0))
feats = unit_feature(np.stack([s.feature for s in scenes]))
counts = np.array([len(s.objects) for s in scenes])

for tag, cfg in [("lam.1", TrainConfig(epochs=1, seed=0)),
                 ("lam0", TrainConfig(epochs=1, seed=0, lam=0.0))]:
    state = _init_state(cfg)
    t0 = time.time()
    for ep in range(40):
        rec = _run_epoch(state, scenes, cfg)
        if (ep + 1) % 5 == 0:
            emb, _ = forward(state.params, feats, branch="hyperbolic")
            rho = float(spearmanr(np.linalg.norm(emb, axis=-1), counts)[0])
            print(f"[{tag}] ep={ep} rho={rho:+.3f} scene={rec['scene_norm']:.2f} "
                  f"objH={rec['object_norm_hyp']:.2f} Lh={rec['loss_hyp'] or 0:.2f} "
                  f"Le={rec['loss_euc']:.2f} ({time.time()-t0:.0f}s)", flush=True)
