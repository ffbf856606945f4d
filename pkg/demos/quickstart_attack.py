"""Train a small patch against the toy depth network and look at what it does.

Run with ``python3 demos/quickstart_attack.py``. Uses reduced settings so it
finishes in a few minutes on one CPU; the CLI ``train`` command runs the full
defaults.
"""
# %% setup
from pathlib import Path

import numpy as np

from depthpatch import AttackConfig, SceneSpec, evaluate_patch, generate_synthetic_scenes, train_patch
from depthpatch.cli import build_model
from depthpatch.config import ModelConfig
from depthpatch.report import render_scene
from depthpatch.evaluation import patched_scenes

out = Path("demo_out/quickstart")
out.mkdir(parents=True, exist_ok=True)

# %% scenes and victim model
# synthetic street-like scenes: objects whose disparity follows their size
data = generate_synthetic_scenes(60, seed=0)
print(f"{len(data.train)} train scenes, {len(data.test)} test scenes")

# the toy network is pretrained once and cached under $DEPTHPATCH_ROOT/models
model = build_model(ModelConfig(), scene_spec=SceneSpec())

# %% train
cfg = AttackConfig(epochs=60, patch_side=32)
patch, log = train_patch(data, model, cfg)
print(f"L_total: {log.epochs[0]['total']:.4f} -> {log.epochs[-1]['total']:.4f}")

# %% compare with the random starting patch
trained = evaluate_patch(model, data.test, patch, cfg.patch_scale, label="trained")
control = np.random.default_rng(cfg.seed).uniform(size=patch.shape)
random = evaluate_patch(model, data.test, control, cfg.patch_scale, label="random")
for r in (trained, random):
    print(f"{r.label:8s} E_d={r.e_d:.4f} R_a={r.r_a:.4f} MSE={r.mse:.5f}")

# %% figure: input | benign disparity | adversarial disparity
scene, adv, _ = next(iter(patched_scenes(data.test, patch, cfg.patch_scale)))
render_scene(model, scene, adv, out / f"{scene.id}.png")
print("wrote", out / f"{scene.id}.png")
