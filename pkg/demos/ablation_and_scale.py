"""Which loss terms matter, and how the effect grows with patch size.

Short runs on a small scene set; the CLI ``ablate`` and ``sweep-scale``
commands do the same with the full configuration.
"""
# %% setup
import dataclasses

from depthpatch import SceneSpec, generate_synthetic_scenes
from depthpatch.cli import build_model, run_ablation, run_scale_sweep
from depthpatch.config import ModelConfig, RunConfig
from depthpatch.evaluation import format_table

data = generate_synthetic_scenes(40, seed=2)
model = build_model(ModelConfig(), scene_spec=SceneSpec())
cfg = RunConfig()
cfg = dataclasses.replace(cfg, attack=dataclasses.replace(cfg.attack, epochs=30, patch_side=32))

# %% loss-term ablation, averaged over two seeds
rows = run_ablation(cfg, data, model, seeds=[0, 1])
print(format_table(["Losses", "E_d", "R_a"], [[r["combo"], f"{r['e_d']:.4f}", f"{r['r_a']:.4f}"] for r in rows]))

# %% patch scale sweep
rows = run_scale_sweep(cfg, data, model)
print(format_table(["Scale", "E_d", "R_a"], [[r["scale"], f"{r['e_d']:.4f}", f"{r['r_a']:.4f}"] for r in rows]))
