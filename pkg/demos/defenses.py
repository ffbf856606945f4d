"""How much of a patch's effect survives JPEG, Gaussian noise and median blur.

Uses the analytic depth model so it runs in seconds. E_dB is the damage the
defense alone does to a clean image.
"""
# %% setup
from depthpatch import AnalyticDepthModel, AttackConfig, generate_synthetic_scenes, train_patch
from depthpatch.cli import default_defenses
from depthpatch.evaluation import evaluate_defended, evaluate_patch, format_table

data = generate_synthetic_scenes(30, seed=1)
model = AnalyticDepthModel()
cfg = AttackConfig(epochs=20, patch_side=24)
patch, _ = train_patch(data, model, cfg)

# %% undefended baseline
base = evaluate_patch(model, data.test, patch, cfg.patch_scale)
print(f"undefended E_d={base.e_d:.4f}")

# %% each defense in turn
rows = []
for spec in default_defenses(seed=0):
    e_d, e_db = evaluate_defended(model, data.test, patch, spec, cfg.patch_scale)
    rows.append([spec.kind, spec.parameter, f"{e_d:.4f}", f"{e_db:.4f}"])
print(format_table(["Defense", "Param", "E_d", "E_dB"], rows))
