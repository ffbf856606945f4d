"""Command-line entry points: train, eval, ablate, sweep-scale, defend, render, gen-scenes, pretrain-model.

Every command reads one JSON run config (all fields optional) and accepts a
few overrides (--epochs, --scale, --seed, --loss-terms, --defense) that win
over the file. Outputs land under ``--out`` or ``$DEPTHPATCH_ROOT/<command>/<config hash>``
together with a manifest recording the config, its hash and the seed.

Exit codes: 0 ok, 2 config error, 3 data error, 4 numeric failure.
"""
from __future__ import annotations

import argparse
import dataclasses
import hashlib
import json
import logging
import sys
from pathlib import Path

import numpy as np

from depthpatch import __version__
from depthpatch.config import DataConfig, ModelConfig, RunConfig, config_hash, from_dict, load_config, to_jsonable
from depthpatch.errors import ConfigError, DataError, NumericError
from depthpatch.evaluation import (
    DEFENSE_SWEEPS,
    DefenseSpec,
    MetricsReport,
    evaluate_defended,
    evaluate_patch,
    patched_scenes,
)
from depthpatch.losses import LossConfig
from depthpatch.models import AnalyticDepthModel, DepthModel, heldout_error, load_model, pretrain_toy_model, save_model
from depthpatch.report import render_scene, write_table
from depthpatch.scene_io import (
    DatasetSplit,
    artifact_root,
    generate_synthetic_scenes,
    load_dataset,
    read_image,
    save_dataset,
    write_image,
)
from depthpatch.trainer import init_patch, resume, train_patch

log = logging.getLogger("depthpatch")

ABLATION_COMBOS = (("d2", "tv"), ("d1", "tv"), ("d1", "d2", "tv"))
SWEEP_SCALES = (0.1, 0.2, 0.3)

# pretraining scenes come from a separate seed stream so they never coincide with attack scenes
_PRETRAIN_SEED_OFFSET = 7919


# ---------------------------------------------------------------------------
# building blocks shared by the commands


def apply_overrides(cfg: RunConfig, epochs=None, scale=None, seed=None, loss_terms=None) -> RunConfig:
    attack = cfg.attack
    if epochs is not None:
        attack = dataclasses.replace(attack, epochs=epochs)
    if scale is not None:
        attack = dataclasses.replace(attack, patch_scale=scale)
    if seed is not None:
        attack = dataclasses.replace(attack, seed=seed)
    if loss_terms is not None:
        terms = set(loss_terms)
        kw = {k: getattr(attack.loss, k) for k in ("alpha", "beta", "square_mode", "target_depth")}
        loss = LossConfig.from_terms(terms, **kw)
        loss.check_attack()
        attack = dataclasses.replace(attack, loss=loss)
    return dataclasses.replace(cfg, attack=attack)


def build_dataset(dc: DataConfig) -> DatasetSplit:
    if dc.kind == "directory":
        return load_dataset(dc.path, dc.split)
    return generate_synthetic_scenes(dc.n_scenes, dc.seed, dc.scene)


def pretrain_from_config(mc: ModelConfig, scene_spec=None) -> DepthModel:
    data = generate_synthetic_scenes(mc.pretrain_scenes, mc.seed + _PRETRAIN_SEED_OFFSET, scene_spec)
    return pretrain_toy_model(data, epochs=mc.pretrain_epochs, seed=mc.seed, base_channels=mc.base_channels)


def build_model(mc: ModelConfig, root: Path | None = None, scene_spec=None) -> DepthModel:
    """Analytic model, weights file, or a toy model pretrained once and cached under the artifact root."""
    if mc.kind == "analytic":
        return AnalyticDepthModel()
    if mc.kind == "file":
        if not Path(mc.path).exists():
            raise DataError(f"model file {mc.path} not found")
        return load_model(mc.path)
    cache = Path(root or artifact_root()) / "models" / f"toy-{config_hash((mc, scene_spec))}.dpw"
    if cache.exists():
        return load_model(cache)
    log.info("pretraining toy depth model (%d scenes, %d epochs)", mc.pretrain_scenes, mc.pretrain_epochs)
    model = pretrain_from_config(mc, scene_spec)
    cache.parent.mkdir(parents=True, exist_ok=True)
    save_model(model, cache)
    return load_model(cache)  # round-trip so cached and fresh runs see identical float32 weights


def load_patch(path) -> np.ndarray:
    """Patch as (S, S, 3) from a .png, .npy or checkpoint .json."""
    path = Path(path)
    if not path.exists():
        raise DataError(f"patch {path} not found")
    if path.suffix == ".json":
        return resume(path)["patch"]
    if path.suffix == ".npy":
        p = np.load(path)
    else:
        p = read_image(path)
    if p.ndim != 3 or p.shape[2] != 3 or p.shape[0] != p.shape[1]:
        raise DataError(f"patch {path} must be a square RGB image, got shape {p.shape}")
    return np.asarray(p, dtype=np.float64)


def write_manifest(out_dir: Path, command: str, cfg: RunConfig, model=None, **extra) -> dict:
    manifest = {
        "command": command,
        "version": __version__,
        "config_hash": config_hash(cfg),
        "seed": cfg.attack.seed,
        "config": to_jsonable(cfg),
        **extra,
    }
    if isinstance(model, DepthModel):
        manifest["model"] = {"arch": model.arch, "weights_sha256": model.weights_checksum()}
    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / "manifest.json").write_text(json.dumps(manifest, indent=2, default=str))
    return manifest


def _run_dir(args, cfg: RunConfig, command: str) -> Path:
    if getattr(args, "out", None):
        return Path(args.out)
    if cfg.output_dir:
        return Path(cfg.output_dir)
    return artifact_root() / command / config_hash(cfg)


def _evaluate(model, scenes, patch, cfg: RunConfig, label="patch") -> MetricsReport:
    a = cfg.attack
    return evaluate_patch(model, scenes, patch, a.patch_scale, a.detector, a.detector_backend,
                          a.placement_mode, label=label)


def train_and_evaluate(cfg: RunConfig, data: DatasetSplit, model, out_dir=None) -> tuple[np.ndarray, MetricsReport]:
    patch, _ = train_patch(data, model, cfg.attack, checkpoint_dir=out_dir)
    return patch, _evaluate(model, data.test, patch, cfg)


# ---------------------------------------------------------------------------
# commands


def cmd_train(args, cfg: RunConfig) -> int:
    out = _run_dir(args, cfg, "train")
    data = build_dataset(cfg.data)
    model = build_model(cfg.model, scene_spec=cfg.data.scene)
    before = model.weights_checksum()
    patch, train_log = train_patch(data, model, cfg.attack, checkpoint_dir=out / "checkpoints")
    if model.weights_checksum() != before:
        raise NumericError("model weights changed during training")
    write_image(patch, out / "patch.png")
    (out / "training_log.json").write_text(json.dumps(train_log.to_dict(), indent=2))
    final = train_log.checkpoints[cfg.attack.epochs]
    write_manifest(out, "train", cfg, model, patch_checkpoint=final,
                   patch_sha256=_sha(patch), epochs_completed=len(train_log.epochs))
    print(f"patch written to {out / 'patch.png'} (exact values in {final})")
    return 0


def cmd_eval(args, cfg: RunConfig) -> int:
    out = _run_dir(args, cfg, "eval")
    data = build_dataset(cfg.data)
    model = build_model(cfg.model, scene_spec=cfg.data.scene)
    patch = load_patch(args.patch)
    report = _evaluate(model, data.test, patch, cfg, label="patch")
    out.mkdir(parents=True, exist_ok=True)
    (out / "metrics.json").write_text(report.to_json())
    reports = [report]
    if args.control:
        control = init_patch(dataclasses.replace(cfg.attack, patch_side=patch.shape[0])).transpose(1, 2, 0)
        ctl = _evaluate(model, data.test, control, cfg, label="random")
        (out / "metrics_random.json").write_text(ctl.to_json())
        reports.append(ctl)
    rows = [[r.label, r.mse, r.e_d, r.r_a] for r in reports]
    print(write_table("metrics_table", ["Patch", "MSE", "E_d", "R_a"], rows, out,
                      {"config_hash": config_hash(cfg), "seed": cfg.attack.seed}))
    write_manifest(out, "eval", cfg, model, patch=str(args.patch))
    return 0


def run_ablation(cfg: RunConfig, data, model, seeds, combos=ABLATION_COMBOS) -> list[dict]:
    rows = []
    for combo in combos:
        per_seed = []
        for seed in seeds:
            c = apply_overrides(cfg, seed=seed, loss_terms=combo)
            _, rep = train_and_evaluate(c, data, model)
            per_seed.append({"seed": seed, "e_d": rep.e_d, "r_a": rep.r_a})
            log.info("ablation %s seed %d: E_d %.4f R_a %.4f", "+".join(combo), seed, rep.e_d, rep.r_a)
        rows.append({"combo": "+".join(combo),
                     "e_d": float(np.mean([r["e_d"] for r in per_seed])),
                     "r_a": float(np.mean([r["r_a"] for r in per_seed])),
                     "per_seed": per_seed})
    return rows


def cmd_ablate(args, cfg: RunConfig) -> int:
    out = _run_dir(args, cfg, "ablate")
    data = build_dataset(cfg.data)
    model = build_model(cfg.model, scene_spec=cfg.data.scene)
    seeds = args.seeds or [cfg.attack.seed]
    rows = run_ablation(cfg, data, model, seeds)
    print(write_table("ablation", ["Losses", "E_d", "R_a"], [[r["combo"], r["e_d"], r["r_a"]] for r in rows],
                      out, {"config_hash": config_hash(cfg), "seeds": seeds, "detail": rows}))
    write_manifest(out, "ablate", cfg, model, seeds=seeds)
    return 0


def run_scale_sweep(cfg: RunConfig, data, model, scales=SWEEP_SCALES) -> list[dict]:
    rows = []
    for s in scales:
        _, rep = train_and_evaluate(apply_overrides(cfg, scale=s), data, model)
        rows.append({"scale": s, "e_d": rep.e_d, "r_a": rep.r_a})
        log.info("scale %.2f: E_d %.4f R_a %.4f", s, rep.e_d, rep.r_a)
    return rows


def cmd_sweep_scale(args, cfg: RunConfig) -> int:
    out = _run_dir(args, cfg, "sweep-scale")
    data = build_dataset(cfg.data)
    model = build_model(cfg.model, scene_spec=cfg.data.scene)
    scales = args.scales or list(SWEEP_SCALES)
    for s in scales:
        apply_overrides(cfg, scale=s)  # validate every scale before spending time on training
    rows = run_scale_sweep(cfg, data, model, scales)
    print(write_table("scales", ["Scale", "E_d", "R_a"], [[r["scale"], r["e_d"], r["r_a"]] for r in rows],
                      out, {"config_hash": config_hash(cfg), "seed": cfg.attack.seed}))
    write_manifest(out, "sweep-scale", cfg, model, scales=scales)
    return 0


def default_defenses(seed: int = 0) -> list[DefenseSpec]:
    return [DefenseSpec(kind, p, seed) for kind, params in DEFENSE_SWEEPS.items() for p in params]


def run_defenses(cfg: RunConfig, scenes, model, patch, specs) -> list[dict]:
    a = cfg.attack
    rows = []
    for spec in specs:
        e_d, e_db = evaluate_defended(model, scenes, patch, spec, a.patch_scale, a.detector,
                                      a.detector_backend, a.placement_mode)
        rows.append({"defense": spec.kind, "parameter": spec.parameter, "e_d": e_d, "e_db": e_db})
    return rows


def cmd_defend(args, cfg: RunConfig) -> int:
    out = _run_dir(args, cfg, "defend")
    data = build_dataset(cfg.data)
    model = build_model(cfg.model, scene_spec=cfg.data.scene)
    patch = load_patch(args.patch)
    specs = [DefenseSpec.parse(t, cfg.attack.seed) for t in args.defense] if args.defense \
        else default_defenses(cfg.attack.seed)
    rows = run_defenses(cfg, data.test, model, patch, specs)
    table = [[r["defense"], f"{r['parameter']:g}", r["e_d"], r["e_db"]] for r in rows]
    print(write_table("defenses", ["Defense", "Param", "E_d", "E_dB"], table, out,
                      {"config_hash": config_hash(cfg), "seed": cfg.attack.seed}))
    write_manifest(out, "defend", cfg, model, patch=str(args.patch))
    return 0


def cmd_render(args, cfg: RunConfig) -> int:
    out = _run_dir(args, cfg, "render")
    data = build_dataset(cfg.data)
    model = build_model(cfg.model, scene_spec=cfg.data.scene)
    scenes = data.test[:args.n]
    if not scenes:
        raise DataError("no test scenes to render")
    out.mkdir(parents=True, exist_ok=True)
    written = []
    if args.patch:
        a = cfg.attack
        for s, adv, _ in patched_scenes(scenes, load_patch(args.patch), a.patch_scale, a.detector,
                                        a.detector_backend, a.placement_mode):
            render_scene(model, s, adv, out / f"{s.id}.png")
            written.append(f"{s.id}.png")
    else:
        for s in scenes:
            render_scene(model, s, None, out / f"{s.id}.png")
            written.append(f"{s.id}.png")
    write_manifest(out, "render", cfg, model, patch=args.patch, images=written)
    print(f"wrote {len(written)} renders to {out}")
    return 0


def cmd_gen_scenes(args, cfg: RunConfig) -> int:
    dc = cfg.data
    n = args.n if args.n is not None else dc.n_scenes
    seed = args.seed if args.seed is not None else dc.seed
    out = Path(args.out) if args.out else artifact_root() / "scenes" / f"syn{seed}_{n}"
    split = generate_synthetic_scenes(n, seed, dc.scene)
    save_dataset(split, out)
    print(f"wrote {n} scenes ({len(split.train)} train / {len(split.test)} test) to {out}")
    return 0


def cmd_pretrain_model(args, cfg: RunConfig) -> int:
    mc = cfg.model if args.seed is None else dataclasses.replace(cfg.model, seed=args.seed)
    if mc.kind != "toy":
        raise ConfigError("pretrain-model needs model.kind = 'toy'")
    if args.epochs is not None:
        mc = dataclasses.replace(mc, pretrain_epochs=args.epochs)
    out = Path(args.out) if args.out else artifact_root() / "models" / f"toy-{config_hash((mc, cfg.data.scene))}.dpw"
    model = pretrain_from_config(mc, cfg.data.scene)
    out.parent.mkdir(parents=True, exist_ok=True)
    save_model(model, out)
    held = generate_synthetic_scenes(mc.pretrain_scenes, mc.seed + _PRETRAIN_SEED_OFFSET, cfg.data.scene).test
    print(f"wrote {out} (held-out L1 {heldout_error(model, held):.4f}, sha256 {model.weights_checksum()[:16]})")
    return 0


def _sha(a: np.ndarray) -> str:
    return hashlib.sha256(np.ascontiguousarray(a).tobytes()).hexdigest()


# ---------------------------------------------------------------------------
# argument parsing


def _csv_floats(text):
    return [float(t) for t in text.split(",") if t]


def _csv_ints(text):
    return [int(t) for t in text.split(",") if t]


def _terms(text):
    return [t.strip() for t in text.split(",") if t.strip()]


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="depthpatch", description=__doc__.split("\n")[0])
    p.add_argument("--version", action="version", version=__version__)
    p.add_argument("-v", "--verbose", action="count", default=0)
    sub = p.add_subparsers(dest="command", required=True)

    def command(name, func, help, patch=None):
        c = sub.add_parser(name, help=help)
        c.add_argument("config", nargs="?", help="JSON run config (defaults used when omitted)")
        c.add_argument("--out", help="output directory")
        c.add_argument("--epochs", type=int)
        c.add_argument("--scale", type=float)
        c.add_argument("--seed", type=int)
        c.add_argument("--loss-terms", type=_terms, help="comma list from d1,d2,tv")
        if patch is not None:
            c.add_argument("--patch", required=patch, help="patch .png, .npy or checkpoint .json")
        c.set_defaults(func=func)
        return c

    command("train", cmd_train, "optimize a patch")
    c = command("eval", cmd_eval, "metrics of a patch on the test split", patch=True)
    c.add_argument("--control", action="store_true", help="also evaluate the seeded random patch")
    c = command("ablate", cmd_ablate, "train and evaluate each loss combination")
    c.add_argument("--seeds", type=_csv_ints, help="comma list of seeds")
    c = command("sweep-scale", cmd_sweep_scale, "train and evaluate at several patch scales")
    c.add_argument("--scales", type=_csv_floats, help="comma list, default 0.1,0.2,0.3")
    c = command("defend", cmd_defend, "E_d and E_dB under input-transformation defenses", patch=True)
    c.add_argument("--defense", action="append", help="kind:param, repeatable (default full sweep)")
    c = command("render", cmd_render, "input / benign / adversarial disparity panels", patch=False)
    c.add_argument("--n", type=int, default=4, help="number of test scenes")
    c = command("gen-scenes", cmd_gen_scenes, "write a synthetic dataset directory")
    c.add_argument("--n", type=int)
    command("pretrain-model", cmd_pretrain_model, "pretrain and save the toy depth model")
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.WARNING - 10 * min(args.verbose, 2), format="%(levelname)s %(message)s")
    try:
        cfg = load_config(args.config) if args.config else from_dict(RunConfig, {})
        if args.command not in ("gen-scenes", "pretrain-model"):
            cfg = apply_overrides(cfg, args.epochs, args.scale, args.seed, args.loss_terms)
        return args.func(args, cfg)
    except ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return 2
    except DataError as e:
        print(f"data error: {e}", file=sys.stderr)
        return 3
    except NumericError as e:
        print(f"numeric failure: {e}", file=sys.stderr)
        return 4


if __name__ == "__main__":
    sys.exit(main())
