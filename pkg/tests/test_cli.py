import hashlib
import json

import jsonschema
import numpy as np
import pytest

from depthpatch.cli import build_model, load_patch, main
from depthpatch.config import ModelConfig, RunConfig, config_hash, from_dict, load_config
from depthpatch.errors import ConfigError
from depthpatch.evaluation import REPORT_SCHEMA
from depthpatch.report import colorize, three_panel
from depthpatch.scene_io import read_image

FAST = {"attack": {"epochs": 2, "patch_side": 8, "batch_size": 4},
        "data": {"n_scenes": 12, "seed": 2}, "model": {"kind": "analytic"}}


@pytest.fixture
def cfg_path(tmp_path, monkeypatch):
    monkeypatch.setenv("DEPTHPATCH_ROOT", str(tmp_path / "root"))
    p = tmp_path / "cfg.json"
    p.write_text(json.dumps(FAST))
    return p


def _sha(path):
    return hashlib.sha256(path.read_bytes()).hexdigest()


def test_train_writes_artifacts(cfg_path, tmp_path, capsys):
    out = tmp_path / "run"
    assert main(["train", str(cfg_path), "--out", str(out)]) == 0
    assert sorted(p.name for p in out.iterdir()) == ["checkpoints", "manifest.json", "patch.png", "training_log.json"]
    manifest = json.loads((out / "manifest.json").read_text())
    cfg = load_config(cfg_path)
    assert manifest["config_hash"] == config_hash(cfg) and manifest["seed"] == 0
    assert from_dict(RunConfig, manifest["config"]) == cfg
    log = json.loads((out / "training_log.json").read_text())
    assert len(log["epochs"]) == 2
    exact = load_patch(out / "checkpoints" / "ckpt_0002.json")
    assert np.abs(read_image(out / "patch.png") - exact).max() <= 0.5 / 255 + 1e-12


def test_train_default_root_and_rerun_identical(cfg_path, tmp_path):
    assert main(["train", str(cfg_path)]) == 0
    run = tmp_path / "root" / "train" / config_hash(load_config(cfg_path))
    first = _sha(run / "patch.png"), load_patch(run / "checkpoints" / "ckpt_0002.json")
    digest = json.loads((run / "manifest.json").read_text())["patch_sha256"]
    assert main(["train", str(cfg_path)]) == 0
    assert _sha(run / "patch.png") == first[0]
    assert np.array_equal(load_patch(run / "checkpoints" / "ckpt_0002.json"), first[1])
    assert json.loads((run / "manifest.json").read_text())["patch_sha256"] == digest


def test_zero_epochs(cfg_path, tmp_path):
    out = tmp_path / "zero"
    assert main(["train", str(cfg_path), "--epochs", "0", "--out", str(out)]) == 0
    assert json.loads((out / "training_log.json").read_text())["epochs"] == []
    init = np.random.default_rng(0).uniform(0, 1, (3, 8, 8)).transpose(1, 2, 0).astype(np.float32)
    np.testing.assert_array_equal(load_patch(out / "checkpoints" / "ckpt_0000.json"), init)


def test_flags_override_file(cfg_path, tmp_path):
    out = tmp_path / "o"
    assert main(["train", str(cfg_path), "--epochs", "1", "--scale", "0.3", "--seed", "4",
                 "--loss-terms", "d1,tv", "--out", str(out)]) == 0
    a = json.loads((out / "manifest.json").read_text())["config"]["attack"]
    assert (a["epochs"], a["patch_scale"], a["seed"]) == (1, 0.3, 4)
    assert (a["loss"]["use_d1"], a["loss"]["use_d2"], a["loss"]["use_tv"]) == (True, False, True)


def test_invalid_config_names_field(tmp_path, capsys):
    bad = tmp_path / "bad.json"
    bad.write_text(json.dumps({"attack": {"learning_rate": -1}}))
    assert main(["train", str(bad)]) == 2
    assert "attack.learning_rate" in capsys.readouterr().err
    bad.write_text(json.dumps({"attack": {"loss": {"alpah": 1}}}))
    assert main(["train", str(bad)]) == 2
    assert "attack.loss.alpah" in capsys.readouterr().err
    assert main(["train", str(tmp_path / "missing.json")]) == 2
    assert main(["sweep-scale", "--scales", "0.2,1.5", str(bad)]) == 2


def test_loss_terms_without_depth_rejected(cfg_path):
    assert main(["ablate", str(cfg_path), "--loss-terms", "tv"]) == 2


def test_missing_patch_is_data_error(cfg_path, tmp_path):
    assert main(["eval", str(cfg_path), "--patch", str(tmp_path / "none.png")]) == 3


def test_numeric_failure_exit_code(tmp_path, monkeypatch):
    monkeypatch.setenv("DEPTHPATCH_ROOT", str(tmp_path))
    p = tmp_path / "c.json"
    # one pass over a handful of scenes cannot reach the convergence bar
    p.write_text(json.dumps({"model": {"pretrain_scenes": 10, "pretrain_epochs": 1}}))
    assert main(["pretrain-model", str(p), "--out", str(tmp_path / "m.dpw")]) == 4


def test_eval_report_and_control(cfg_path, tmp_path, capsys):
    run = tmp_path / "run"
    main(["train", str(cfg_path), "--out", str(run)])
    capsys.readouterr()
    out = tmp_path / "ev"
    assert main(["eval", str(cfg_path), "--patch", str(run / "patch.png"), "--control", "--out", str(out)]) == 0
    text = capsys.readouterr().out
    assert "random" in text and "E_d" in text
    jsonschema.validate(json.loads((out / "metrics.json").read_text()), REPORT_SCHEMA)
    table = json.loads((out / "metrics_table.json").read_text())
    assert [r["Patch"] for r in table["rows"]] == ["patch", "random"]
    assert (out / "metrics_table.txt").exists() and (out / "manifest.json").exists()


def test_defend_full_sweep_and_zero_sigma(cfg_path, tmp_path, capsys):
    run = tmp_path / "run"
    main(["train", str(cfg_path), "--out", str(run)])
    out = tmp_path / "def"
    assert main(["defend", str(cfg_path), "--patch", str(run / "patch.png"), "--out", str(out)]) == 0
    rows = json.loads((out / "defenses.json").read_text())["rows"]
    assert len(rows) == 12
    assert main(["defend", str(cfg_path), "--patch", str(run / "patch.png"),
                 "--defense", "gaussian_noise:0", "--out", str(out)]) == 0
    (row,) = json.loads((out / "defenses.json").read_text())["rows"]
    assert row["E_dB"] == 0


def test_ablate_and_sweep_tables(cfg_path, tmp_path):
    assert main(["ablate", str(cfg_path), "--epochs", "1", "--seeds", "0,1", "--out", str(tmp_path / "a")]) == 0
    rows = json.loads((tmp_path / "a" / "ablation.json").read_text())["rows"]
    assert [r["Losses"] for r in rows] == ["d2+tv", "d1+tv", "d1+d2+tv"]
    assert main(["sweep-scale", str(cfg_path), "--epochs", "1", "--out", str(tmp_path / "s")]) == 0
    rows = json.loads((tmp_path / "s" / "scales.json").read_text())["rows"]
    assert [r["Scale"] for r in rows] == [0.1, 0.2, 0.3]


def test_render_panels(cfg_path, tmp_path):
    out = tmp_path / "r"
    assert main(["render", str(cfg_path), "--n", "2", "--out", str(out)]) == 0
    pngs = sorted(out.glob("*.png"))
    assert len(pngs) == 2
    img = read_image(pngs[0])
    assert img.shape == (64, 3 * 64, 3)
    np.testing.assert_array_equal(img[:, 64:128], img[:, 128:])  # benign-only: panels 2 and 3 match
    run = tmp_path / "run"
    main(["train", str(cfg_path), "--out", str(run)])
    assert main(["render", str(cfg_path), "--n", "1", "--patch", str(run / "patch.png"), "--out", str(out / "adv")]) == 0
    assert read_image(next((out / "adv").glob("*.png"))).shape == (64, 192, 3)


def test_colormap_dark_to_bright():
    rgb = colorize(np.linspace(0, 1, 256))
    luma = rgb @ np.array([0.299, 0.587, 0.114])
    assert np.all(np.diff(luma) > 0)
    assert luma[0] < 0.05 and luma[-1] > 0.8
    with pytest.raises(ValueError):
        three_panel(np.zeros((4, 4, 3)), np.zeros((4, 4)), np.zeros((4, 5)))


def test_gen_scenes_then_directory_dataset(tmp_path, monkeypatch, capsys):
    monkeypatch.setenv("DEPTHPATCH_ROOT", str(tmp_path))
    assert main(["gen-scenes", "--n", "10", "--seed", "3", "--out", str(tmp_path / "scenes")]) == 0
    cfg = dict(FAST, data={"kind": "directory", "path": str(tmp_path / "scenes")})
    p = tmp_path / "dir.json"
    p.write_text(json.dumps(cfg))
    assert main(["train", str(p), "--epochs", "1", "--out", str(tmp_path / "t")]) == 0
    p.write_text(json.dumps(dict(FAST, data={"kind": "directory"})))
    assert main(["train", str(p)]) == 2
    p.write_text(json.dumps(dict(FAST, data={"kind": "directory", "path": str(tmp_path / "void")})))
    assert main(["train", str(p)]) == 3


def test_build_model_caches(tmp_path, monkeypatch):
    import depthpatch.cli as cli
    from depthpatch.models import ToyDepthNet

    calls = []
    real = cli.pretrain_from_config

    def counting(mc, spec=None):
        calls.append(mc)
        return real(mc, spec)

    monkeypatch.setattr(cli, "pretrain_from_config", counting)
    mc = ModelConfig(pretrain_scenes=12, pretrain_epochs=1)
    # skip the actual fitting; only the caching is under test
    monkeypatch.setattr(cli, "pretrain_toy_model", lambda *a, **k: ToyDepthNet(8, k.get("seed", 0)).freeze())
    a = build_model(mc, root=tmp_path)
    b = build_model(mc, root=tmp_path)
    assert len(calls) == 1 and a.weights_checksum() == b.weights_checksum()
    with pytest.raises(ConfigError):
        ModelConfig(kind="file")
