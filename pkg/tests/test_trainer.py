import json

import numpy as np
import pytest
import torch

from depthpatch.config import AttackConfig
from depthpatch.errors import ConfigError, DataError
from depthpatch.losses import LossConfig
from depthpatch.models import LUMA, AnalyticDepthModel
from depthpatch.scene_io import DatasetSplit, Detection, SceneSample, generate_synthetic_scenes
from depthpatch.trainer import TrainingLog, init_patch, resume, train_patch
from depthpatch.transforms import TransformRanges
from oracles import one_step_patch

FAST = dict(patch_side=8, batch_size=2, dtype="float64")


def _cfg(**kw):
    base = dict(FAST)
    base.update(kw)
    return AttackConfig(**base)


@pytest.fixture(scope="module")
def data():
    return generate_synthetic_scenes(10, seed=21)


def test_zero_epochs_returns_init(data, analytic):
    cfg = _cfg(epochs=0, seed=7)
    patch, log = train_patch(data, analytic, cfg)
    np.testing.assert_array_equal(patch, init_patch(cfg).transpose(1, 2, 0))
    assert log.epochs == []


def test_checkpoint_zero_is_init(tmp_path, data, analytic):
    cfg = _cfg(epochs=1, seed=3)
    train_patch(data, analytic, cfg, checkpoint_dir=tmp_path)
    state = resume(tmp_path / "ckpt_0000.json")
    np.testing.assert_array_equal(state["patch"], init_patch(cfg).transpose(1, 2, 0))
    assert state["epoch"] == 0 and state["adam"] == {"step": 0}
    assert (tmp_path / "ckpt_0000.png").exists() and (tmp_path / "ckpt_0001.json").exists()


# ---------------------------------------------------------------------------
# one Adam step against a hand-derived gradient on the linear model


def test_single_adam_step_closed_form():
    rng = np.random.default_rng(0)
    h = w = 64
    image = rng.uniform(0, 1, (h, w, 3))
    det = Detection((12, 16, 52, 56))  # 40 x 40, side 8 at scale 0.2
    scene = SceneSample(image, [det], "one")
    cfg = AttackConfig(epochs=1, batch_size=1, patch_side=8, seed=5, dtype="float64",
                       transforms=TransformRanges.identity())
    model = AnalyticDepthModel().double().freeze()
    patch, _ = train_patch(DatasetSplit([scene], []), model, cfg)

    expect = one_step_patch(image, det.box, init_patch(cfg), LUMA)
    assert np.abs(patch.transpose(2, 0, 1) - expect).max() < 1e-6


# ---------------------------------------------------------------------------


def test_clamp_after_every_step(data, analytic):
    seen = []

    def check(p):
        seen.append((float(p.min()), float(p.max())))

    train_patch(data, analytic, _cfg(epochs=3, learning_rate=0.5), on_step=check)
    assert len(seen) == 3 * 4  # 8 train scenes, batch 2
    assert all(lo >= 0 and hi <= 1 for lo, hi in seen)


def test_model_weights_unchanged(data, toy_model):
    before = toy_model.weights_checksum()
    train_patch(data, toy_model, AttackConfig(epochs=1, patch_side=8))
    assert toy_model.weights_checksum() == before


def test_deterministic(data, analytic):
    cfg = _cfg(epochs=3, transforms=TransformRanges(occlusion=True))
    a, la = train_patch(data, analytic, cfg)
    b, lb = train_patch(data, analytic, cfg)
    assert np.array_equal(a, b)
    assert [e["total"] for e in la.epochs] == [e["total"] for e in lb.epochs]
    c, _ = train_patch(data, analytic, _cfg(epochs=3, seed=1, transforms=TransformRanges(occlusion=True)))
    assert not np.array_equal(a, c)


def test_resume_equivalence(tmp_path, data, analytic):
    cfg = _cfg(epochs=4, checkpoint_every=2)
    straight, log = train_patch(data, analytic, cfg, checkpoint_dir=tmp_path / "a")
    resumed, log2 = train_patch(data, analytic, cfg, checkpoint_dir=tmp_path / "b",
                                resume_from=tmp_path / "a" / "ckpt_0002.json")
    assert np.array_equal(straight, resumed)
    assert len(log2.epochs) == 4
    assert sorted(log.checkpoints) == [0, 2, 4]


def test_checkpoint_restores_optimizer_exactly(tmp_path, data, analytic):
    import depthpatch.trainer as tr

    captured = {}
    orig = tr.save_checkpoint

    def spy(patch, opt, epoch, directory, chash="", train_log=None):
        st = opt.state.get(patch, {})
        if st:
            captured[epoch] = (st["exp_avg"].clone().numpy(), st["exp_avg_sq"].clone().numpy(), int(st["step"]))
        return orig(patch, opt, epoch, directory, chash, train_log)

    tr.save_checkpoint = spy
    try:
        train_patch(data, analytic, _cfg(epochs=2, checkpoint_every=1), checkpoint_dir=tmp_path)
    finally:
        tr.save_checkpoint = orig
    state = resume(tmp_path / "ckpt_0002.json")
    m, v, step = captured[2]
    assert state["adam"]["step"] == step == 8
    assert np.array_equal(state["adam"]["exp_avg"], m)
    assert np.array_equal(state["adam"]["exp_avg_sq"], v)


def test_resume_missing(tmp_path):
    with pytest.raises(DataError, match="not found"):
        resume(tmp_path / "nope.json")


def test_resume_corrupt_names_last_valid(tmp_path, data, analytic):
    train_patch(data, analytic, _cfg(epochs=3, checkpoint_every=1), checkpoint_dir=tmp_path)
    bad = tmp_path / "ckpt_0003.json"
    payload = json.loads(bad.read_text())
    payload["patch"]["data"] = payload["patch"]["data"][:-12]
    bad.write_text(json.dumps(payload))
    with pytest.raises(DataError, match="epoch 2"):
        resume(bad)
    bad.write_text("{garbage")
    with pytest.raises(DataError, match="epoch 2"):
        resume(bad)


def test_scenes_without_detections_skipped(analytic):
    ds = generate_synthetic_scenes(4, seed=1)
    empty = SceneSample(np.full((64, 64, 3), 0.5), [], "empty")
    with pytest.warns(UserWarning, match="empty"):
        train_patch(DatasetSplit(ds.train + [empty], []), analytic, _cfg(epochs=1))
    with pytest.raises(DataError, match="no trainable detections"):
        with pytest.warns(UserWarning):
            train_patch(DatasetSplit([empty], []), analytic, _cfg(epochs=1))


def test_attack_needs_depth_term(data, analytic):
    with pytest.raises(ConfigError):
        train_patch(data, analytic, _cfg(epochs=1, loss=LossConfig(use_d1=False, use_d2=False)))


def test_log_one_entry_per_epoch(data, analytic):
    _, log = train_patch(data, analytic, _cfg(epochs=5))
    assert [e["epoch"] for e in log.epochs] == list(range(5))
    assert all({"total", "depth", "tv", "seconds"} <= e.keys() for e in log.epochs)
    back = TrainingLog.from_dict(json.loads(json.dumps(log.to_dict())))
    assert back.epochs == log.epochs


def test_moving_average_violations():
    log = TrainingLog([{"total": float(v)} for v in np.linspace(1, 0, 30)])
    assert log.moving_average_violations() == []
    log = TrainingLog([{"total": float(v)} for v in np.r_[np.linspace(1, 0, 25), np.ones(10)]])
    assert log.moving_average_violations()


def test_attack_config_validation():
    for kw in ({"epochs": -1}, {"learning_rate": 0}, {"patch_scale": 0}, {"patch_scale": 1.5},
               {"placement_mode": "corner"}, {"detector_backend": "yolo"}):
        with pytest.raises(ConfigError):
            AttackConfig(**kw)
