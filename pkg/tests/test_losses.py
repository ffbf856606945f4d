import numpy as np
import pytest
import torch
from hypothesis import given, strategies as st

from depthpatch.errors import ConfigError, DataError
from depthpatch.losses import (
    LossConfig,
    TargetDepthSpec,
    detection_depth_loss,
    loss_d1,
    loss_d2,
    loss_depth,
    loss_total,
    loss_tv,
)
from depthpatch.masks import MaskPair
from oracles import tv_value


def _t(a):
    return torch.as_tensor(a, dtype=torch.float64)


def _loop_masked_mean(a, b, m):
    num, den = 0.0, 0
    for y in range(a.shape[0]):
        for x in range(a.shape[1]):
            if m[y, x]:
                num += abs(a[y, x] - b[y, x])
                den += 1
    return num / max(den, 1)


def _masks(rng, h=32, w=32):
    mf = np.zeros((h, w), bool)
    mf[4:28, 6:30] = True
    mp = mf & (rng.uniform(size=(h, w)) < 0.3)
    return mf, mp


def test_d1_trivial():
    z = torch.zeros(8, 8, dtype=torch.float64)
    m = np.ones((8, 8), bool)
    assert loss_d1(z, z, m) == 0
    assert loss_d1(z, z + 0.5, m[:, :]) == pytest.approx(0.5)
    assert loss_d1(z, z + 0.5, np.zeros((8, 8), bool)) == 0


def test_d1_d2_loop_oracle(rng):
    a, b = rng.uniform(0, 1, (32, 32)), rng.uniform(0, 1, (32, 32))
    mf, mp = _masks(rng)
    assert abs(float(loss_d1(_t(a), _t(b), mp)) - _loop_masked_mean(a, b, mp)) < 1e-9
    assert abs(float(loss_d2(_t(a), _t(b), mf, mp)) - _loop_masked_mean(a, b, mf & ~mp)) < 1e-9


def test_d2_trivial():
    mf = np.zeros((8, 8), bool)
    mf[2:6, 2:6] = True
    z = torch.zeros(8, 8, dtype=torch.float64)
    assert loss_d2(z, z + 0.7, mf, mf) == 0
    mp = np.zeros_like(mf)
    mp[3:5, 3:5] = True
    assert loss_d2(z, z + 1.0, mf, mp) == pytest.approx(1.0)


def test_d2_requires_subset():
    mf = np.zeros((8, 8), bool)
    mf[2:6, 2:6] = True
    mp = np.zeros_like(mf)
    mp[0, 0] = True
    with pytest.raises(DataError):
        loss_d2(torch.zeros(8, 8), torch.zeros(8, 8), mf, mp)


def test_loss_depth_arithmetic():
    cfg = LossConfig()
    assert loss_depth(0.5, 0.2, cfg) == pytest.approx(0.45)
    assert loss_depth(0.0, 0.3, cfg) == pytest.approx(0.3)
    assert loss_depth(1.0, 0.0, cfg) == 1.0
    assert loss_depth(0.5, 0.2, LossConfig(use_d1=False)) == pytest.approx(0.2)
    assert loss_depth(0.5, 0.2, LossConfig(use_d2=False)) == pytest.approx(0.25)


def test_per_pixel_square_mode(rng):
    a, b = rng.uniform(0, 1, (16, 16)), rng.uniform(0, 1, (16, 16))
    mf = np.ones((16, 16), bool)
    mp = np.zeros_like(mf)
    mp[4:12, 4:12] = True
    cfg = LossConfig(square_mode="per_pixel_square")
    got = float(detection_depth_loss(_t(a), _t(b), MaskPair(mp, mf), cfg))
    sq = ((a - b) ** 2)[mp].mean()
    ring = np.abs(a - b)[mf & ~mp].mean()
    assert got == pytest.approx(sq + ring)
    with pytest.raises(ValueError):
        loss_depth(0.1, 0.1, cfg)


@given(st.floats(0.01, 0.49))
def test_gradient_priority(v):
    l1 = torch.tensor(v, requires_grad=True)
    l2 = torch.tensor(v, requires_grad=True)
    loss_depth(l1, l2, LossConfig()).backward()
    assert l2.grad > l1.grad


def test_tv_constant_is_zero():
    assert loss_tv(torch.full((3, 5, 5), 0.3)) == 0


def test_tv_two_by_two_brute_force():
    p = np.array([[[0.0, 1.0], [0.0, 1.0]]])
    # pixel (0,0): sqrt(0 + 1); (0,1): 0; (1,0): sqrt(0 + 1); (1,1): 0  -> 2 / 4
    assert tv_value(p) == pytest.approx(0.5)
    assert float(loss_tv(_t(p))) == pytest.approx(0.5)


def test_tv_random_brute_force(rng):
    p = rng.uniform(0, 1, (3, 9, 7))
    assert float(loss_tv(_t(p))) == pytest.approx(tv_value(p), abs=1e-12)


def test_tv_checkerboard_exceeds_ramp():
    n = 8
    ramp = np.tile(np.linspace(0, 1, n), (n, 1))[None]
    checker = (np.indices((n, n)).sum(0) % 2).astype(float)[None]
    assert tv_value(checker) > tv_value(ramp)
    assert float(loss_tv(_t(checker))) > float(loss_tv(_t(ramp)))


@given(st.integers(0, 1000), st.floats(-1, 1))
def test_tv_offset_invariant(seed, c):
    p = np.random.default_rng(seed).uniform(0, 1, (3, 6, 6))
    assert float(loss_tv(_t(p + c))) == pytest.approx(float(loss_tv(_t(p))), abs=1e-12)


def test_tv_zero_iff_constant_per_channel():
    p = np.zeros((3, 4, 4))
    p[1] = 0.4
    p[2] = 0.9
    assert loss_tv(_t(p)) == 0
    p[2, 3, 3] = 0.8
    assert loss_tv(_t(p)) > 0


def test_tv_gradient_finite_at_flat_pixels():
    p = torch.full((3, 4, 4), 0.5, dtype=torch.float64, requires_grad=True)
    loss_tv(p).backward()
    assert torch.isfinite(p.grad).all()


def test_loss_total_arithmetic():
    p = torch.full((3, 4, 4), 0.5)
    assert float(loss_total([torch.tensor(0.4)], p, LossConfig(beta=0.0))) == pytest.approx(0.4)
    q = torch.as_tensor(np.random.default_rng(0).uniform(0, 1, (3, 4, 4)))
    assert float(loss_total([torch.tensor(0.4)], q, LossConfig(alpha=0.0))) == pytest.approx(1.5 * float(loss_tv(q)))
    # a 0.08 vertical edge crossing 4 rows of a 4x4 patch: L_tv = 4 * 0.08 / 16 = 0.02
    step = torch.zeros(3, 4, 4, dtype=torch.float64)
    step[0, :, 2:] = 0.08
    assert float(loss_tv(step)) == pytest.approx(0.02)
    assert float(loss_total([torch.tensor(0.4)], step, LossConfig())) == pytest.approx(0.43)
    assert float(loss_total([0.2, 0.6], p, LossConfig())) == pytest.approx(0.4)
    assert float(loss_total([0.4], p, LossConfig(use_tv=False))) == pytest.approx(0.4)
    with pytest.raises(DataError):
        loss_total([], p, LossConfig())


def test_depth_losses_ignore_outside_focus(rng):
    a, b = rng.uniform(0, 1, (32, 32)), rng.uniform(0, 1, (32, 32))
    mf, mp = _masks(rng)
    before = float(detection_depth_loss(_t(a), _t(b), MaskPair(mp, mf), LossConfig()))
    b2 = b.copy()
    b2[~mf] = rng.uniform(0, 1, (~mf).sum())
    after = float(detection_depth_loss(_t(a), _t(b2), MaskPair(mp, mf), LossConfig()))
    assert before == after


def test_config_validation():
    with pytest.raises(ConfigError):
        LossConfig(alpha=-1)
    with pytest.raises(ConfigError):
        LossConfig(square_mode="cube")
    with pytest.raises(ConfigError):
        LossConfig(use_d1=False, use_d2=False).check_attack()
    with pytest.raises(ConfigError):
        LossConfig.from_terms({"d3"})
    with pytest.raises(ConfigError):
        TargetDepthSpec(constant_value=2.0)
    cfg = LossConfig.from_terms({"d1", "tv"})
    assert cfg.use_d1 and not cfg.use_d2 and cfg.use_tv


def test_target_depth_modes():
    base = torch.full((4, 4), 0.6)
    assert torch.all(TargetDepthSpec().target(base) == 0)
    assert torch.allclose(TargetDepthSpec(mode="scaled_baseline", scale_factor=0.5).target(base), base * 0.5)
