import numpy as np
import pytest
import torch
from hypothesis import settings

from depthpatch import AnalyticDepthModel, Detection, SceneSample, generate_synthetic_scenes

settings.register_profile("default", deadline=None, max_examples=40)
settings.load_profile("default")

torch.set_num_threads(1)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def small_split():
    return generate_synthetic_scenes(12, seed=3)


@pytest.fixture(scope="session")
def analytic():
    return AnalyticDepthModel().freeze()


def make_scene(boxes, h=64, w=64, seed=0, sid="s0"):
    rng = np.random.default_rng(seed)
    dets = [Detection(b, 0, 1.0) for b in boxes]
    return SceneSample(rng.uniform(0, 1, (h, w, 3)), dets, sid)


@pytest.fixture(scope="session")
def model_root(tmp_path_factory):
    return tmp_path_factory.mktemp("artifacts")


@pytest.fixture(scope="session")
def toy_model(model_root):
    """The default pretrained toy victim (built once per session and cached under ``model_root``)."""
    from depthpatch.cli import build_model
    from depthpatch.config import ModelConfig
    from depthpatch.scene_io import SceneSpec

    return build_model(ModelConfig(), root=model_root, scene_spec=SceneSpec())


def pytest_terminal_summary(terminalreporter):
    try:
        from test_acceptance import RESULTS
    except ImportError:
        return
    if RESULTS:
        terminalreporter.section("acceptance criteria")
        for n in sorted(RESULTS):
            terminalreporter.write_line(RESULTS[n])
