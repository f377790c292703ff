import os

import numpy as np
import pytest

from memenc.backbone import BackboneConfig


@pytest.fixture(autouse=True, scope="session")
def _isolated_cache(tmp_path_factory):
    # one token cache for the whole session, kept out of the user's environment
    old = os.environ.get("MEMENC_CACHE_DIR")
    os.environ["MEMENC_CACHE_DIR"] = str(tmp_path_factory.mktemp("token-cache"))
    yield
    if old is None:
        os.environ.pop("MEMENC_CACHE_DIR", None)
    else:
        os.environ["MEMENC_CACHE_DIR"] = old


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def small_cfg():
    return BackboneConfig(image_size=16, patch_size=4, depth=4, width=16, heads=2, tap_layers=(1, 2, 3, 4))


@pytest.fixture
def images(rng):
    return rng.uniform(0.0, 1.0, size=(3, 16, 16, 3))


TINY_BACKBONE = {"width": 16, "heads": 2, "depth": 4, "tap_layers": [1, 2, 3, 4]}


def tiny_spec(**kw):
    from memenc.synthgen import GeneratorSpec

    base = dict(n_voxels=48, n_runs=6, trials_per_run=40, runs_per_session=3, repeat_fraction=0.1, t_mem=12,
                replay_period=4, backbone=TINY_BACKBONE, seed=3)
    base.update(kw)
    return GeneratorSpec(**base)


@pytest.fixture(scope="session")
def tiny_ds():
    from memenc.synthgen import generate

    return generate(tiny_spec())


def tiny_model_config(ds, **memory):
    from memenc.backbone import BackboneConfig
    from memenc.heads import HeadsConfig
    from memenc.memory import MemoryConfig
    from memenc.model import ModelConfig

    return ModelConfig(backbone=BackboneConfig(**ds.spec.backbone_config_dict()), heads=HeadsConfig(d=8),
                       memory=MemoryConfig(**{"t_mem": ds.spec.t_mem, "d_m": 8, **memory}))


def pytest_terminal_summary(terminalreporter):
    import sys

    mod = sys.modules.get("test_acceptance")
    lines = getattr(mod, "RESULTS", [])
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in lines:
            terminalreporter.write_line(line)
