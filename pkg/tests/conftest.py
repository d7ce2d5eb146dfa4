import numpy as np
import pytest

from advflow.nn import ArchSpec, VelocityModel
from advflow.rl import ModelTriple
from advflow.rng import make_rng


@pytest.fixture
def rng():
    return make_rng(1234, "tests")


@pytest.fixture
def small_arch():
    return ArchSpec(2, (8, 8), 2)


@pytest.fixture
def triple(small_arch):
    return ModelTriple(*(VelocityModel.init(small_arch, (5, k)) for k in range(3)))


def constant_model(arch, value):
    """All weights zero, output bias ``value``: ``v`` is the same everywhere."""
    m = VelocityModel.zeros(arch)
    _, _, b_out = list(arch.layer_slices())[-1]
    p = m.params.copy()
    p[b_out] = value
    return m.with_params(p)


@pytest.fixture
def make_constant():
    return constant_model


def rel_err(a, b):
    a, b = np.asarray(a, float), np.asarray(b, float)
    return float(np.max(np.abs(a - b) / np.maximum(np.maximum(np.abs(a), np.abs(b)), 1e-12)))


@pytest.fixture(scope="session")
def pretrained_run(tmp_path_factory):
    """Default two-Gaussian pretraining run, shared by the slow tests."""
    from advflow.harness.config import RunConfig
    from advflow.harness.runs import pretrain

    out = tmp_path_factory.mktemp("pretrain")
    cfg = RunConfig.from_dict({"seed": 0, "output_dir": str(out)}, env=False)
    model, summary = pretrain(cfg)
    return cfg, model, summary
