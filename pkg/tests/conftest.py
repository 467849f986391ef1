import sys

import numpy as np
import pytest

from flier.data import make_synthetic_dataset
from flier.diffusion import DiffusionConfig, build_cache, build_generator

TINY_DIFFUSION = DiffusionConfig(ae_steps=60, denoiser_epochs=6)


@pytest.fixture(scope="session")
def tiny_ds():
    return make_synthetic_dataset(3, per_class_train=20, per_class_test=8, seed=11, noise=0.3,
                                  per_class_pretrain=12)


@pytest.fixture(scope="session")
def tiny_gen(tiny_ds):
    ds = tiny_ds
    return build_generator(ds.images("pretrain"), ds.labels("pretrain"), ds.variants("pretrain"),
                           TINY_DIFFUSION, seed=5)


@pytest.fixture(scope="session")
def tiny_cache(tiny_gen, tiny_ds):
    return build_cache(tiny_gen, tiny_ds.n_classes, seed=100)


@pytest.fixture
def rng():
    return np.random.default_rng(0)


def pytest_terminal_summary(terminalreporter):
    mod = sys.modules.get("test_acceptance")
    lines = getattr(mod, "RESULTS", [])
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in lines:
            terminalreporter.write_line(line)
