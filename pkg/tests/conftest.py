import numpy as np
import pytest
import torch

from camadv.config import ExperimentConfig
from camadv.data import SyntheticSpec, generate_synthetic

torch.set_num_threads(1)


@pytest.fixture
def rng():
    return np.random.default_rng(0)


@pytest.fixture(scope="session")
def small_synthetic():
    """(target_train, gallery, query) with 8 well separated ids on 3 cameras."""
    return generate_synthetic(SyntheticSpec(num_identities=8, num_cameras=3, samples_per_id=8, id_dim=8, seed=3))


@pytest.fixture
def toy_config():
    """The toy preset shrunk to a few seconds of training."""
    return ExperimentConfig.preset(
        "toy",
        epochs=2,
        iterations_per_epoch=5,
        **{
            "synth.num_identities": 10,
            "synth.samples_per_id": 8,
            "disc.hidden": 32,
            "pretrain.steps": 20,
        },
    )


def pytest_terminal_summary(terminalreporter):
    from tests import test_acceptance

    if test_acceptance.RESULTS:
        terminalreporter.section("acceptance criteria")
        for line in test_acceptance.RESULTS:
            terminalreporter.write_line(line)
