import numpy as np
import pytest
import torch

from facediff import synthetic
from facediff.mesh_repr import RigSpec

torch.set_num_threads(1)


@pytest.fixture(scope="session")
def dataset():
    return synthetic.generate(synthetic.SyntheticConfig())


@pytest.fixture(scope="session")
def small_dataset():
    return synthetic.generate(synthetic.SyntheticConfig(num_subjects=2, utterances_per_subject=2, num_frames=12))


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def toy_rig(num_vertices=6, pivot=(0.0, 0.0, 0.0), lips=(0, 1)):
    mask = np.zeros(num_vertices, bool)
    mask[list(lips)] = True
    return RigSpec(np.asarray(pivot, float), mask)


def pytest_terminal_summary(terminalreporter):
    try:
        from test_acceptance import ACCEPTANCE_RESULTS
    except ImportError:
        return
    if ACCEPTANCE_RESULTS:
        terminalreporter.section("acceptance criteria")
        for number in sorted(ACCEPTANCE_RESULTS):
            terminalreporter.write_line(ACCEPTANCE_RESULTS[number])
