import numpy as np
import pytest

from cueing.data import SynthSpec, synth_dataset
from cueing.model import CueingModel, ModelConfig

SMALL = ModelConfig(tokens=16, width=64, height=64, pool_h=4, pool_w=4)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def small_dataset(tmp_path_factory):
    root = tmp_path_factory.mktemp("synth")
    spec = SynthSpec(n_frames=4, width=64, height=64, align=4, block=2, seed=3, distractor_blob_prob=0.5)
    return synth_dataset(spec, root)


@pytest.fixture
def small_model():
    return CueingModel.init(SMALL, seed=0)


# one line per acceptance criterion, printed after the run
ACCEPTANCE_LINES = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda l: int(l.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)
