import numpy as np
import pytest

from rmdino.config import RunConfig
from rmdino.data import gen_synth

ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def tiny_cfg():
    """A model small enough for per-test training steps."""
    return RunConfig.desk(img_size_global=16, img_size_local=8, patch_size=4, embed_dim=12,
                          depth=1, heads=2, head_hidden=16, head_bottleneck=8, out_dim=8,
                          batch_size=2, epochs=1, local_crops=2)


@pytest.fixture(scope="session")
def synth_root(tmp_path_factory):
    return gen_synth(tmp_path_factory.mktemp("synth"), num_classes=4, per_class=12, img_size=32, seed=0)
