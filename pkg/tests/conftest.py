import numpy as np
import pytest

from mcnet.config import desk_config


@pytest.fixture
def rng():
    return np.random.default_rng(0)


def tiny_run_config(**overrides):
    """Smallest config that still exercises every block (32x32 images, 2 levels)."""
    base = dict(
        model__image_size="32", model__motion_size="16", model__levels="2", model__base_channels="4",
        model__keypoints="3", model__memory__c="4", model__memory__h="4", model__memory__w="4",
        model__kp_block="4", model__kp_depth="2", model__motion_block="4", model__motion_depth="2",
        model__max_channels="8", train__batch="2", train__log_every="0", train__ckpt_every="0",
    )
    base.update(overrides)
    return desk_config(**base)


@pytest.fixture
def tiny_config():
    return tiny_run_config()


@pytest.fixture(scope="session")
def tiny_dataset(tmp_path_factory):
    from mcnet.data import write_dataset

    root = tmp_path_factory.mktemp("tiny_data")
    return write_dataset(root, sequences=3, frames=4, size=32, seed=5)


# acceptance criteria report: one line per criterion, printed after the run
CRITERIA: dict[int, tuple[str, bool, str]] = {}


def pytest_terminal_summary(terminalreporter):
    if not CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(CRITERIA):
        name, ok, detail = CRITERIA[n]
        terminalreporter.write_line(f"criterion {n} {'PASS' if ok else 'FAIL'}: {name} ({detail})")
