import numpy as np
import pytest

from dpm import data
from dpm.config import RunConfig
from dpm.numeric import precision


@pytest.fixture
def f64():
    with precision(np.float64):
        yield


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


# a model small enough that a training iteration takes a few milliseconds
TINY = {
    "image_h": 16, "image_w": 8, "patch": 4, "stride": 4, "dim": 8, "depth": 2, "heads": 2, "mlp_ratio": 2,
    "cameras": 2, "hmg_gate": [1, 2], "hmg_hidden": 4, "num_identities": 4, "images_per_identity": 7,
    "query_per_identity": 1, "gallery_per_identity": 2, "ids_per_batch": 2, "instances_per_id": 3,
    "iterations": 5, "diag_samples": 4,
}


@pytest.fixture
def tiny_cfg():
    return RunConfig().replace(**TINY)


@pytest.fixture
def tiny_data(tiny_cfg):
    return data.generate(tiny_cfg.data)


# one line per acceptance criterion, echoed in the terminal summary
ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
