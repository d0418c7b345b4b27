import re

import numpy as np
import pytest
import torch

from pwmface.data import SyntheticDataset, gen_dataset
from pwmface.face_model import make_toy_asset


@pytest.fixture(scope="session")
def asset():
    return make_toy_asset()


@pytest.fixture(scope="session")
def small_dataset_dir(tmp_path_factory):
    root = tmp_path_factory.mktemp("small_ds")
    gen_dataset(root, seed=3, n_identities=5, frames_per_identity=4, resolution=32)
    return root


@pytest.fixture(scope="session")
def small_dataset(small_dataset_dir):
    return SyntheticDataset(small_dataset_dir, holdout_identities=2)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def f64(*shape, seed=0, scale=1.0):
    g = torch.Generator().manual_seed(seed)
    return (torch.randn(*shape, generator=g, dtype=torch.float64) * scale).requires_grad_(True)


# -- acceptance report -------------------------------------------------------

ACCEPTANCE_TITLES = {
    1: "gradient suite",
    2: "rasterizer oracle",
    3: "guidance identities",
    4: "LBS oracle",
    5: "loss identities",
    6: "toy training run",
    7: "PWM vs single-scale ablation",
    8: "guidance mode coverage",
    9: "determinism",
}
_ACCEPTANCE = {}
_STARTED = set()


@pytest.fixture
def acceptance():
    """``acceptance(n, ok, detail)`` records the outcome of criterion ``n`` and returns ``ok``."""
    def record(n, ok, detail=""):
        _ACCEPTANCE[n] = (bool(ok), detail)
        print(f"[{'PASS' if ok else 'FAIL'}] criterion {n}: {ACCEPTANCE_TITLES[n]} {detail}")
        return ok
    return record


def pytest_runtest_logreport(report):
    match = re.search(r"test_criterion_(\d+)_", report.nodeid)
    if match and report.when == "call":
        _STARTED.add(int(match.group(1)))


def pytest_terminal_summary(terminalreporter):
    if not _STARTED:
        return
    terminalreporter.section("acceptance criteria")
    for n, title in ACCEPTANCE_TITLES.items():
        if n in _ACCEPTANCE:
            ok, detail = _ACCEPTANCE[n]
            status = "PASS" if ok else "FAIL"
        elif n in _STARTED:
            status, detail = "FAIL", "(raised before reporting)"
        else:
            status, detail = "NOT RUN", "(deselected)"
        terminalreporter.write_line(f"[{status}] {n}. {title}: {detail}")
