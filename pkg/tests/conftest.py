import os

# single-threaded BLAS keeps float reductions in a fixed order
for _var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS"):
    os.environ.setdefault(_var, "1")

import numpy as np
import pytest

from raterseg.nets import ArchConfig, init_params
from raterseg.synthetic import DatasetManifest, generate_dataset
from raterseg.trainer import TrainConfig, train_joint

TINY_ARCH = ArchConfig(height=16, width=16, base_width=4)


@pytest.fixture(scope="session")
def tiny_data():
    """Four 16x16 samples with seven raters: the overfit harness."""
    m = DatasetManifest(n_train=4, n_val=2, n_test=1, height=16, width=16, blur_sigma=1.0)
    return m, generate_dataset(m)


@pytest.fixture(scope="session")
def harness_data():
    """The same four images with all seven raters in agreement.

    Optimisation checks (loss falls tenfold, reconstruction memorised) need a
    target the model can fit exactly; with disagreeing raters the CE floor is
    the entropy of the rater average.
    """
    m = DatasetManifest(n_train=4, n_val=2, n_test=1, height=16, width=16, blur_sigma=1.0,
                        threshold_spread=0.0, max_radius=0)
    return m, generate_dataset(m)


HARNESS_CFG = TrainConfig(epochs=300, batch_size=1, seed=0, lr=3e-3)


@pytest.fixture(scope="session")
def overfit_joint(harness_data):
    _, data = harness_data
    return train_joint(init_params(TINY_ARCH, 0), data["train"], HARNESS_CFG)


@pytest.fixture(scope="session")
def ambiguous_joint(tiny_data):
    _, data = tiny_data
    return train_joint(init_params(TINY_ARCH, 0), data["train"], HARNESS_CFG)


def smooth(values, width=10):
    values = np.asarray(values, dtype=float)
    return np.convolve(values, np.ones(width) / width, mode="valid")


ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
