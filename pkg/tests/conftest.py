import numpy as np
import pytest

from probegen.datasets import synthetic_digits
from probegen.zoo import CnnHyperGrid, InrFitConfig, generate_cnn_zoo, generate_inr_zoo


@pytest.fixture(scope="session")
def small_inr_zoo():
    """60 quickly fitted INRs on 12x12 glyphs."""
    ds = synthetic_digits(60, 12, seed=1)
    return generate_inr_zoo(ds, 60, InrFitConfig(steps=60, lr=3e-3, chunk=60), seed=1)


@pytest.fixture(scope="session")
def small_cnn_zoo():
    """12 tiny CNNs on 8x8 glyphs."""
    ds = synthetic_digits(300, 8, seed=2)
    train, test = ds.train_test_split(0.25, 2)
    grid = CnnHyperGrid(depth=(3, 3), channels=(4, 6), epochs=(1, 2))
    return generate_cnn_zoo(train, test, 12, grid, seed=2)


@pytest.fixture
def rng():
    return np.random.default_rng(0)


def pytest_terminal_summary(terminalreporter):
    mod = __import__("sys").modules.get("test_acceptance")
    lines = getattr(mod, "LINES", [])
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in sorted(lines, key=lambda l: int(l.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)
