import numpy as np
import pytest

from ifladder.data import load_digits, synth_blobs
from ifladder.model import MLP, MlpConfig


def random_fixture(seed: int, depth: int, width: int, n: int = 12, input_dim: int = 5, classes: int = 4):
    """Small random MLP with random inputs and labels."""
    gen = np.random.default_rng(seed)
    cfg = MlpConfig.uniform(depth, width, input_dim, classes)
    model = MLP(cfg)
    theta = model.init_params(seed) + 0.1 * gen.standard_normal(model.dim)
    X = gen.standard_normal((n, input_dim))
    y = gen.integers(0, classes, n)
    return model, theta, X, y


def random_sym(gen, n: int, rank: int | None = None) -> np.ndarray:
    rank = n if rank is None else rank
    b = gen.standard_normal((n, rank))
    return b @ b.T if rank < n else 0.5 * (b + b.T)


@pytest.fixture(scope="session")
def digits():
    return load_digits()


@pytest.fixture(scope="session")
def blobs():
    return synth_blobs(60, 3, 4, 0)


ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[2].rstrip(":"))):
            terminalreporter.write_line(line)
