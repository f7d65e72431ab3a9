import math

import numpy as np
import pytest

from avejca.config import RunConfig

ACCEPTANCE_LINES: list[str] = []


def toy_config(**overrides) -> RunConfig:
    values = dict(
        N=4, d_a=8, d_v=8, k=4, depth=2, fusion_strategy="concatenation+fc", class_count=3,
        audio_dim=6, visual_positions=4, visual_channels=6, joint_hidden=4, mlp_hidden=[8, 8],
        epochs=2, batch_size=4, seed=0,
    )
    values.update(overrides)
    return RunConfig(**values).validate()


def central_difference(f, x: np.ndarray, h: float = 1e-5) -> np.ndarray:
    """Plain numpy central differences of scalar f at x (independent of the tape)."""
    g = np.zeros_like(x)
    flat, gflat = x.reshape(-1), g.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        fp = f(x)
        flat[i] = orig - h
        fm = f(x)
        flat[i] = orig
        gflat[i] = (fp - fm) / (2 * h)
    return g


def direct_mlsm(x: np.ndarray, y: np.ndarray) -> float:
    """Straight transcription of the per-class soft-margin formula, one scalar at a time."""
    total = 0.0
    rows = x.reshape(-1, x.shape[-1]), y.reshape(-1, y.shape[-1])
    for row_x, row_y in zip(*rows):
        acc = 0.0
        for xc, yc in zip(row_x, row_y):
            acc += yc * math.log(1 / (1 + math.exp(-xc))) + (1 - yc) * math.log(1 / (1 + math.exp(xc)))
        total += -acc / len(row_x)
    return total / len(rows[0])


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
