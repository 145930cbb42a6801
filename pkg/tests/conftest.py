import numpy as np
import pytest

from snet import data as D
from snet import model as M
from snet import train as TR


class OverfitRun:
    """500 SGD steps at lr 0.05 on one synthetic sample, toy-scale network."""

    def __init__(self, steps=500):
        ds = D.synth_dataset(D.SynthSpec(), 1, 0.0)
        self.images, self.labels = ds.arrays([0])
        self.model = M.build(M.NetworkConfig(dtype="float32"), 0)
        opt = TR.OptimState(0.05)
        self.loss, self.parts = [], []
        for _ in range(steps):
            value, parts = TR.train_step(self.model, opt, self.images, self.labels)
            self.loss.append(value)
            self.parts.append(parts)
        self.loss = np.array(self.loss)


@pytest.fixture(scope="session")
def overfit_run():
    return OverfitRun()


ACCEPTANCE_LINES = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(line)
