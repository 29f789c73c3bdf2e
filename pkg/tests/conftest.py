import sys
import time
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))

DESK_CORPUS = 2000
DESK_EPOCHS = 50


@dataclass
class DeskVaeRun:
    vae: object
    losses: list
    held_out: np.ndarray
    seconds: float


@pytest.fixture(scope="session")
def desk_vae():
    """The desk-scale VAE pre-training run: 2000 renders, 10% held out, 50 epochs."""
    from pushgrasp import encoder as E

    start = time.perf_counter()
    corpus = E.generate_corpus(DESK_CORPUS, seed=0)
    split = DESK_CORPUS - DESK_CORPUS // 10
    result = E.train_vae(corpus[:split], DESK_EPOCHS)
    return DeskVaeRun(result.vae, result.losses, corpus[split:], time.perf_counter() - start)


VERDICTS: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if VERDICTS:
        terminalreporter.section("acceptance criteria")
        for line in VERDICTS:
            terminalreporter.write_line(line)
