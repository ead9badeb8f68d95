import numpy as np
import pytest

from posquery.model import Denoiser, ModelConfig
from posquery.trainer import TrainConfig

TINY_MODEL = dict(image_size=16, patch_size=4, channels=3, dim=32, enc_depth=1, dec_depth=1, heads=2)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def tiny_cfg():
    return ModelConfig(**TINY_MODEL)


@pytest.fixture
def tiny_model(tiny_cfg):
    return Denoiser(tiny_cfg).init_params(np.random.default_rng(0), zero_head=False)


@pytest.fixture
def tiny_train_cfg():
    return TrainConfig(iterations=4, batch_size=2, learning_rate=1e-3, T=20, **TINY_MODEL)


ACCEPTANCE_LINES = []


def record_criterion(number, title, ok, detail):
    ACCEPTANCE_LINES.append((number, f"{'PASS' if ok else 'FAIL'} criterion {number}: {title} ({detail})"))
    return ok


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for _, line in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(line)
