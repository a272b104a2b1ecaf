import numpy as np
import pytest

from lorakit.config import ModelConfig
from lorakit.model import PRETRAIN_HYPER, TransformerModel, pretrain
from lorakit.tasks import copy_corpus, reverse_task


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def toy_config():
    return ModelConfig()


@pytest.fixture
def small_config():
    return ModelConfig(n_layers=2, d_model=16, n_heads=2, vocab_size=32, max_seq_len=24)


@pytest.fixture
def small_model(small_config):
    return TransformerModel.init(small_config, seed=3)


@pytest.fixture(scope="session")
def pretrained_toy():
    """Toy base model pretrained on the copy corpus; shared across the session."""
    cfg = ModelConfig()
    return pretrain(cfg, copy_corpus(2000, cfg.vocab_size, seed=1), PRETRAIN_HYPER)


@pytest.fixture(scope="session")
def reverse_data():
    train = reverse_task(2000, 64, noise=0.1, seed=2)
    test = reverse_task(1000, 64, noise=0.1, seed=3)
    return train, test


ACCEPTANCE_LINES: list[str] = []


def record_criterion(number: int, ok: bool, detail: str) -> None:
    line = f"[{'PASS' if ok else 'FAIL'}] criterion {number:>2}: {detail}"
    ACCEPTANCE_LINES.append(line)
    print(line)


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
