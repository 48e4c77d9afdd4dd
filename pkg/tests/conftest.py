import numpy as np
import pytest
from threadpoolctl import threadpool_limits

from bcmb.cli import load_config_source, model_config
from bcmb.model import EncoderModel, ModelConfig
from bcmb.tokenizer import N_SPECIALS

# acceptance tests append (criterion, passed, detail); printed in the summary
ACCEPTANCE_LINES: list[tuple[str, bool, str]] = []


@pytest.fixture(scope="session", autouse=True)
def single_thread():
    with threadpool_limits(limits=1):
        yield


@pytest.fixture(scope="session")
def tiny_preset() -> dict:
    return load_config_source("preset-tiny")


@pytest.fixture(scope="session")
def tiny_config(tiny_preset) -> ModelConfig:
    return model_config(tiny_preset, tiny_preset["tokenizer"]["vocab_size"])


@pytest.fixture
def small_model() -> EncoderModel:
    cfg = ModelConfig(n_layers=2, d_model=32, n_heads=4, d_ff=64, vocab_size=40, max_seq_len=64, window=8, dropout=0.0)
    return EncoderModel.init(cfg, seed=3)


def random_docs(rng: np.random.Generator, n: int, lo: int, hi: int, vocab_size: int) -> list[np.ndarray]:
    return [rng.integers(N_SPECIALS, vocab_size, size=int(rng.integers(lo, hi + 1))) for _ in range(n)]


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE_LINES:
        return
    terminalreporter.section("acceptance criteria")
    for name, ok, detail in ACCEPTANCE_LINES:
        terminalreporter.write_line(f"{'PASS' if ok else 'FAIL'}  {name}: {detail}")
