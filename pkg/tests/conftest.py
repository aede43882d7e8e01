import pytest
import torch

from breakdown_lab.model import ModelConfig, init_params
from breakdown_lab.tokenizer import SPECIAL_TOKENS, Vocab

torch.set_num_threads(1)

ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)


WORDS = ["hello", "world", "the", "cat", "sat", "on", "mat", "un", "##able", "dog", "run", "##ning"]


@pytest.fixture
def small_vocab():
    letters = [chr(c) for c in range(ord("a"), ord("z") + 1)]
    pieces = list(SPECIAL_TOKENS) + letters + ["##" + c for c in letters] + WORDS
    return Vocab(pieces)


@pytest.fixture
def tiny_cfg():
    return ModelConfig(vocab_size=64, max_len=16, hidden_dim=16, num_layers=2, num_heads=4, ffn_dim=32,
                       dropout_rate=0.0, seed=3)


@pytest.fixture
def tiny_model(tiny_cfg):
    return init_params(tiny_cfg)
