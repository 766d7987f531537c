import numpy as np
import pytest

from rsdpt.corpus import Dialog
from rsdpt.encoder import Encoder, EncoderConfig
from rsdpt.tokenizer import Tokenizer, build_vocab

# filled by tests/test_acceptance.py, printed at the end of the session
ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)


DIALOGS = [
    Dialog("d0", ["how do i install cuda", "sudo apt-get install cuda", "thanks that worked"]),
    Dialog("d1", ["my wifi is down", "restart network manager", "still down", "check the driver"]),
    Dialog("d2", ["which python version", "python3 is the default"]),
    Dialog("d3", ["grub fails to load", "reinstall grub from a live usb", "ok will try"]),
]


@pytest.fixture
def dialogs():
    return list(DIALOGS)


@pytest.fixture
def vocab():
    return build_vocab(DIALOGS, 200)


@pytest.fixture
def tokenizer(vocab):
    return Tokenizer(vocab, max_context_len=24, max_response_len=8)


@pytest.fixture
def tiny_model(vocab):
    cfg = EncoderConfig(
        num_layers=2, hidden_size=16, num_heads=2, ff_size=32, vocab_size=len(vocab), max_positions=32, dropout_rate=0.1
    )
    return Encoder(cfg, seed=0)


@pytest.fixture
def rng():
    return np.random.default_rng(0)
