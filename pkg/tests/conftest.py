from pathlib import Path

import numpy as np
import pytest

from irflow.graph import graph_from_ir
from irflow.ir import normalize_values, parse_module
from irflow.pretrain import TrainConfig, new_state
from irflow.tokenizer import train_bpe

FIXTURES = Path(__file__).parent / "fixtures"

# Criterion lines collected by the acceptance tests, echoed in the terminal summary.
ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(line)


@pytest.fixture(scope="session")
def callpair_text() -> str:
    return (FIXTURES / "callpair.ll").read_text()


@pytest.fixture(scope="session")
def callpair_graph(callpair_text):
    return graph_from_ir(callpair_text)


@pytest.fixture(scope="session")
def callpair_rename(callpair_text):
    return normalize_values(parse_module(callpair_text))[1]


@pytest.fixture(scope="session")
def small_tokenizer(callpair_graph):
    return train_bpe([n.text for n in callpair_graph.bb_nodes], 80)


@pytest.fixture
def tiny_state(callpair_graph, small_tokenizer):
    return new_state([callpair_graph], small_tokenizer, TrainConfig.tiny(batch_size=2))


@pytest.fixture
def rng():
    return np.random.default_rng(0)
