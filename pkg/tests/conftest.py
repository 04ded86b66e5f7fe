from __future__ import annotations

import json
from pathlib import Path

import pytest

from lifetraj.context import load_examples
from lifetraj.model import ModelConfig

MINI = Path(__file__).parent / "fixtures" / "mini"

TINY = dict(
    d=16, k1=40, k2=2, k3=8, conv_channels=4,
    bert_layers=1, bert_heads=2, bert_intermediate=32, vocab_size=512,
    max_seq_len=128, batch_size=8, seed=42,
)


def tiny_config(**changes) -> ModelConfig:
    return ModelConfig(**{**TINY, **changes})


def read_jsonl(path):
    with open(path, encoding="utf-8") as fh:
        return [json.loads(line) for line in fh if line.strip()]


@pytest.fixture(scope="session")
def mini_dir() -> Path:
    return MINI


@pytest.fixture(scope="session")
def labeled_pool():
    return load_examples(MINI / "labeled.jsonl")


@pytest.fixture(scope="session")
def unlabeled_pool():
    return load_examples(MINI / "labeled.jsonl", "unlabeled")


@pytest.fixture(scope="session")
def toy_set(labeled_pool):
    """50 labelled examples: every negative plus the first positives."""
    neg = [e for e in labeled_pool if e.label == 0]
    pos = [e for e in labeled_pool if e.label == 1]
    return neg + pos[: 50 - len(neg)]


# One line per acceptance criterion, printed after the run.
ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.write_sep("=", "acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
