from __future__ import annotations

import numpy as np
import pytest

from subgoal_planner.config import ModelConfig
from subgoal_planner.dataset import CorpusConfig, generate_corpus
from subgoal_planner.vocab import TextVocab


def tiny_config(**overrides) -> ModelConfig:
    base = dict(d=16, heads=2, max_len=8, depth_visual=1, depth_text=1, text_vocab_size=0)
    base.update(overrides)
    return ModelConfig(**base)


@pytest.fixture(scope="session")
def small_corpus():
    """4 scenes (1 unseen), 6 episodes each, 1 valid_seen per seen scene."""
    return generate_corpus(CorpusConfig(n_scenes=4, n_unseen=1, episodes_per_scene=6, valid_seen_per_scene=1, seed=3))


@pytest.fixture(scope="session")
def small_vocab(small_corpus):
    return TextVocab.build(e.instruction for e in small_corpus)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


ACCEPTANCE_LINES: list[str] = []


@pytest.fixture
def verdict():
    """Record one pass/fail line per acceptance criterion; printed in the terminal summary."""

    def record(number: int, ok: bool, detail: str) -> bool:
        ACCEPTANCE_LINES.append(f"criterion {number:>2}: {'PASS' if ok else 'FAIL'}  {detail}")
        print(ACCEPTANCE_LINES[-1])
        return ok

    return record


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(line)
