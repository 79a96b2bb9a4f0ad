from __future__ import annotations

import pytest

from trackselect.selector import SelectorConfig
from trackselect.synth import SynthConfig, generate_synthetic
from trackselect.trainer import TrainConfig


def tiny_synth(**kw) -> SynthConfig:
    base = dict(scenes=3, objects=4, frames=16, dim=16, text_dim=8, n_background=4)
    base.update(kw)
    return SynthConfig(**base)


def tiny_selector(**kw) -> SelectorConfig:
    base = dict(dim=16, text_dim=8, layers=1, heads=4)
    base.update(kw)
    return SelectorConfig(**base)


def tiny_train(**kw) -> TrainConfig:
    base = dict(epochs=4, lr_init=1e-3, n_neg=4, align_warmup_epochs=1)
    base.update(kw)
    return TrainConfig(**base)


@pytest.fixture(scope="session")
def tiny_corpus():
    return generate_synthetic(tiny_synth(), seed=0)


# one line per acceptance criterion, echoed in the terminal summary
ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)
