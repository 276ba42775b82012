import os
import sys

import pytest

sys.path.insert(0, os.path.dirname(__file__))

from invarilab.paradigm import ExperimentConfig, prepare_experiment, train_experiment  # noqa: E402


def tiny_config(**kw):
    base = dict(dataset={"synthetic": {"category_count": 4, "samples_per_category": 100, "image_size": 24, "seed": 0}},
                transform="gaussian-blur:1.5", num_seen=2, seed=0, epochs=12, lr=0.03)
    base.update(kw)
    return ExperimentConfig(**base)


@pytest.fixture(scope="session")
def tiny_run():
    """A small trained blur experiment shared by analysis and report tests."""
    cfg = tiny_config()
    data = prepare_experiment(cfg)
    model, stats = train_experiment(cfg, data)
    return cfg, data, model, stats


# one line per acceptance criterion, filled in by test_acceptance.py
ACCEPTANCE_LINES: dict[int, str] = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE_LINES:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(ACCEPTANCE_LINES):
        terminalreporter.write_line(ACCEPTANCE_LINES[n])
