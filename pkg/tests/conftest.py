import sys
from pathlib import Path

import pytest

sys.path.insert(0, str(Path(__file__).parent))

from salm.config import TrainConfig  # noqa: E402
from salm.phantom import PhantomSpec, generate_phantom  # noqa: E402


def tiny_config(**changes):
    base = dict(d=4, encoder_widths=[4, 8, 8, 16], m=16, attn_hidden=8, unified_size=16,
                patch_sizes=[16, 8], T=2, coarse_levels=2, epochs=2, seed=0)
    base.update(changes)
    return TrainConfig(**base)


TINY_SPEC = PhantomSpec(dims=(32, 32, 24), n_landmarks=2, seed=7)


@pytest.fixture(scope="session")
def tiny_data():
    return [generate_phantom(TINY_SPEC, i) for i in range(2)]


# one line per acceptance criterion, filled in by test_acceptance.py
ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
