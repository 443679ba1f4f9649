from __future__ import annotations

import sys
from pathlib import Path

import pytest
from hypothesis import settings

sys.path.insert(0, str(Path(__file__).parent))

settings.register_profile("default", deadline=None, max_examples=60)
settings.load_profile("default")

# acceptance results, printed once at the end of the run
ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)


@pytest.fixture
def fixture_dir(tmp_path):
    """Factory writing a synthetic scene and returning ``(dir, expected)``."""
    from gsremoval.fixtures import gen_fixture

    def make(name="scene", **spec):
        out = tmp_path / name
        return out, gen_fixture(spec, out)

    return make
