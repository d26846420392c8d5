import sys
from pathlib import Path

import pytest

sys.path.insert(0, str(Path(__file__).parent))

from seqkv.toy_lm import ModelConfig, build_model  # noqa: E402

ACCEPTANCE_LINES: list[str] = []


@pytest.fixture(scope="session")
def model():
    return build_model(ModelConfig())


@pytest.fixture(scope="session")
def model4():
    return build_model(ModelConfig(vocab_size=4))


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
