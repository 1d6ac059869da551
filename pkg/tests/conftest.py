import sys
from pathlib import Path

import pytest
import torch
from hypothesis import HealthCheck, settings

sys.path.insert(0, str(Path(__file__).parent))

settings.register_profile(
    "default",
    deadline=None,
    max_examples=40,
    suppress_health_check=[HealthCheck.too_slow, HealthCheck.function_scoped_fixture],
)
settings.load_profile("default")

torch.set_num_threads(1)

ACCEPTANCE_LINES = []


@pytest.fixture
def toy_model():
    from promptic import TOY_CONFIG, PromptCodec

    torch.manual_seed(1234)
    return PromptCodec(**TOY_CONFIG).eval()


@pytest.fixture
def acceptance_report():
    """Record one pass/fail line per acceptance criterion; printed at the end of the run."""

    def report(number: int, name: str, passed: bool, detail: str = ""):
        line = f"criterion {number:2d} {'PASS' if passed else 'FAIL'}  {name}" + (f"  ({detail})" if detail else "")
        ACCEPTANCE_LINES.append(line)
        print(line)
        return passed

    return report


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(line)
