import random
import sys

import pytest

from nmvariant.config import SystemConfig
from nmvariant.fleet import new_fleet
from nmvariant.tagging import TagKey


@pytest.fixture
def key():
    return TagKey(bytes(range(32)))


@pytest.fixture
def rng():
    return random.Random(1234)


@pytest.fixture
def make_fleet():
    def build(n=2, m=3, **kw):
        return new_fleet(SystemConfig(n=n, m=m, **kw))
    return build


def pytest_terminal_summary(terminalreporter):
    module = next((m for name, m in sys.modules.items() if name.endswith("test_acceptance")), None)
    lines = getattr(module, "RESULTS", [])
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in lines:
            terminalreporter.write_line(line)
