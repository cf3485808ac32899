import os
import sys
import time
from types import SimpleNamespace

import pytest

sys.path.insert(0, os.path.dirname(__file__))


@pytest.fixture(scope="session")
def desk():
    """Desk-scale base pretrained on both synthetic tasks, with its build time."""
    from peftkit.experiment import DeskConfig, pretrain_desk_base

    start = time.perf_counter()
    model = pretrain_desk_base(DeskConfig())
    return SimpleNamespace(model=model, seconds=time.perf_counter() - start)


def pytest_terminal_summary(terminalreporter):
    import acceptance_log

    if acceptance_log.LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(acceptance_log.LINES, key=lambda s: int(s.split("criterion ")[1].split(":")[0])):
            terminalreporter.write_line(line)
