import pytest
from hypothesis import HealthCheck, settings

from iovsim.nvme.commands import NvmeCommand
from iovsim.nvme.constants import IO_READ, IO_WRITE
from iovsim.platform import Platform, SsdConfig

settings.register_profile("ci", max_examples=60, deadline=None,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("ci")

SMALL_SSD = SsdConfig(capacity_bytes=1 << 30, cmb_bytes=64 << 20)


@pytest.fixture
def plat():
    """Untimed single-SSD platform: doorbells are serviced inline."""
    return Platform(1, ssd=SMALL_SSD, timed=False)


@pytest.fixture
def tplat():
    """Timed single-SSD platform."""
    return Platform(1, ssd=SMALL_SSD)


def io_cmd(op, slba, blocks, prp1, prp2=0, cid=0):
    return NvmeCommand.io(IO_WRITE if op == "write" else IO_READ, cid, 1, slba, blocks - 1,
                          prp1, prp2)


CRITERIA: dict[int, str] = {}


def pytest_terminal_summary(terminalreporter):
    if not CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(CRITERIA):
        terminalreporter.write_line(CRITERIA[n])
