from importlib import resources
from pathlib import Path

import pytest

from specprobe.cobol import parse_file
from specprobe.graphs import extract

FIXTURES = Path(str(resources.files("specprobe").joinpath("data").joinpath("fixtures")))
PROGRAMS = ["calcdisc.cbl", "coadm01c.cbl", "coactupc.cbl", "thru.cbl"]


def load(name):
    return parse_file(FIXTURES / name, [FIXTURES])


@pytest.fixture(scope="session")
def fixtures_dir():
    return FIXTURES


@pytest.fixture(scope="session")
def programs():
    return {name: load(name) for name in PROGRAMS}


@pytest.fixture(scope="session")
def bundles(programs):
    return {name: extract(p) for name, p in programs.items()}


@pytest.fixture(scope="session")
def calcdisc(bundles):
    return bundles["calcdisc.cbl"]


@pytest.fixture(scope="session")
def calcdisc_spec():
    return (FIXTURES / "calcdisc_spec.md").read_text()


# criterion number -> (title, passed, detail); filled by test_acceptance
ACCEPTANCE: dict = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    tr = terminalreporter
    tr.section("acceptance criteria")
    for n in sorted(ACCEPTANCE):
        title, ok, detail = ACCEPTANCE[n]
        tr.write_line(f"[{'PASS' if ok else 'FAIL'}] {n:2d}. {title}: {detail}")
