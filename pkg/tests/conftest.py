"""Shared fixtures, plus collection of the acceptance verdicts that are repeated at the end of the run."""

import json
import time
from importlib import resources

import pytest

from vlhmm import cli

ACCEPTANCE_LINES: list[str] = []
DESK_CONFIG = resources.files("vlhmm") / "configs" / "desk_six_leaf.json"


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)


@pytest.fixture(scope="session")
def desk_run(tmp_path_factory):
    """One run of the shipped six-leaf study, shared by every test that inspects it."""
    out = tmp_path_factory.mktemp("desk") / "run1"
    start = time.perf_counter()
    status = cli.main(["experiment", str(DESK_CONFIG), "--out", str(out), "--jobs", "1"])
    return out, status, time.perf_counter() - start


def desk_cells(out):
    """Summary cells of a study run, keyed by ``(n, penalty label)``."""
    summary = json.loads((out / "summary.json").read_text())
    return {(c["n"], c["penalty"]): c for c in summary["recovery_rate_by_cell"]}
