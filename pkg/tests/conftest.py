import json
import os
import re

import pytest

from delaycert import cli
from delaycert import config as cfgmod
from delaycert.certio import load_certificate

from support import fixture_path

_CRITERIA = {}
_NAME = re.compile(r"test_criterion_(\d+)_(\w+)")


def pytest_runtest_logreport(report):
    m = _NAME.search(report.nodeid)
    if not m or "test_acceptance" not in report.nodeid:
        return
    if report.when == "call" or report.failed or report.skipped:
        n = int(m.group(1))
        ok = report.passed if report.when == "call" else False
        prev = _CRITERIA.get(n, (True, m.group(2)))
        _CRITERIA[n] = (prev[0] and ok, m.group(2))


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(_CRITERIA):
        ok, name = _CRITERIA[n]
        terminalreporter.write_line(f"criterion {n:2d} {'PASS' if ok else 'FAIL'}  {name.replace('_', ' ')}")


class ToyRun:
    def __init__(self, out_dir, exit_code):
        self.out_dir = out_dir
        self.exit_code = exit_code
        self.config_path = fixture_path("toy.toml")
        self.config = cfgmod.load(self.config_path)
        self.env = cfgmod.build_environment(self.config)
        self.file = load_certificate(self.path("certificate.json"))
        self.certificate = self.file.certificate
        with open(self.path("report.json")) as fh:
            self.report = json.load(fh)
        with open(self.path("cegis_log.jsonl")) as fh:
            self.log = [json.loads(line) for line in fh if line.strip()]

    def path(self, name):
        return os.path.join(self.out_dir, name)


@pytest.fixture(scope="session")
def toy_run(tmp_path_factory):
    """CEGIS on the shipped toy fixture, run once through the command line."""
    out = str(tmp_path_factory.mktemp("toy"))
    code = cli.main(["synthesize", "--config", fixture_path("toy.toml"), "--out-dir", out])
    return ToyRun(out, code)
