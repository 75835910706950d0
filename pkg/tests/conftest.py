from __future__ import annotations

import os
from pathlib import Path

import pytest

from forge.db import TraceDb
from forge.trace import Backend, Command


class Workspace:
    """A scratch project directory with helpers for writing files and commands."""

    def __init__(self, root: Path) -> None:
        self.root = Path(os.path.realpath(root))

    def path(self, name: str) -> str:
        return str(self.root / name)

    def write(self, name: str, text: str | bytes) -> str:
        p = self.root / name
        p.parent.mkdir(parents=True, exist_ok=True)
        if isinstance(text, str):
            text = text.encode()
        p.write_bytes(text)
        return str(p)

    def read(self, name: str) -> str:
        return (self.root / name).read_text()

    def cmd(self, line: str | list[str], *, cacheable: bool = True, backend: Backend = Backend.MINILANG) -> Command:
        from forge.minilang import tokenize

        argv = tokenize(line) if isinstance(line, str) else line
        return Command.create(argv, str(self.root), env_fp="test", cacheable=cacheable, backend=backend)

    def db(self) -> TraceDb:
        return TraceDb(None)


@pytest.fixture
def ws(tmp_path: Path) -> Workspace:
    root = tmp_path / "proj"
    root.mkdir()
    return Workspace(root)


# -- acceptance summary ---------------------------------------------------------

_CRITERIA: dict[int, tuple[str, str]] = {}


def pytest_configure(config) -> None:
    config.addinivalue_line("markers", "criterion(n, text): acceptance criterion covered by the test")


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    marker = item.get_closest_marker("criterion")
    if marker is None or rep.when not in ("setup", "call"):
        return
    n, text = marker.args
    if rep.when == "call" or not rep.passed:
        _CRITERIA[n] = ("PASS" if rep.passed else "FAIL", text)


def pytest_terminal_summary(terminalreporter) -> None:
    if not _CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(_CRITERIA):
        verdict, text = _CRITERIA[n]
        terminalreporter.write_line(f"criterion {n:2d}: {verdict}  {text}")
