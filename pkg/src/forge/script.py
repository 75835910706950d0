"""Parser for build script files.

One command per line.  ``#`` starts a comment line and blank lines are
ignored.  A line may be prefixed with ``~`` (never use the shared cache)
and/or ``!`` (run as an OS process, split with shell quoting rules).
``par{`` on its own line opens a parallel group that ``}`` closes.
"""

from __future__ import annotations

import shlex
from typing import Callable, Sequence

from .minilang import MiniLangError, tokenize
from .trace import Backend, Command


class ScriptSyntaxError(ValueError):
    def __init__(self, lineno: int, message: str) -> None:
        super().__init__(f"line {lineno}: {message}")
        self.lineno = lineno


MakeCommand = Callable[..., Command]


def parse_line(line: str) -> tuple[list[str], Backend, bool]:
    """Split one command line into (argv, backend, cacheable)."""
    cacheable = True
    backend = Backend.MINILANG
    text = line.strip()
    while text[:1] in ("~", "!"):
        if text[0] == "~":
            cacheable = False
        else:
            backend = Backend.OS
        text = text[1:].lstrip()
    argv = shlex.split(text) if backend is Backend.OS else tokenize(text)
    return argv, backend, cacheable


def parse_script(text: str, make: MakeCommand) -> list[Command | list[Command]]:
    """Parse a script into steps; ``make(argv, backend=, cacheable=)`` builds commands."""
    steps: list[Command | list[Command]] = []
    group: list[Command] | None = None
    opened = 0
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        if line == "par{":
            if group is not None:
                raise ScriptSyntaxError(lineno, "parallel groups do not nest")
            group, opened = [], lineno
            continue
        if line == "}":
            if group is None:
                raise ScriptSyntaxError(lineno, "'}' without 'par{'")
            if group:
                steps.append(group)
            group = None
            continue
        try:
            argv, backend, cacheable = parse_line(line)
        except (MiniLangError, ValueError) as e:
            raise ScriptSyntaxError(lineno, str(e)) from None
        if not argv:
            raise ScriptSyntaxError(lineno, "empty command")
        cmd = make(argv, backend=backend, cacheable=cacheable)
        if group is not None:
            group.append(cmd)
        else:
            steps.append(cmd)
    if group is not None:
        raise ScriptSyntaxError(opened, "unclosed 'par{'")
    return steps


def flatten(steps: Sequence[Command | Sequence[Command]]) -> list[Command]:
    out: list[Command] = []
    for s in steps:
        out.extend([s] if isinstance(s, Command) else s)
    return out
