"""Commands, traces and the tracer contract.

A tracer runs a :class:`Command` and, once it has terminated, reports the
files it read, wrote, deleted or merely probed.  :func:`finalize_trace`
turns that report into a :class:`Trace` of content hashes.

Execution is split into two phases (:class:`Execution`): ``read`` samples
inputs and ``commit`` applies outputs and returns the report.  The threaded
scheduler runs both back to back; the scripted scheduler places them at the
start and finish events of an interleaving plan.
"""

from __future__ import annotations

import fnmatch
import json
import os
import time
from dataclasses import dataclass, field
from enum import Enum
from typing import Iterable, Mapping, Protocol, Sequence

from .fsutil import MISSING, SubstTable, canonicalize, hash_bytes, hash_file

DEFAULT_ENV_ALLOWLIST = ("PATH",)


class Backend(str, Enum):
    MINILANG = "minilang"
    OS = "os"


class TraceError(RuntimeError):
    """The tracer's report disagrees with the filesystem."""


class CommandFailed(RuntimeError):
    """A traced command exited unsuccessfully."""

    def __init__(self, command: Command, message: str, output: str = "") -> None:
        super().__init__(f"{command.display()}: {message}")
        self.command = command
        self.output = output


def env_fingerprint(env: Mapping[str, str] | None = None, allow: Iterable[str] = DEFAULT_ENV_ALLOWLIST) -> str:
    env = os.environ if env is None else env
    listing = "\n".join(f"{k}={env[k]}" for k in sorted(set(allow)) if k in env)
    return hash_bytes(listing.encode())


def command_key(argv: Sequence[str], portable_cwd: str, backend: Backend, env_fp: str) -> str:
    payload = json.dumps(
        {"argv": list(argv), "backend": backend.value, "cwd": portable_cwd, "env": env_fp},
        sort_keys=True,
        separators=(",", ":"),
    )
    return hash_bytes(payload.encode())


@dataclass(frozen=True)
class Command:
    """One unit of work.  ``key`` is the identity used for skipping.

    ``cacheable`` is a scheduling hint (the ``~`` script prefix) and is not
    part of the key.
    """

    argv: tuple[str, ...]
    cwd: str
    key: str
    backend: Backend = Backend.MINILANG
    env_fingerprint: str = ""
    cacheable: bool = True

    @classmethod
    def create(
        cls,
        argv: Sequence[str],
        cwd: str,
        *,
        backend: Backend = Backend.MINILANG,
        env: Mapping[str, str] | None = None,
        env_fp: str | None = None,
        subst: SubstTable | None = None,
        cacheable: bool = True,
    ) -> Command:
        if not argv:
            raise ValueError("a command needs at least one argument")
        cwd = canonicalize(cwd, "/")
        fp = env_fp if env_fp is not None else env_fingerprint(env)
        portable = (subst or SubstTable()).substitute(cwd)
        key = command_key(argv, portable, backend, fp)
        return cls(tuple(argv), cwd, key, backend, fp, cacheable)

    def display(self) -> str:
        text = format_argv(self.argv)
        prefix = ("~" if not self.cacheable else "") + ("!" if self.backend is Backend.OS else "")
        return prefix + text

    def to_json(self, subst: SubstTable) -> dict:
        return {
            "argv": list(self.argv),
            "cwd": subst.substitute(self.cwd),
            "backend": self.backend.value,
            "env": self.env_fingerprint,
            "cache": self.cacheable,
        }

    @classmethod
    def from_json(cls, data: Mapping, subst: SubstTable) -> Command:
        return cls.create(
            data["argv"],
            subst.expand(data["cwd"]),
            backend=Backend(data["backend"]),
            env_fp=data["env"],
            subst=subst,
            cacheable=data.get("cache", True),
        )


def format_argv(argv: Sequence[str]) -> str:
    parts = []
    for arg in argv:
        if arg and not any(c.isspace() or c in '"\\#' for c in arg):
            parts.append(arg)
        else:
            escaped = arg.replace("\\", "\\\\").replace('"', '\\"').replace("\n", "\\n").replace("\t", "\\t")
            parts.append(f'"{escaped}"')
    return " ".join(parts)


@dataclass(frozen=True)
class Trace:
    """Hashes of every file one execution read and wrote.

    A path never appears in both maps.  Write hashes are the contents after
    the command finished; a deleted file is recorded with :data:`MISSING`.
    """

    command_key: str
    reads: Mapping[str, str] = field(default_factory=dict)
    writes: Mapping[str, str] = field(default_factory=dict)

    def __post_init__(self) -> None:
        both = set(self.reads) & set(self.writes)
        if both:
            raise ValueError(f"trace reads and writes overlap: {sorted(both)}")

    @property
    def files(self) -> set[str]:
        return set(self.reads) | set(self.writes)

    def to_json(self, subst: SubstTable) -> dict:
        return {
            "key": self.command_key,
            "reads": {subst.substitute(p): h for p, h in sorted(self.reads.items())},
            "writes": {subst.substitute(p): h for p, h in sorted(self.writes.items())},
        }

    @classmethod
    def from_json(cls, data: Mapping, subst: SubstTable) -> Trace:
        return cls(
            data["key"],
            {subst.expand(p): h for p, h in data["reads"].items()},
            {subst.expand(p): h for p, h in data["writes"].items()},
        )


@dataclass(frozen=True)
class RawAccessReport:
    """What a tracer saw, available only after the command terminated."""

    reads: frozenset[str] = frozenset()
    writes: frozenset[str] = frozenset()
    queries: frozenset[str] = frozenset()
    deletes: frozenset[str] = frozenset()
    output: str = ""


class Execution(Protocol):
    delay: float

    def read(self) -> None: ...

    def commit(self) -> RawAccessReport: ...


def prepare(cmd: Command, fs_root: str) -> Execution:
    """Build a two-phase execution for ``cmd`` without running anything."""
    if cmd.backend is Backend.MINILANG:
        from .minilang import MiniExecution

        return MiniExecution(cmd)
    from .osproc import OsExecution

    return OsExecution(cmd, fs_root)


def execute_traced(cmd: Command, fs_root: str) -> RawAccessReport:
    """Run ``cmd`` to completion and return what it accessed.

    Raises:
        CommandFailed: if the command errors; the build should abort.
    """
    execution = prepare(cmd, fs_root)
    if execution.delay:
        time.sleep(execution.delay)
    execution.read()
    return execution.commit()


def _ignored(path: str, globs: Sequence[str]) -> bool:
    base = os.path.basename(path)
    return any(fnmatch.fnmatchcase(path, g) or fnmatch.fnmatchcase(base, g) for g in globs)


def finalize_trace(cmd: Command, report: RawAccessReport, ignore: Sequence[str] = ()) -> Trace:
    """Hash every reported path.

    Queries count as reads.  A path that was both read and written is kept
    as a write only.  Paths matching an ``ignore`` glob are dropped.
    """
    keep = lambda paths: {p for p in paths if not _ignored(p, ignore)}  # noqa: E731
    deletes = keep(report.deletes)
    written = keep(report.writes) | deletes
    writes: dict[str, str] = {}
    for path in sorted(written):
        digest = hash_file(path)
        if digest == MISSING and path not in deletes:
            raise TraceError(f"{cmd.display()}: reported write {path} does not exist")
        writes[path] = digest
    reads = {p: hash_file(p) for p in sorted(keep(report.reads | report.queries) - written)}
    return Trace(cmd.key, reads, writes)


__all__ = [
    "Backend",
    "Command",
    "CommandFailed",
    "Execution",
    "RawAccessReport",
    "Trace",
    "TraceError",
    "command_key",
    "env_fingerprint",
    "execute_traced",
    "finalize_trace",
    "format_argv",
    "prepare",
]
