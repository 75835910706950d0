"""Append-only store of historical traces and the previous run's command list.

The file is line-delimited JSON.  The first line is a header naming the
format version and hash algorithm; every line carries a checksum of its own
body.  A torn final line (crash mid-append) is dropped on open, any other
damaged line is an error.
"""

from __future__ import annotations

import fcntl
import json
import logging
import os
import threading
from pathlib import Path
from typing import Iterator, Sequence

from .fsutil import HASH_ALGORITHM, SubstTable, hash_bytes
from .trace import Command, Trace

logger = logging.getLogger(__name__)

FORMAT_VERSION = 1
HISTORY_LIMIT = 8
DEFAULT_DB = Path(".forge") / "db.jsonl"


class DbError(RuntimeError):
    pass


class DbCorrupt(DbError):
    pass


class DbLocked(DbError):
    pass


class ClearanceRequired(DbError):
    """A trace was offered for recording without a hazard clearance."""


def _body(record: dict) -> str:
    return json.dumps(record, sort_keys=True, separators=(",", ":"))


def encode_record(record: dict) -> str:
    body = _body(record)
    return json.dumps({"sum": hash_bytes(body.encode())[:16], "rec": record}, sort_keys=True, separators=(",", ":"))


def decode_record(line: str) -> dict:
    """Parse one line; raises ``ValueError`` when malformed or the checksum fails."""
    outer = json.loads(line)
    rec = outer["rec"]
    if hash_bytes(_body(rec).encode())[:16] != outer["sum"]:
        raise ValueError("checksum mismatch")
    return rec


class TraceDb:
    """Traces by command key, newest first, plus the last completed run.

    ``path=None`` keeps everything in memory (useful for tests and for the
    oracle harness).
    """

    def __init__(
        self,
        path: str | os.PathLike[str] | None,
        subst: SubstTable | None = None,
        history: int = HISTORY_LIMIT,
    ) -> None:
        self.path = Path(path) if path is not None else None
        self.subst = subst or SubstTable()
        self.history = history
        self._by_key: dict[str, list[Trace]] = {}
        self._commands: dict[str, Command] = {}
        self._last_run: list[Command] = []
        self._lock = threading.Lock()
        self._lock_fd: int | None = None
        self._fh = None
        self._lines = 0
        if self.path is not None:
            self._open()

    # -- lifecycle --------------------------------------------------------

    def _open(self) -> None:
        assert self.path is not None
        self.path.parent.mkdir(parents=True, exist_ok=True)
        lock_path = self.path.with_name(self.path.name + ".lock")
        fd = os.open(lock_path, os.O_RDWR | os.O_CREAT, 0o644)
        try:
            fcntl.flock(fd, fcntl.LOCK_EX | fcntl.LOCK_NB)
        except BlockingIOError:
            os.close(fd)
            raise DbLocked(f"{self.path} is in use by another build") from None
        self._lock_fd = fd
        valid = self._load()
        if not valid:
            self._rewrite()
        self._fh = open(self.path, "a", encoding="utf-8")

    def close(self) -> None:
        if self._fh is not None:
            self._fh.close()
            self._fh = None
        if self._lock_fd is not None:
            fcntl.flock(self._lock_fd, fcntl.LOCK_UN)
            os.close(self._lock_fd)
            self._lock_fd = None

    def __enter__(self) -> TraceDb:
        return self

    def __exit__(self, *exc) -> None:
        self.close()

    def _header(self) -> dict:
        return {"type": "header", "format_version": FORMAT_VERSION, "hash_algorithm": HASH_ALGORITHM}

    def _load(self) -> bool:
        """Replay the file.  Returns False when it must be rewritten from memory."""
        assert self.path is not None
        if not self.path.exists() or self.path.stat().st_size == 0:
            return False
        raw = self.path.read_text(encoding="utf-8")
        lines = raw.split("\n")
        # An unterminated tail means the last append never completed.
        rewrite = lines[-1] != ""
        if not rewrite:
            lines.pop()
        records = []
        for i, line in enumerate(lines, start=1):
            try:
                records.append(decode_record(line))
            except (ValueError, KeyError, TypeError):
                if i == len(lines):
                    logger.warning("%s:%d: discarding torn final record", self.path, i)
                    rewrite = True
                    break
                raise DbCorrupt(f"{self.path}:{i}: corrupt record") from None
        if not records and rewrite:
            return False
        if not records or records[0].get("type") != "header":
            raise DbCorrupt(f"{self.path}:1: missing header")
        head = records[0]
        if head.get("format_version") != FORMAT_VERSION or head.get("hash_algorithm") != HASH_ALGORITHM:
            logger.warning("%s: incompatible header %s, starting a fresh database", self.path, head)
            return False
        for i, rec in enumerate(records[1:], start=2):
            try:
                self._apply(rec)
            except (KeyError, TypeError, ValueError) as e:
                raise DbCorrupt(f"{self.path}:{i}: bad {rec.get('type')!r} record: {e}") from None
        self._lines = len(records)
        if rewrite or self._lines > 4 * (self._live_count() + 4):
            return False
        return True

    def _live_count(self) -> int:
        return sum(len(v) for v in self._by_key.values()) + 1

    def _rewrite(self) -> None:
        """Atomically replace the file with the live records only."""
        assert self.path is not None
        records = [self._header()]
        for key, traces in self._by_key.items():
            cmd = self._commands.get(key)
            for t in reversed(traces):
                records.append(self._trace_record(cmd, t))
        if self._last_run:
            records.append(self._run_record(self._last_run))
        tmp = self.path.with_name(self.path.name + ".tmp")
        with open(tmp, "w", encoding="utf-8") as f:
            for rec in records:
                f.write(encode_record(rec) + "\n")
            f.flush()
            os.fsync(f.fileno())
        os.replace(tmp, self.path)
        self._lines = len(records)

    # -- records ----------------------------------------------------------

    def _trace_record(self, cmd: Command | None, trace: Trace) -> dict:
        rec = {"type": "trace", **trace.to_json(self.subst)}
        if cmd is not None:
            rec["command"] = cmd.to_json(self.subst)
        return rec

    def _run_record(self, seq: Sequence[Command]) -> dict:
        return {"type": "run", "commands": [c.to_json(self.subst) for c in seq]}

    def _apply(self, rec: dict) -> None:
        kind = rec["type"]
        if kind == "trace":
            trace = Trace.from_json(rec, self.subst)
            if "command" in rec:
                self._commands[trace.command_key] = Command.from_json(rec["command"], self.subst)
            self._push(trace)
        elif kind == "run":
            self._last_run = [Command.from_json(c, self.subst) for c in rec["commands"]]
        else:
            raise ValueError(f"unknown record type {kind!r}")

    def _push(self, trace: Trace) -> None:
        history = self._by_key.setdefault(trace.command_key, [])
        if trace in history:
            history.remove(trace)
        history.insert(0, trace)
        del history[self.history:]

    def _append(self, rec: dict) -> None:
        if self._fh is None:
            return
        self._fh.write(encode_record(rec) + "\n")
        self._fh.flush()
        self._lines += 1

    # -- public API -------------------------------------------------------

    def lookup(self, cmd: Command) -> list[Trace]:
        """Stored traces for ``cmd``, newest first."""
        with self._lock:
            return list(self._by_key.get(cmd.key, ()))

    def record(self, cmd: Command, trace: Trace, clearance) -> None:
        """Persist ``trace``; ``clearance`` must come from the hazard ledger."""
        from .hazard import HazardClearance

        if not isinstance(clearance, HazardClearance) or clearance.command_key != cmd.key:
            raise ClearanceRequired(f"refusing to record {cmd.display()} without hazard clearance")
        if trace.command_key != cmd.key:
            raise ValueError("trace belongs to a different command")
        with self._lock:
            self._commands[cmd.key] = cmd
            self._push(trace)
            self._append(self._trace_record(cmd, trace))

    def save_run(self, seq: Sequence[Command]) -> None:
        with self._lock:
            self._last_run = list(seq)
            self._append(self._run_record(self._last_run))

    def load_last_run(self) -> list[Command]:
        with self._lock:
            return list(self._last_run)

    def command(self, key: str) -> Command | None:
        return self._commands.get(key)

    def entries(self) -> Iterator[tuple[Command | None, list[Trace]]]:
        with self._lock:
            items = [(self._commands.get(k), list(v)) for k, v in self._by_key.items()]
        yield from items
