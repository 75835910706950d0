"""Access ledger with logical time, hazard detection and classification.

Every command instance gets a ``[start, finish]`` interval from one
build-wide tick counter.  Tracing only reports accesses once a command has
finished, so each access is treated as happening anywhere inside its
instance's interval.  The pairwise rules are:

* write-write: two different instances write the same file.
* read-write: a reader started before a writer of the same file finished.
* speculative-write-read: a required instance read a file that a
  speculated, not yet promoted, instance had already finished writing.

The rules only look at pairs, so ingesting the same set of finished
instances in any order produces the same hazards.
"""

from __future__ import annotations

import dataclasses
import threading
from dataclasses import dataclass, field
from enum import Enum
from typing import Iterable

from .trace import Command, Trace


class Provenance(str, Enum):
    REQUIRED = "required"
    SPECULATED = "speculated"


class HazardKind(str, Enum):
    READ_WRITE = "read-write"
    WRITE_WRITE = "write-write"
    SPECULATIVE_WRITE_READ = "speculative-write-read"


class Recovery(str, Enum):
    FATAL = "fatal"
    RESTARTABLE = "restartable"
    CONTINUABLE = "continuable"


class LedgerClosed(RuntimeError):
    pass


@dataclass
class CmdInstance:
    command: Command
    instance_id: int
    provenance: Provenance
    start: int
    finish: int | None = None
    position: int | None = None
    promoted: bool = False

    @property
    def running(self) -> bool:
        return self.finish is None

    @property
    def speculative(self) -> bool:
        """Speculated and not (yet) demanded by the script."""
        return self.provenance is Provenance.SPECULATED

    def overlaps(self, other: CmdInstance) -> bool:
        inf = float("inf")
        return self.start < (other.finish if other.finish is not None else inf) and other.start < (
            self.finish if self.finish is not None else inf
        )

    def snapshot(self) -> CmdInstance:
        return dataclasses.replace(self)


@dataclass(frozen=True)
class Hazard:
    """``first``/``second`` are: (earlier, later) writer for write-write,
    (reader, writer) for read-write and (speculated writer, required reader)
    for speculative-write-read.  Both are snapshots at detection time."""

    kind: HazardKind
    file: str
    first: CmdInstance
    second: CmdInstance
    recovery: Recovery

    @property
    def identity(self) -> tuple[str, str, int, int]:
        return (self.kind.value, self.file, self.first.instance_id, self.second.instance_id)

    def describe(self) -> str:
        def side(i: CmdInstance) -> str:
            return f"{i.command.display()} [{i.provenance.value}]"

        return f"{self.kind.value} hazard on {self.file}: {side(self.first)} / {side(self.second)} ({self.recovery.value})"


@dataclass(frozen=True)
class HazardClearance:
    """Proof that an instance's trace was unaffected by hazards."""

    instance_id: int
    command_key: str
    tick: int


def classify(kind: HazardKind, first: CmdInstance, second: CmdInstance, any_speculation: bool) -> Recovery:
    if not any_speculation:
        return Recovery.FATAL
    if kind is HazardKind.WRITE_WRITE and first.speculative and second.speculative:
        return Recovery.CONTINUABLE
    if kind is HazardKind.READ_WRITE and first.speculative:
        return Recovery.CONTINUABLE
    return Recovery.RESTARTABLE


@dataclass
class _FileAccesses:
    readers: list[CmdInstance] = field(default_factory=list)
    writers: list[CmdInstance] = field(default_factory=list)


class Ledger:
    """The current build's record of who touched which file, and when.

    All methods take an internal lock, so workers may call them directly.
    """

    def __init__(self) -> None:
        self._lock = threading.RLock()
        self._tick = 0
        self._next_id = 0
        self._files: dict[str, _FileAccesses] = {}
        self.instances: dict[int, CmdInstance] = {}
        self.traces: dict[int, Trace] = {}
        self.hazards: list[Hazard] = []
        self._seen: set[tuple] = set()
        self.poisoned: set[int] = set()
        self.any_speculation = False
        self.closed = False

    def tick(self) -> int:
        with self._lock:
            self._tick += 1
            return self._tick

    @property
    def now(self) -> int:
        return self._tick

    def start(self, command: Command, provenance: Provenance, position: int | None = None) -> CmdInstance:
        with self._lock:
            self._check_open()
            inst = CmdInstance(command, self._next_id, provenance, self.tick(), position=position)
            self._next_id += 1
            self.instances[inst.instance_id] = inst
            if provenance is Provenance.SPECULATED:
                self.any_speculation = True
            return inst

    def add(self, inst: CmdInstance) -> None:
        """Register an instance built elsewhere (explicit ticks, for tests)."""
        with self._lock:
            self.instances[inst.instance_id] = inst
            self._next_id = max(self._next_id, inst.instance_id + 1)
            self._tick = max(self._tick, inst.start, inst.finish or 0)
            if inst.provenance is Provenance.SPECULATED:
                self.any_speculation = True

    def _check_open(self) -> None:
        if self.closed:
            raise LedgerClosed("the build has been finalized")

    def _emit(self, kind: HazardKind, file: str, first: CmdInstance, second: CmdInstance, out: list[Hazard]) -> None:
        rec = classify(kind, first, second, self.any_speculation)
        h = Hazard(kind, file, first.snapshot(), second.snapshot(), rec)
        ident = h.identity + (rec.value, first.provenance.value, second.provenance.value)
        if ident in self._seen:
            return
        self._seen.add(ident)
        self.hazards.append(h)
        out.append(h)
        if rec is Recovery.CONTINUABLE:
            self.poisoned.update((first.instance_id, second.instance_id))

    def _read_write(self, reader: CmdInstance, writer: CmdInstance, file: str, out: list[Hazard]) -> None:
        assert writer.finish is not None
        if reader.start < writer.finish:
            self._emit(HazardKind.READ_WRITE, file, reader, writer, out)
        elif writer.speculative and not reader.speculative:
            self._emit(HazardKind.SPECULATIVE_WRITE_READ, file, writer, reader, out)

    def ingest(self, inst: CmdInstance, trace: Trace) -> list[Hazard]:
        """Add a finished instance's accesses; returns the new hazards."""
        if inst.finish is None:
            raise ValueError("ingest needs a finished instance")
        with self._lock:
            self._check_open()
            self.instances.setdefault(inst.instance_id, inst)
            self.traces[inst.instance_id] = trace
            new: list[Hazard] = []
            for f in sorted(trace.writes):
                acc = self._files.setdefault(f, _FileAccesses())
                for w in acc.writers:
                    if w.instance_id != inst.instance_id:
                        a, b = (w, inst) if (w.finish, w.instance_id) <= (inst.finish, inst.instance_id) else (inst, w)
                        self._emit(HazardKind.WRITE_WRITE, f, a, b, new)
                for r in acc.readers:
                    self._read_write(r, inst, f, new)
                acc.writers.append(inst)
            for f in sorted(trace.reads):
                acc = self._files.setdefault(f, _FileAccesses())
                for w in acc.writers:
                    self._read_write(inst, w, f, new)
                acc.readers.append(inst)
            return new

    def finish(self, inst: CmdInstance, trace: Trace | None) -> list[Hazard]:
        """Stamp the finish tick and ingest ``trace`` (None: failed, no accesses)."""
        with self._lock:
            inst.finish = self.tick()
            if trace is None:
                return []
            return self.ingest(inst, trace)

    def promote(self, inst: CmdInstance, position: int) -> list[Hazard]:
        """The script demanded a speculated instance; make it required.

        Reads it already made are re-checked for speculative-write-read,
        and any continuable hazard it was part of is re-raised under its
        new provenance.
        """
        with self._lock:
            self._check_open()
            inst.provenance = Provenance.REQUIRED
            inst.position = position
            inst.promoted = True
            new: list[Hazard] = []
            trace = self.traces.get(inst.instance_id)
            if trace is not None:
                for f in sorted(trace.reads):
                    for w in self._files[f].writers:
                        if w.finish is not None and w.finish < inst.start and w.speculative:
                            self._emit(HazardKind.SPECULATIVE_WRITE_READ, f, w, inst, new)
            if inst.instance_id in self.poisoned:
                for h in list(self.hazards):
                    if h.recovery is Recovery.CONTINUABLE and inst.instance_id in (
                        h.first.instance_id,
                        h.second.instance_id,
                    ):
                        first = self.instances[h.first.instance_id]
                        second = self.instances[h.second.instance_id]
                        self._emit(h.kind, h.file, first, second, new)
            return new

    def clearance(self, inst: CmdInstance) -> HazardClearance | None:
        """Grant clearance once every overlapping instance has finished and
        no hazard involves this instance, an overlapping one, or its files."""
        with self._lock:
            if inst.finish is None:
                return None
            involved = {inst.instance_id}
            for other in self.instances.values():
                if other.instance_id != inst.instance_id and other.overlaps(inst):
                    if other.finish is None:
                        return None
                    involved.add(other.instance_id)
            trace = self.traces.get(inst.instance_id)
            files = trace.files if trace is not None else set()
            for h in self.hazards:
                if h.first.instance_id in involved or h.second.instance_id in involved or h.file in files:
                    return None
            if inst.instance_id in self.poisoned:
                return None
            return HazardClearance(inst.instance_id, inst.command.key, self._tick)

    def accesses(self, inst: CmdInstance) -> Trace | None:
        return self.traces.get(inst.instance_id)

    def close(self) -> None:
        with self._lock:
            self.closed = True

    def hazard_set(self) -> set[tuple[str, str, int, int]]:
        return {h.identity for h in self.hazards}


def hazards_touching(hazards: Iterable[Hazard], files: set[str]) -> list[Hazard]:
    return [h for h in hazards if h.file in files]
