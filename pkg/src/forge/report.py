"""Build outcome in text and JSON form."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from enum import Enum

from .hazard import Hazard


class Disposition(str, Enum):
    SKIPPED = "skipped"
    RESTORED = "restored"
    EXECUTED = "executed"


class Status(str, Enum):
    OK = "ok"
    FAILED = "failed"
    HAZARD = "hazard"


EXIT_CODES = {Status.OK: 0, Status.FAILED: 1, Status.HAZARD: 2}


@dataclass
class CommandEntry:
    command: str
    key: str
    provenance: str
    disposition: str
    adopted: bool
    start: int
    finish: int | None
    position: int | None
    label: str | None = None
    failed: bool = False


@dataclass
class HazardEntry:
    kind: str
    file: str
    first: str
    first_provenance: str
    second: str
    second_provenance: str
    recovery: str
    attempt: int

    @classmethod
    def of(cls, h: Hazard, attempt: int) -> HazardEntry:
        return cls(
            h.kind.value,
            h.file,
            h.first.command.display(),
            h.first.provenance.value,
            h.second.command.display(),
            h.second.provenance.value,
            h.recovery.value,
            attempt,
        )


@dataclass
class BuildReport:
    status: Status
    restarted: bool
    commands: list[CommandEntry]
    hazards: list[HazardEntry]
    wall_time: float
    error: str | None = None
    output: str = ""
    raw_hazards: list[Hazard] = field(default_factory=list, repr=False)

    @property
    def exit_code(self) -> int:
        return EXIT_CODES[self.status]

    def count(self, disposition: Disposition) -> int:
        return sum(1 for c in self.commands if c.disposition == disposition.value and not c.failed)

    @property
    def counts(self) -> dict[str, int]:
        return {
            "executed": self.count(Disposition.EXECUTED),
            "skipped": self.count(Disposition.SKIPPED),
            "restored": self.count(Disposition.RESTORED),
            "speculated": sum(1 for c in self.commands if c.provenance == "speculated" or c.adopted),
            "adopted": sum(1 for c in self.commands if c.adopted),
        }

    def disposition_of(self, command: str) -> list[str]:
        return [c.disposition for c in self.commands if c.command == command and c.position is not None]

    def to_json(self) -> dict:
        return {
            "status": self.status.value,
            "restarted": self.restarted,
            "wall_time": self.wall_time,
            "error": self.error,
            "counts": self.counts,
            "commands": [asdict(c) for c in self.commands],
            "hazards": [asdict(h) for h in self.hazards],
        }

    def render_json(self) -> str:
        return json.dumps(self.to_json(), indent=2, sort_keys=True)

    def render_text(self) -> str:
        lines = []
        for c in self.commands:
            tag = c.disposition + (" (adopted)" if c.adopted else "")
            if c.provenance == "speculated":
                tag += " [speculated]"
            if c.failed:
                tag = "failed"
            lines.append(f"{tag:<24} {c.command}")
        for h in self.hazards:
            lines.append(
                f"hazard: {h.kind} on {h.file}: {h.first} [{h.first_provenance}] / "
                f"{h.second} [{h.second_provenance}] -> {h.recovery}"
            )
        n = self.counts
        summary = (
            f"{self.status.value}: {n['executed']} executed, {n['skipped']} skipped, "
            f"{n['restored']} restored, {n['speculated']} speculated"
        )
        if self.restarted:
            summary += ", restarted"
        lines.append(f"{summary} in {self.wall_time:.2f}s")
        if self.error:
            lines.append(f"error: {self.error}")
        if self.output:
            lines.append(self.output.rstrip("\n"))
        return "\n".join(lines)


_entry = {
    "type": "object",
    "required": ["command", "key", "provenance", "disposition", "adopted", "start", "finish", "position"],
    "properties": {
        "command": {"type": "string"},
        "key": {"type": "string"},
        "provenance": {"enum": ["required", "speculated"]},
        "disposition": {"enum": [d.value for d in Disposition]},
        "adopted": {"type": "boolean"},
        "start": {"type": "integer"},
        "finish": {"type": ["integer", "null"]},
        "position": {"type": ["integer", "null"]},
        "label": {"type": ["string", "null"]},
        "failed": {"type": "boolean"},
    },
}

_hazard = {
    "type": "object",
    "required": ["kind", "file", "first", "second", "recovery", "first_provenance", "second_provenance"],
    "properties": {
        "kind": {"enum": ["read-write", "write-write", "speculative-write-read"]},
        "file": {"type": "string"},
        "first": {"type": "string"},
        "second": {"type": "string"},
        "first_provenance": {"enum": ["required", "speculated"]},
        "second_provenance": {"enum": ["required", "speculated"]},
        "recovery": {"enum": ["fatal", "restartable", "continuable"]},
        "attempt": {"type": "integer", "minimum": 0},
    },
}

REPORT_SCHEMA = {
    "$schema": "https://json-schema.org/draft/2020-12/schema",
    "type": "object",
    "required": ["status", "restarted", "wall_time", "error", "counts", "commands", "hazards"],
    "properties": {
        "status": {"enum": [s.value for s in Status]},
        "restarted": {"type": "boolean"},
        "wall_time": {"type": "number", "minimum": 0},
        "error": {"type": ["string", "null"]},
        "counts": {
            "type": "object",
            "required": ["executed", "skipped", "restored", "speculated", "adopted"],
            "additionalProperties": {"type": "integer", "minimum": 0},
        },
        "commands": {"type": "array", "items": _entry},
        "hazards": {"type": "array", "items": _hazard},
    },
}
