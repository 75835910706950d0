"""Forward build system: run commands in script order, skip what a stored
trace proves unchanged, and speculate ahead using the previous run."""

from .cache import SharedCache
from .db import TraceDb
from .engine import BuildOptions, Policy, Run, build
from .fsutil import SubstTable, canonicalize, hash_file
from .hazard import CmdInstance, Hazard, HazardClearance, HazardKind, Ledger, Provenance, Recovery, classify
from .report import BuildReport, Disposition, Status
from .scripted import run_scripted
from .trace import Backend, Command, CommandFailed, Trace

__all__ = [
    "Backend",
    "BuildOptions",
    "BuildReport",
    "CmdInstance",
    "Command",
    "CommandFailed",
    "Disposition",
    "Hazard",
    "HazardClearance",
    "HazardKind",
    "Ledger",
    "Policy",
    "Provenance",
    "Recovery",
    "Run",
    "SharedCache",
    "Status",
    "SubstTable",
    "Trace",
    "TraceDb",
    "build",
    "canonicalize",
    "classify",
    "hash_file",
    "run_scripted",
]
