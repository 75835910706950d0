"""Build orchestration: skipping, cache restore, parallelism and speculation.

A build runs as one or more *attempts*.  The first attempt may speculate;
if it hits a restartable hazard the build is rerun once with speculation
off and that rerun's outcome is final.

Two schedulers share the decision logic in :class:`Attempt`:

* :class:`ThreadedAttempt` runs commands on a pool of worker slots.
* :class:`forge.scripted.ScriptedAttempt` follows an explicit plan of
  start/finish events so interleavings are reproducible in tests.
"""

from __future__ import annotations

import logging
import os
import threading
import time
from dataclasses import dataclass
from enum import Enum
from pathlib import Path
from typing import Callable, Iterable, Mapping, Sequence, Union

from .cache import CacheCorruption, SharedCache
from .db import DEFAULT_DB, TraceDb
from .fsutil import SubstTable, canonicalize, hash_file
from .hazard import CmdInstance, Hazard, Ledger, Provenance, Recovery
from .report import BuildReport, CommandEntry, Disposition, HazardEntry, Status
from .trace import (
    Backend,
    Command,
    CommandFailed,
    Execution,
    Trace,
    TraceError,
    env_fingerprint,
    finalize_trace,
    prepare,
)

logger = logging.getLogger(__name__)


class Policy(str, Enum):
    RESTART = "restart"
    CONTINUE = "continue"


@dataclass
class BuildOptions:
    threads: int = 1
    speculate: bool = True
    policy: Policy = Policy.RESTART
    shared_cache: str | None = None
    ignore_globs: Sequence[str] = ()
    input_paths: Sequence[str] = ()

    def __post_init__(self) -> None:
        if self.threads < 1:
            raise ValueError("threads must be at least 1")
        self.policy = Policy(self.policy)


Step = Union[Command, Sequence[Command]]
ScriptFn = Callable[["Run"], None]


@dataclass
class BuildContext:
    """Everything an attempt needs that outlives a single attempt."""

    root: str
    db: TraceDb
    opts: BuildOptions
    subst: SubstTable
    env_fp: str
    cache: SharedCache | None = None
    inputs: frozenset[str] = frozenset()

    def command(self, argv: Sequence[str] | str, **kw) -> Command:
        if isinstance(argv, str):
            argv = [argv]
        return Command.create(argv, self.root, env_fp=self.env_fp, subst=self.subst, **kw)


class AbortKind(str, Enum):
    RESTART = "restart"
    FATAL = "fatal"
    FAILED = "failed"


_SEVERITY = {AbortKind.RESTART: 0, AbortKind.FATAL: 1, AbortKind.FAILED: 1}


@dataclass
class Abort:
    kind: AbortKind
    reason: str
    hazard: Hazard | None = None
    output: str = ""


class AttemptAborted(Exception):
    """Unwinds the script driver once an attempt has been aborted."""

    def __init__(self, abort: Abort) -> None:
        super().__init__(abort.reason)
        self.abort = abort


@dataclass
class Job:
    command: Command
    inst: CmdInstance
    disposition: Disposition
    matched: Trace | None
    predicted: Trace | None
    execution: Execution | None = None
    trace: Trace | None = None
    error: BaseException | None = None
    adopted: bool = False
    settled: bool = False
    label: str | None = None
    output: str = ""

    @property
    def finished(self) -> bool:
        return self.inst.finish is not None


class Attempt:
    """One pass over the script.  Not thread-safe; subclasses serialize."""

    def __init__(self, ctx: BuildContext, speculate: bool, halt_on_hazard: bool = True) -> None:
        self.ctx = ctx
        self.speculate = speculate
        self.halt_on_hazard = halt_on_hazard
        self.ledger = Ledger()
        self.jobs: list[Job] = []
        self.required: dict[int, Command] = {}
        self.abort: Abort | None = None
        self.pool: list[Command] = ctx.db.load_last_run() if speculate else []
        self._next_pos = 0

    # -- decisions ----------------------------------------------------------

    def stored_traces(self, cmd: Command) -> list[Trace]:
        traces = self.ctx.db.lookup(cmd)
        if not traces and self.ctx.cache is not None:
            traces = self.ctx.cache.candidates(cmd)
        return traces

    def _decide(self, cmd: Command, stored: list[Trace]) -> tuple[Disposition, Trace | None]:
        hashes: dict[str, str] = {}

        def matches(files: Mapping[str, str]) -> bool:
            for path, digest in files.items():
                if path not in hashes:
                    hashes[path] = hash_file(path)
                if hashes[path] != digest:
                    return False
            return True

        restorable = None
        for trace in stored:
            if matches(trace.reads):
                if matches(trace.writes):
                    return Disposition.SKIPPED, trace
                restorable = restorable or trace
        if restorable is not None and self.ctx.cache is not None and cmd.cacheable:
            return Disposition.RESTORED, restorable
        return Disposition.EXECUTED, None

    def allocate_positions(self, n: int) -> list[int]:
        start = self._next_pos
        self._next_pos += n
        return list(range(start, start + n))

    def begin(self, cmd: Command, provenance: Provenance, position: int | None) -> Job:
        stored = self.stored_traces(cmd)
        disposition, matched = self._decide(cmd, stored)
        inst = self.ledger.start(cmd, provenance, position)
        job = Job(cmd, inst, disposition, matched, stored[0] if stored else None)
        if position is not None:
            self.required[position] = cmd
        if disposition is Disposition.EXECUTED:
            try:
                job.execution = prepare(cmd, self.ctx.root)
            except CommandFailed as e:
                job.error = e
        self.jobs.append(job)
        return job

    # -- running (no lock held) ----------------------------------------------

    def read_phase(self, job: Job) -> None:
        if job.error is None and job.execution is not None:
            try:
                job.execution.read()
            except CommandFailed as e:
                job.error = e

    def commit_phase(self, job: Job) -> None:
        """Produce ``job.trace`` (or ``job.error``) after the read phase."""
        if job.error is not None:
            return
        try:
            if job.disposition is Disposition.SKIPPED:
                job.trace = job.matched
                return
            if job.disposition is Disposition.RESTORED:
                assert self.ctx.cache is not None and job.matched is not None
                fetched = self.ctx.cache.fetch(job.command, job.matched.reads)
                if fetched is not None:
                    job.trace = fetched
                    return
                job.disposition = Disposition.EXECUTED
                job.execution = prepare(job.command, self.ctx.root)
                job.execution.read()
            assert job.execution is not None
            report = job.execution.commit()
            job.output = report.output
            job.trace = finalize_trace(job.command, report, self.ctx.opts.ignore_globs)
        except (CommandFailed, TraceError, CacheCorruption, OSError) as e:
            job.error = e

    # -- completion (serialized) ----------------------------------------------

    def set_abort(self, abort: Abort) -> None:
        if self.abort is None or _SEVERITY[abort.kind] > _SEVERITY[self.abort.kind]:
            self.abort = abort

    def handle_hazards(self, hazards: Iterable[Hazard]) -> None:
        for h in hazards:
            logger.info("%s", h.describe())
            if not self.halt_on_hazard:
                continue
            if h.recovery is Recovery.FATAL:
                self.set_abort(Abort(AbortKind.FATAL, h.describe(), h))
            elif h.recovery is Recovery.RESTARTABLE:
                self.set_abort(Abort(AbortKind.RESTART, h.describe(), h))
            elif self.ctx.opts.policy is Policy.RESTART:
                self.set_abort(Abort(AbortKind.RESTART, h.describe(), h))

    def complete(self, job: Job) -> None:
        if job.error is not None:
            self.ledger.finish(job.inst, None)
            output = getattr(job.error, "output", "")
            if job.inst.speculative:
                # The prediction was wrong in some way; a clean rerun decides.
                self.set_abort(Abort(AbortKind.RESTART, f"speculated command failed: {job.error}"))
            else:
                self.set_abort(Abort(AbortKind.FAILED, str(job.error), output=output))
        else:
            assert job.trace is not None
            self.handle_hazards(self.ledger.finish(job.inst, job.trace))
        self.sweep()

    def promote(self, job: Job, position: int) -> None:
        job.adopted = True
        self.required[position] = job.command
        self.handle_hazards(self.ledger.promote(job.inst, position))
        if job.error is not None and self.halt_on_hazard:
            self.set_abort(Abort(AbortKind.RESTART, f"speculated command failed: {job.error}"))
        self.sweep()

    def sweep(self) -> None:
        """Persist every finished trace that has been granted clearance."""
        for job in self.jobs:
            if job.settled or not job.finished:
                continue
            if job.error is not None or job.trace is None:
                job.settled = True
                continue
            clearance = self.ledger.clearance(job.inst)
            if clearance is None:
                continue
            job.settled = True
            db = self.ctx.db
            if job.disposition is Disposition.SKIPPED:
                history = db.lookup(job.command)
                if history and history[0] == job.trace:
                    continue
            db.record(job.command, job.trace, clearance)
            if job.disposition is Disposition.EXECUTED and self.ctx.cache is not None and job.command.cacheable:
                self.ctx.cache.publish(job.command, job.trace)

    # -- speculation ------------------------------------------------------------

    def maybe_speculate(self) -> Command | None:
        """First last-run command that can safely start now, if any."""
        if not self.speculate:
            return None
        running = [j for j in self.jobs if not j.finished]
        run_reads: set[str] = set()
        run_writes: set[str] = set()
        for j in running:
            if j.predicted is None:
                return None
            run_reads |= set(j.predicted.reads)
            run_writes |= set(j.predicted.writes)
        done_files: set[str] = set()
        for j in self.jobs:
            if j.finished and j.trace is not None:
                done_files |= j.trace.files
        started = {j.command.key for j in self.jobs}
        later_reads: set[str] = set()
        later_writes: set[str] = set()
        for cand in self.pool:
            if cand.key in started:
                continue
            if cand.backend is Backend.OS:
                return None
            history = self.stored_traces(cand)
            if not history:
                return None
            reads, writes = set(history[0].reads), set(history[0].writes)
            clash = writes & (done_files | run_reads | run_writes | later_reads | later_writes)
            clash |= reads & (run_writes | later_writes)
            clash |= writes & self.ctx.inputs
            if not clash:
                return cand
            later_reads |= reads
            later_writes |= writes
        return None

    # -- script I/O -------------------------------------------------------------

    def script_io(self, path: str, data: bytes | None) -> bytes | None:
        """Read (``data is None``) or write a file on the script's behalf."""
        path = canonicalize(path, self.ctx.root)
        verb = "script-read" if data is None else "script-write"
        cmd = self.ctx.command([verb, path], cacheable=False)
        inst = self.ledger.start(cmd, Provenance.REQUIRED)
        if data is None:
            out = Path(path).read_bytes()
            trace = Trace(cmd.key, {path: hash_file(path)}, {})
        else:
            Path(path).parent.mkdir(parents=True, exist_ok=True)
            Path(path).write_bytes(data)
            out = None
            trace = Trace(cmd.key, {}, {path: hash_file(path)})
        self.handle_hazards(self.ledger.finish(inst, trace))
        return out

    # -- reporting ----------------------------------------------------------------

    def entries(self) -> list[CommandEntry]:
        out = []
        for j in self.jobs:
            out.append(
                CommandEntry(
                    command=j.command.display(),
                    key=j.command.key,
                    provenance=j.inst.provenance.value,
                    disposition=j.disposition.value,
                    adopted=j.adopted,
                    start=j.inst.start,
                    finish=j.inst.finish,
                    position=j.inst.position,
                    label=j.label,
                    failed=j.error is not None,
                )
            )
        return out

    def required_sequence(self) -> list[Command]:
        return [self.required[p] for p in sorted(self.required)]


class Run:
    """The handle a build script uses to issue commands."""

    def __init__(self, attempt: ThreadedAttempt) -> None:
        self._attempt = attempt
        self.ctx = attempt.ctx

    def _command(self, c: Command | Sequence[str] | str) -> Command:
        return c if isinstance(c, Command) else self.ctx.command(c)

    def cmd(self, c: Command | Sequence[str] | str) -> None:
        """Run one command; returns once it has been skipped, restored or executed."""
        self._attempt.run_command(self._command(c))

    def par(self, cmds: Iterable[Command | Sequence[str] | str]) -> None:
        self._attempt.parallel_group([self._command(c) for c in cmds])

    def read_file(self, path: str) -> bytes:
        return self._attempt.script_read(path)

    def write_file(self, path: str, data: bytes | str) -> None:
        self._attempt.script_write(path, data.encode() if isinstance(data, str) else data)


class ThreadedAttempt(Attempt):
    """Runs required commands on the script's thread and speculated ones on
    helper threads, never more than ``threads`` at once."""

    def __init__(self, ctx: BuildContext, speculate: bool) -> None:
        super().__init__(ctx, speculate)
        self.cv = threading.Condition()
        self.busy = 0
        self.exclusive = False
        self.waiting = 0
        self.demanding = 0
        self._helpers: list[threading.Thread] = []

    def _raise_if_aborted(self) -> None:
        if self.abort is not None:
            raise AttemptAborted(self.abort)

    def _slot_free(self, cmd: Command) -> bool:
        if self.exclusive:
            return False
        if cmd.backend is Backend.OS:
            return self.busy == 0
        return self.busy < self.ctx.opts.threads

    def _start(self, cmd: Command, provenance: Provenance, position: int | None) -> Job:
        job = self.begin(cmd, provenance, position)
        self.busy += 1
        if cmd.backend is Backend.OS:
            self.exclusive = True
        return job

    def _finish(self, job: Job) -> None:
        self.busy -= 1
        if job.command.backend is Backend.OS:
            self.exclusive = False
        self.complete(job)
        self.cv.notify_all()

    def _execute(self, job: Job) -> None:
        if job.execution is not None and job.error is None and job.execution.delay:
            time.sleep(job.execution.delay)
        self.read_phase(job)
        self.commit_phase(job)

    def _adoptable(self, key: str) -> Job | None:
        for j in self.jobs:
            if j.command.key == key and j.inst.speculative and not j.adopted:
                return j
        return None

    def dispatch(self) -> None:
        """Fill idle slots with speculation while the script is waiting on work."""
        while (
            self.abort is None
            and self.demanding > 0
            and self.waiting == 0
            and not self.exclusive
            and self.busy < self.ctx.opts.threads
        ):
            cand = self.maybe_speculate()
            if cand is None:
                return
            job = self._start(cand, Provenance.SPECULATED, None)
            t = threading.Thread(target=self._helper, args=(job,), daemon=True)
            self._helpers.append(t)
            t.start()

    def _helper(self, job: Job) -> None:
        self._execute(job)
        with self.cv:
            self._finish(job)
            self.dispatch()

    def run_command(self, cmd: Command, position: int | None = None) -> None:
        with self.cv:
            self._raise_if_aborted()
            if position is None:
                (position,) = self.allocate_positions(1)
            self.demanding += 1
            try:
                spec = self._adoptable(cmd.key)
                if spec is not None:
                    self.promote(spec, position)
                    self.dispatch()
                    while not spec.finished and self.abort is None:
                        self.cv.wait()
                    self._raise_if_aborted()
                    return
                self.waiting += 1
                try:
                    while not self._slot_free(cmd) and self.abort is None:
                        self.cv.wait()
                finally:
                    self.waiting -= 1
                self._raise_if_aborted()
                job = self._start(cmd, Provenance.REQUIRED, position)
                self.dispatch()
            finally:
                self.demanding -= 1
        self._execute(job)
        with self.cv:
            self._finish(job)
            self._raise_if_aborted()

    def parallel_group(self, cmds: Sequence[Command]) -> None:
        if len(cmds) == 1:
            self.run_command(cmds[0])
            return
        with self.cv:
            self._raise_if_aborted()
            positions = self.allocate_positions(len(cmds))
        errors: list[BaseException] = []

        def member(cmd: Command, pos: int) -> None:
            try:
                self.run_command(cmd, pos)
            except BaseException as e:  # noqa: BLE001 - re-raised on the script thread
                errors.append(e)

        threads = [threading.Thread(target=member, args=(c, p)) for c, p in zip(cmds, positions)]
        for t in threads:
            t.start()
        for t in threads:
            t.join()
        with self.cv:
            self._raise_if_aborted()
        if errors:
            raise errors[0]

    def script_read(self, path: str) -> bytes:
        with self.cv:
            self._raise_if_aborted()
            out = self.script_io(path, None)
            self._raise_if_aborted()
        assert out is not None
        return out

    def script_write(self, path: str, data: bytes) -> None:
        with self.cv:
            self._raise_if_aborted()
            self.script_io(path, data)
            self._raise_if_aborted()

    def drain(self) -> None:
        with self.cv:
            while any(not j.finished for j in self.jobs):
                self.cv.wait()
            self.sweep()
        for t in self._helpers:
            t.join()

    def run_script(self, script: ScriptFn) -> None:
        try:
            script(Run(self))
        except AttemptAborted:
            pass
        finally:
            self.drain()


def steps_script(steps: Sequence[Step]) -> ScriptFn:
    """Adapt a list of commands and parallel groups to a script function."""

    def drive(run: Run) -> None:
        for step in steps:
            if isinstance(step, Command):
                run.cmd(step)
            else:
                run.par(step)

    return drive


def make_context(
    opts: BuildOptions,
    *,
    root: str | os.PathLike[str],
    db: TraceDb,
    env: Mapping[str, str] | None = None,
    subst: SubstTable | None = None,
) -> BuildContext:
    root_s = canonicalize(os.fspath(Path(root).resolve()), "/")
    subst = subst if subst is not None else db.subst
    cache_dir = opts.shared_cache
    cache = SharedCache(cache_dir, subst) if cache_dir else None
    inputs = frozenset(canonicalize(p, root_s) for p in opts.input_paths)
    return BuildContext(root_s, db, opts, subst, env_fingerprint(env), cache, inputs)


class Builder:
    """Runs attempts until one is final and assembles the report."""

    def __init__(self, ctx: BuildContext) -> None:
        self.ctx = ctx
        self.attempts: list[Attempt] = []

    def run(self, make_attempt: Callable[[bool, int], Attempt], execute: Callable[[Attempt], None]) -> BuildReport:
        t0 = time.monotonic()
        speculate = self.ctx.opts.speculate
        while True:
            attempt = make_attempt(speculate, len(self.attempts))
            self.attempts.append(attempt)
            execute(attempt)
            attempt.ledger.close()
            abort = attempt.abort
            if abort is not None and abort.kind is AbortKind.RESTART and len(self.attempts) == 1:
                logger.warning("restarting build without speculation: %s", abort.reason)
                speculate = False
                continue
            break
        return self._report(attempt, time.monotonic() - t0)

    def _report(self, final: Attempt, wall: float) -> BuildReport:
        hazards = []
        raw = []
        for i, a in enumerate(self.attempts):
            hazards += [HazardEntry.of(h, i) for h in a.ledger.hazards]
            raw += a.ledger.hazards
        abort = final.abort
        if abort is None:
            status = Status.OK
            self.ctx.db.save_run(final.required_sequence())
        elif abort.kind is AbortKind.FAILED:
            status = Status.FAILED
        else:
            # A restart request in the final attempt cannot be honoured again.
            status = Status.HAZARD
        return BuildReport(
            status=status,
            restarted=len(self.attempts) > 1,
            commands=final.entries(),
            hazards=hazards,
            wall_time=wall,
            error=abort.reason if abort else None,
            output=abort.output if abort else "",
            raw_hazards=raw,
        )


def open_db(
    root: str | os.PathLike[str],
    db: TraceDb | str | os.PathLike[str] | None = None,
    subst: SubstTable | None = None,
) -> tuple[TraceDb, bool]:
    """Resolve ``db`` to an open database; the flag says whether the caller owns it."""
    if isinstance(db, TraceDb):
        return db, False
    path = Path(db) if db is not None else Path(root) / DEFAULT_DB
    if subst is None:
        root_s = canonicalize(os.fspath(Path(root).resolve()), "/")
        subst = SubstTable.default(root_s, os.path.expanduser("~"))
    return TraceDb(path, subst), True


def build(
    script: ScriptFn | Sequence[Step],
    opts: BuildOptions | None = None,
    *,
    root: str | os.PathLike[str] = ".",
    db: TraceDb | str | os.PathLike[str] | None = None,
    env: Mapping[str, str] | None = None,
    subst: SubstTable | None = None,
) -> BuildReport:
    """Run a build script with the threaded scheduler.

    ``script`` is either a function taking a :class:`Run` handle or a list
    of commands and parallel groups.  ``db`` may be an open database, a
    path, or None for ``<root>/.forge/db.jsonl``.
    ``subst`` only applies when the database is opened here.
    """
    opts = opts or BuildOptions()
    handle, owned = open_db(root, db, subst)
    try:
        ctx = make_context(opts, root=root, db=handle, env=env)
        fn = script if callable(script) else steps_script(script)
        builder = Builder(ctx)
        return builder.run(
            lambda speculate, _n: ThreadedAttempt(ctx, speculate),
            lambda attempt: attempt.run_script(fn),  # type: ignore[attr-defined]
        )
    finally:
        if owned:
            handle.close()


__all__ = [
    "Abort",
    "AbortKind",
    "Attempt",
    "AttemptAborted",
    "BuildContext",
    "BuildOptions",
    "Builder",
    "Job",
    "Policy",
    "Run",
    "ThreadedAttempt",
    "build",
    "make_context",
    "steps_script",
]
