"""Deterministic scheduler driven by an explicit interleaving plan.

The script is a list of steps (a command or a parallel group).  Script
commands are labelled ``r0, r1, ...`` in flat order and extra speculated
commands ``s0, s1, ...``.  A plan is a sequence of ``("start", label)`` and
``("finish", label)`` events.  A command samples its inputs at its start
event and applies its outputs at its finish event.

Step ``k`` becomes demanded once every command of step ``k - 1`` has
finished.  A script command started before it is demanded runs as
speculated and is promoted when its demand arrives.  An extra command with
the same key as a newly demanded script command is adopted instead of
starting a fresh instance.

Whatever the plan leaves undone is completed sequentially.
"""

from __future__ import annotations

from typing import Iterable, Sequence

from .engine import Attempt, BuildContext, BuildOptions, Builder, Job, Step, make_context
from .db import TraceDb
from .hazard import Provenance
from .report import BuildReport
from .trace import Command

Plan = Sequence[tuple[str, str]]


class PlanError(ValueError):
    pass


def sequential_plan(n: int) -> list[tuple[str, str]]:
    out = []
    for i in range(n):
        out += [("start", f"r{i}"), ("finish", f"r{i}")]
    return out


class ScriptedAttempt(Attempt):
    def __init__(
        self,
        ctx: BuildContext,
        steps: Sequence[Step],
        plan: Plan = (),
        extras: Sequence[Command] = (),
        *,
        halt_on_hazard: bool = True,
    ) -> None:
        super().__init__(ctx, speculate=False, halt_on_hazard=halt_on_hazard)
        self.groups: list[list[str]] = []
        self.commands: dict[str, Command] = {}
        self.position: dict[str, int] = {}
        flat = 0
        for step in steps:
            members = [step] if isinstance(step, Command) else list(step)
            group = []
            for cmd in members:
                label = f"r{flat}"
                self.commands[label] = cmd
                self.position[label] = flat
                group.append(label)
                flat += 1
            self.groups.append(group)
        self._next_pos = flat
        for i, cmd in enumerate(extras):
            self.commands[f"s{i}"] = cmd
        self.plan = list(plan)
        self.job_of: dict[str, Job] = {}
        self.demanded: set[str] = set()
        self._next_group = 0
        self._pending: list[Job] = []

    # -- demand -------------------------------------------------------------

    def _group_done(self, g: int) -> bool:
        return all(lbl in self.job_of and self.job_of[lbl].finished for lbl in self.groups[g])

    def _advance(self) -> None:
        while self._next_group < len(self.groups):
            g = self._next_group
            if g > 0 and not self._group_done(g - 1):
                return
            self._next_group += 1
            for label in self.groups[g]:
                self.demanded.add(label)
                job = self.job_of.get(label)
                if job is None:
                    job = self._extra_matching(self.commands[label].key)
                    if job is not None:
                        self.job_of[label] = job
                if job is not None:
                    self.promote(job, self.position[label])

    def _extra_matching(self, key: str) -> Job | None:
        for label, job in self.job_of.items():
            if label.startswith("s") and job.command.key == key and not job.adopted:
                return job
        return None

    # -- events -------------------------------------------------------------

    def _start(self, label: str) -> None:
        if label not in self.commands:
            raise PlanError(f"unknown label {label!r}")
        if label in self.job_of:
            raise PlanError(f"{label} already started")
        cmd = self.commands[label]
        required = label in self.demanded
        job = self.begin(
            cmd,
            Provenance.REQUIRED if required else Provenance.SPECULATED,
            self.position[label] if required else None,
        )
        job.label = label
        self.job_of[label] = job
        self._pending.append(job)
        self.read_phase(job)

    def _finish(self, label: str) -> None:
        job = self.job_of.get(label)
        if job is None or job not in self._pending:
            raise PlanError(f"{label} is not running")
        self._pending.remove(job)
        self.commit_phase(job)
        self.complete(job)

    def _halted(self) -> bool:
        return self.halt_on_hazard and self.abort is not None

    def execute(self) -> None:
        for event, label in self.plan:
            self._advance()
            if self._halted():
                break
            if event == "start":
                self._start(label)
            elif event == "finish":
                self._finish(label)
            else:
                raise PlanError(f"unknown event {event!r}")
            if self._halted():
                break
        while not self._halted():
            self._advance()
            if self._halted():
                break
            if self._pending:
                self._finish(self._pending[0].label or "")
                continue
            todo = [lbl for g in self.groups for lbl in g if lbl in self.demanded and lbl not in self.job_of]
            if not todo:
                break
            self._start(todo[0])
        # Commands already running complete regardless of an abort.
        while self._pending:
            self._finish(self._pending[0].label or "")
        self.sweep()

    def instance_labels(self) -> dict[int, str]:
        """Instance id to the label it was started under."""
        return {j.inst.instance_id: j.label for j in self.jobs if j.label is not None}


def run_scripted(
    steps: Sequence[Step],
    plan: Plan = (),
    extras: Iterable[Command] = (),
    opts: BuildOptions | None = None,
    *,
    root: str,
    db: TraceDb | None = None,
    halt_on_hazard: bool = True,
    attempts: list | None = None,
) -> BuildReport:
    """Build with the scripted scheduler.

    A restart reruns the script sequentially with no extras.  ``attempts``,
    when given, receives every attempt object for inspection.
    """
    opts = opts or BuildOptions()
    db = db if db is not None else TraceDb(None)
    ctx = make_context(opts, root=root, db=db)
    extras = list(extras)
    builder = Builder(ctx)

    def make(speculate: bool, n: int) -> Attempt:
        if n == 0:
            return ScriptedAttempt(ctx, steps, plan, extras, halt_on_hazard=halt_on_hazard)
        return ScriptedAttempt(ctx, steps, halt_on_hazard=halt_on_hazard)

    report = builder.run(make, lambda a: a.execute())  # type: ignore[attr-defined]
    if attempts is not None:
        attempts.extend(builder.attempts)
    return report
