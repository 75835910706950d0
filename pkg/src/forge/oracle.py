"""Symbolic build model and exhaustive interleaving checker.

Files are small integers, commands are pure functions from the values they
read to the values they write, and a schedule is a sequence of start and
finish events.  Reads are sampled at start and writes land at finish, the
same visibility the real engine has with end-of-command tracing.

The model computes hazards globally from the event times rather than
incrementally, which makes it an independent check on the ledger:

* write-write: two commands write the same file (ordered by finish).
* read-write: the reader started before the writer finished.
* speculative-write-read: a script command read a file whose writer
  finished before the read started but comes later in script order (or is
  an extra command the script never asks for).

:func:`check_claims` runs a corpus through the model and, optionally, a
sample of the same schedules through the scripted engine, and reports
every disagreement it finds.
"""

from __future__ import annotations

import itertools
import os
import random
import shutil
import tempfile
from dataclasses import dataclass, field
from typing import Iterator, Mapping, Sequence

MAX_ENUM_CMDS = 6
MODULUS = 1_000_003
FN_KINDS = ("const", "copy", "sum", "mix")

Event = tuple[int, str]
Schedule = tuple[Event, ...]
HazardId = tuple[str, int, int, int]  # (kind, file, first, second)
State = dict[int, "int | None"]


class ScheduleError(ValueError):
    pass


@dataclass(frozen=True)
class SymCommand:
    reads: tuple[int, ...]
    writes: tuple[int, ...]
    kind: str = "sum"
    param: int = 0

    def __post_init__(self) -> None:
        if set(self.reads) & set(self.writes):
            raise ValueError("a symbolic command may not read what it writes")
        if not self.writes:
            raise ValueError("a symbolic command must write something")
        if self.kind not in FN_KINDS:
            raise ValueError(f"unknown fn kind {self.kind!r}")
        object.__setattr__(self, "reads", tuple(sorted(set(self.reads))))
        object.__setattr__(self, "writes", tuple(sorted(set(self.writes))))

    @property
    def files(self) -> set[int]:
        return set(self.reads) | set(self.writes)

    def apply(self, values: Sequence[int]) -> list[int]:
        n = len(self.writes)
        if self.kind == "const":
            return [self.param + k for k in range(n)]
        if self.kind == "copy":
            return [values[0] if values else 0] * n
        if self.kind == "sum":
            total = 0
            for v in values:
                total += v
            return [total + k for k in range(n)]
        acc = self.param
        for v in values:
            acc = (acc * 31 + v) % MODULUS
        return [(acc + 17 * k) % MODULUS for k in range(n)]


@dataclass(frozen=True)
class SymScript:
    commands: tuple[SymCommand, ...]
    init: tuple[tuple[int, int | None], ...]
    n_files: int = 6

    @property
    def initial_state(self) -> State:
        return dict(self.init)

    @property
    def files(self) -> set[int]:
        out: set[int] = set()
        for c in self.commands:
            out |= c.files
        return out


@dataclass
class SymResult:
    state: State
    hazards: frozenset[HazardId]


@dataclass(frozen=True)
class _Relations:
    """File-sharing pairs of a command list, computed once per script."""

    ww: tuple[tuple[int, int, int], ...]  # (file, i, j), i < j
    rw: tuple[tuple[int, int, int], ...]  # (file, reader, writer)

    @classmethod
    def of(cls, cmds: Sequence[SymCommand]) -> _Relations:
        ww, rw = [], []
        for i, a in enumerate(cmds):
            for j, b in enumerate(cmds):
                if i < j:
                    ww += [(f, i, j) for f in sorted(set(a.writes) & set(b.writes))]
                if i != j:
                    rw += [(f, i, j) for f in sorted(set(a.reads) & set(b.writes))]
        return cls(tuple(ww), tuple(rw))


def _times(sched: Schedule, n: int) -> tuple[list[int], list[int]]:
    start = [-1] * n
    finish = [-1] * n
    for t, (i, ev) in enumerate(sched):
        if not 0 <= i < n:
            raise ScheduleError(f"event for unknown command {i}")
        if ev == "start":
            if start[i] >= 0:
                raise ScheduleError(f"command {i} starts twice")
            start[i] = t
        elif ev == "finish":
            if start[i] < 0 or finish[i] >= 0:
                raise ScheduleError(f"command {i} finishes without a matching start")
            finish[i] = t
        else:
            raise ScheduleError(f"unknown event {ev!r}")
    return start, finish


def run_symbolic(
    cmds: Sequence[SymCommand],
    sched: Schedule,
    init: Mapping[int, int | None],
    n_script: int | None = None,
    relations: _Relations | None = None,
) -> SymResult:
    """Execute ``sched`` and return the terminal state and hazard set.

    The first ``n_script`` commands form the script, in order; any others
    are extra speculated commands the script never demands.  Commands not
    scheduled at all are simply absent.
    """
    n = len(cmds)
    n_script = n if n_script is None else n_script
    start, finish = _times(sched, n)
    if any(s >= 0 and f < 0 for s, f in zip(start, finish)):
        raise ScheduleError("every started command must finish")
    state: State = dict(init)
    sampled: dict[int, list[int]] = {}
    for i, ev in sched:
        c = cmds[i]
        if ev == "start":
            sampled[i] = [state.get(f) or 0 for f in c.reads]
        else:
            for f, v in zip(c.writes, c.apply(sampled[i])):
                state[f] = v
    rel = relations or _Relations.of(cmds)
    hazards: set[HazardId] = set()
    for f, i, j in rel.ww:
        if start[i] >= 0 and start[j] >= 0:
            a, b = (i, j) if finish[i] < finish[j] else (j, i)
            hazards.add(("write-write", f, a, b))
    inf = n + 1
    for f, r, w in rel.rw:
        if start[r] < 0 or start[w] < 0:
            continue
        if start[r] < finish[w]:
            hazards.add(("read-write", f, r, w))
        elif r < n_script and (w if w < n_script else inf) > r:
            hazards.add(("speculative-write-read", f, w, r))
    return SymResult(state, frozenset(hazards))


def sequential(n: int, order: Sequence[int] | None = None) -> Schedule:
    order = range(n) if order is None else order
    return tuple(e for i in order for e in ((i, "start"), (i, "finish")))


def enumerate_schedules(
    n: int, threads: int, bound: int = MAX_ENUM_CMDS, limit: int | None = None
) -> Iterator[Schedule]:
    """Every well-formed schedule of ``n`` commands with at most ``threads``
    running at once.

    Adjacent start events commute (nothing is written between them), so
    each run of consecutive starts is only generated in ascending order.
    ``n`` above ``bound`` is rejected; ``limit`` caps the number yielded.
    """
    if n > bound:
        raise ValueError(f"refusing to enumerate schedules of {n} commands (bound {bound})")
    if threads < 1:
        raise ValueError("threads must be at least 1")
    events: list[Event] = []
    yielded = 0

    def go(unstarted: list[int], running: list[int], last_start: int) -> Iterator[Schedule]:
        nonlocal yielded
        if not unstarted and not running:
            yielded += 1
            yield tuple(events)
            return
        if len(running) < threads:
            for i in unstarted:
                if i <= last_start:
                    continue
                events.append((i, "start"))
                rest = [u for u in unstarted if u != i]
                yield from go(rest, running + [i], i)
                events.pop()
                if limit is not None and yielded >= limit:
                    return
        for i in running:
            events.append((i, "finish"))
            yield from go(unstarted, [r for r in running if r != i], -1)
            events.pop()
            if limit is not None and yielded >= limit:
                return

    yield from go(list(range(n)), [], -1)


# -- corpus ---------------------------------------------------------------------


def _random_fn(rng: random.Random) -> tuple[str, int]:
    return rng.choice(FN_KINDS), rng.randrange(100)


def _init(rng: random.Random, n_files: int) -> tuple[tuple[int, int | None], ...]:
    return tuple((f, rng.randrange(10) if rng.random() < 0.7 else None) for f in range(n_files))


def hazard_free_script(rng: random.Random, n_cmds: int, n_files: int = 6) -> SymScript:
    """Writes only go to files nothing earlier has touched."""
    touched: set[int] = set()
    cmds = []
    for _ in range(n_cmds):
        fresh = [f for f in range(n_files) if f not in touched]
        if not fresh:
            break
        writes = rng.sample(fresh, rng.randint(1, min(2, len(fresh))))
        others = [f for f in range(n_files) if f not in writes]
        reads = rng.sample(others, rng.randint(0, min(3, len(others))))
        kind, param = _random_fn(rng)
        cmds.append(SymCommand(tuple(reads), tuple(writes), kind, param))
        touched |= set(reads) | set(writes)
    return SymScript(tuple(cmds), _init(rng, n_files), n_files)


def random_script(rng: random.Random, n_cmds: int, n_files: int = 6) -> SymScript:
    cmds = []
    for _ in range(n_cmds):
        writes = rng.sample(range(n_files), rng.randint(1, 2))
        others = [f for f in range(n_files) if f not in writes]
        reads = rng.sample(others, rng.randint(0, 3))
        kind, param = _random_fn(rng)
        cmds.append(SymCommand(tuple(reads), tuple(writes), kind, param))
    return SymScript(tuple(cmds), _init(rng, n_files), n_files)


def generate_corpus(seed: int, size: int = 500, max_cmds: int = 5, n_files: int = 6) -> list[SymScript]:
    rng = random.Random(seed)
    corpus = []
    for k in range(size):
        n = rng.randint(1, max_cmds)
        make = hazard_free_script if k % 2 == 0 else random_script
        corpus.append(make(rng, n, n_files))
    return corpus


def disjoint_extra(script: SymScript, rng: random.Random) -> tuple[SymCommand, int]:
    """A command touching only files the script never mentions.

    Returns the command and the file count needed to hold it.
    """
    used = script.files
    spare = [f for f in range(script.n_files) if f not in used]
    n_files = script.n_files
    if not spare:
        spare = [n_files]
        n_files += 1
    w = rng.choice(spare)
    reads = tuple(f for f in spare if f != w)[:1]
    kind, param = _random_fn(rng)
    return SymCommand(reads, (w,), kind, param), n_files


# -- engine bridge --------------------------------------------------------------


def file_name(f: int) -> str:
    return f"f{f}"


def to_argv(c: SymCommand) -> list[str]:
    return ["calc", c.kind, str(c.param), ",".join(map(file_name, c.writes)), *map(file_name, c.reads)]


def label_index(label: str, n_script: int) -> int:
    return int(label[1:]) + (n_script if label[0] == "s" else 0)


def plan_of(sched: Schedule, n_script: int) -> list[tuple[str, str]]:
    def label(i: int) -> str:
        return f"r{i}" if i < n_script else f"s{i - n_script}"

    return [(ev, label(i)) for i, ev in sched]


class EngineRunner:
    """Replays symbolic schedules through the scripted engine in a scratch directory."""

    def __init__(self, workdir: str | None = None) -> None:
        self._own = workdir is None
        self.root = os.path.realpath(workdir or tempfile.mkdtemp(prefix="forge-oracle-"))

    def close(self) -> None:
        if self._own:
            shutil.rmtree(self.root, ignore_errors=True)

    def __enter__(self) -> EngineRunner:
        return self

    def __exit__(self, *exc) -> None:
        self.close()

    def _reset(self, init: Mapping[int, int | None], n_files: int) -> None:
        for name in os.listdir(self.root):
            p = os.path.join(self.root, name)
            if os.path.isdir(p):
                shutil.rmtree(p)
            else:
                os.unlink(p)
        for f in range(n_files):
            v = init.get(f)
            if v is not None:
                with open(os.path.join(self.root, file_name(f)), "w") as fh:
                    fh.write(str(v))

    def run(
        self,
        cmds: Sequence[SymCommand],
        sched: Schedule,
        init: Mapping[int, int | None],
        n_script: int,
        n_files: int,
    ) -> SymResult:
        from .db import TraceDb
        from .engine import BuildOptions
        from .scripted import run_scripted
        from .trace import Command

        self._reset(init, n_files)
        made = [Command.create(to_argv(c), self.root, env_fp="") for c in cmds]
        attempts: list = []
        report = run_scripted(
            made[:n_script],
            plan_of(sched, n_script),
            made[n_script:],
            BuildOptions(speculate=False),
            root=self.root,
            db=TraceDb(None),
            halt_on_hazard=False,
            attempts=attempts,
        )
        labels = attempts[0].instance_labels()
        by_name = {os.path.join(self.root, file_name(f)): f for f in range(n_files)}
        hazards = set()
        for h in report.raw_hazards:
            hazards.add(
                (
                    h.kind.value,
                    by_name[h.file],
                    label_index(labels[h.first.instance_id], n_script),
                    label_index(labels[h.second.instance_id], n_script),
                )
            )
        state: State = {}
        for f in range(n_files):
            try:
                with open(os.path.join(self.root, file_name(f))) as fh:
                    state[f] = int(fh.read())
            except FileNotFoundError:
                state[f] = None
        return SymResult(state, frozenset(hazards))


# -- claims ---------------------------------------------------------------------


@dataclass
class ClaimReport:
    checks: dict[str, int] = field(default_factory=dict)
    counterexamples: dict[str, list[str]] = field(default_factory=dict)

    def tally(self, claim: str, ok: bool, detail: str = "") -> None:
        self.checks[claim] = self.checks.get(claim, 0) + 1
        if not ok:
            self.counterexamples.setdefault(claim, []).append(detail)

    @property
    def ok(self) -> bool:
        return not any(self.counterexamples.values())

    def failures(self, claim: str) -> list[str]:
        return self.counterexamples.get(claim, [])

    def render(self) -> str:
        lines = []
        for claim in sorted(self.checks):
            bad = self.failures(claim)
            lines.append(f"{claim}: {self.checks[claim]} checks, {len(bad)} counterexamples")
            lines += [f"  {b}" for b in bad[:5]]
        return "\n".join(lines)


def _describe(script: SymScript, sched: Schedule | None = None, extra: SymCommand | None = None) -> str:
    text = "; ".join(f"{c.kind}({c.param}) {list(c.reads)}->{list(c.writes)}" for c in script.commands)
    if extra is not None:
        text += f" + extra {list(extra.reads)}->{list(extra.writes)}"
    if sched is not None:
        text += " | " + " ".join(f"{ev[0]}{i}" for i, ev in sched)
    return text


def _restrict(state: Mapping[int, int | None], files: set[int]) -> dict[int, int | None]:
    return {f: state.get(f) for f in files}


def check_script(
    script: SymScript,
    report: ClaimReport,
    *,
    threads: int = 2,
    extra_limit: int = 2000,
    engine: EngineRunner | None = None,
    engine_samples: int = 0,
    rng: random.Random | None = None,
) -> None:
    rng = rng or random.Random(0)
    cmds = list(script.commands)
    n = len(cmds)
    init = script.initial_state
    rel = _Relations.of(cmds)
    seq = run_symbolic(cmds, sequential(n), init, relations=rel)
    seq_clean = not seq.hazards

    # A clean sequential build is a fixed point.
    if seq_clean:
        again = run_symbolic(cmds, sequential(n), seq.state, relations=rel)
        report.tally("fixed-point", again.state == seq.state and not again.hazards, _describe(script))

    # All hazard-free reorderings agree.
    reference = None
    for order in itertools.permutations(range(n)):
        permuted = [cmds[i] for i in order]
        res = run_symbolic(permuted, sequential(n), init)
        if res.hazards:
            continue
        if reference is None:
            reference = res.state
        report.tally("reordering", res.state == reference, _describe(script) + f" order {order}")

    # Every interleaving: clean ones match the sequential state, and a
    # hazardous script hazards under every interleaving.
    schedules = list(enumerate_schedules(n, threads))
    for sched in schedules:
        res = run_symbolic(cmds, sched, init, relations=rel)
        if seq_clean:
            if not res.hazards:
                report.tally("interleaving", res.state == seq.state, _describe(script, sched))
        else:
            report.tally("hazard-preservation", bool(res.hazards), _describe(script, sched))

    # A file-disjoint extra command changes nothing the script sees.
    extra, n_files = disjoint_extra(script, rng)
    both = cmds + [extra]
    rel_x = _Relations.of(both)
    files = script.files
    for sched in enumerate_schedules(n + 1, threads, limit=extra_limit):
        res = run_symbolic(both, sched, init, n_script=n, relations=rel_x)
        if seq_clean:
            if not res.hazards:
                report.tally(
                    "speculation", _restrict(res.state, files) == _restrict(seq.state, files), _describe(script, sched, extra)
                )
        else:
            report.tally("hazard-preservation", bool(res.hazards), _describe(script, sched, extra))

    # Engine agreement on a sample of the same schedules.
    if engine is not None and engine_samples > 0:
        picks = [sequential(n)] + rng.sample(schedules, min(engine_samples, len(schedules)))
        for sched in picks:
            model = run_symbolic(cmds, sched, init, relations=rel)
            real = engine.run(cmds, sched, init, n, script.n_files)
            report.tally(
                "engine-agreement",
                model.hazards == real.hazards and _restrict(model.state, set(range(script.n_files))) == real.state,
                _describe(script, sched) + f" model={sorted(model.hazards)} engine={sorted(real.hazards)}",
            )
        x_sched = rng.choice(list(enumerate_schedules(n + 1, threads, limit=200)))
        model = run_symbolic(both, x_sched, init, n_script=n, relations=rel_x)
        real = engine.run(both, x_sched, init, n, n_files)
        report.tally(
            "engine-agreement",
            model.hazards == real.hazards and _restrict(model.state, set(range(n_files))) == real.state,
            _describe(script, x_sched, extra) + f" model={sorted(model.hazards)} engine={sorted(real.hazards)}",
        )


def check_claims(
    corpus: Sequence[SymScript],
    *,
    threads: int = 2,
    extra_limit: int = 2000,
    engine_samples: int = 0,
    seed: int = 0,
) -> ClaimReport:
    """Check every correctness property on every script; failures are collected, not raised."""
    report = ClaimReport()
    rng = random.Random(seed)
    runner = EngineRunner() if engine_samples > 0 else None
    try:
        for script in corpus:
            check_script(
                script,
                report,
                threads=threads,
                extra_limit=extra_limit,
                engine=runner,
                engine_samples=engine_samples,
                rng=rng,
            )
    finally:
        if runner is not None:
            runner.close()
    return report
