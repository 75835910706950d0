"""Acceptance suite: one test per criterion, summarised at the end of the run."""

from __future__ import annotations

import json
import os
import random
import tempfile
import time
from pathlib import Path

import pytest

from forge.cli import main
from forge.db import TraceDb
from forge.engine import BuildOptions, build
from forge.oracle import EngineRunner, check_claims, disjoint_extra, file_name, generate_corpus, run_symbolic, sequential
from forge.report import Status
from forge.scripted import run_scripted
from forge.trace import Command

criterion = pytest.mark.criterion

MAIN_C = '#include "util.h"\nint main() { return util(); }\n'
UTIL_C = '#include "util.h"\nint util() { return 42; }\n'
UTIL_H = "int util();\n"
PIPELINE = ["compilec main.o main.c", "compilec util.o util.c", "concat main.exe main.o util.o"]


def plan(text: str):
    return [("start" if tok[0] == "+" else "finish", tok[1:]) for tok in text.split()]


def by_command(report) -> dict[str, str]:
    return {c.command: c.disposition for c in report.commands if c.position is not None}


def seed_project(ws) -> None:
    ws.write("main.c", MAIN_C)
    ws.write("util.c", UTIL_C)
    ws.write("util.h", UTIL_H)


# -- incremental rebuild scenarios ----------------------------------------------


@criterion(1, "five rebuild scenarios give the expected dispositions")
def test_five_rebuild_scenarios(ws):
    t0 = time.monotonic()
    seed_project(ws)
    db = ws.db()
    steps = [ws.cmd(line) for line in PIPELINE]
    compile_main, compile_util, link = PIPELINE
    E, S = "executed", "skipped"

    def rebuild():
        r = build(steps, root=ws.root, db=db)
        assert r.status is Status.OK and not r.hazards
        return by_command(r)

    assert rebuild() == {compile_main: E, compile_util: E, link: E}
    assert rebuild() == {compile_main: S, compile_util: S, link: S}
    exe = ws.read("main.exe")

    # Whitespace only: the object file is unchanged, so the link skips.
    ws.write("main.c", '#include "util.h"\nint  main()  {  return util(); }\n\n\n')
    assert rebuild() == {compile_main: E, compile_util: S, link: S}
    assert ws.read("main.exe") == exe

    ws.write("main.c", '#include "util.h"\nint main() { return util() + 1; }\n')
    assert rebuild() == {compile_main: E, compile_util: S, link: E}
    assert ws.read("main.exe") != exe

    ws.write("main.c", '#include "util.h"\nint main() { return util() + 2; }\n')
    ws.write("util.c", '#include "util.h"\nint util() { return 7; }\n')
    assert rebuild() == {compile_main: E, compile_util: E, link: E}
    assert time.monotonic() - t0 < 5.0


@criterion(2, "speculation overlaps the two compiles on a rebuild")
def test_speculation_recovers_parallelism(ws):
    unit = 0.3
    seed_project(ws)
    db = ws.db()
    steps = [ws.cmd(f"sleep 300 {line}") for line in PIPELINE]
    opts = BuildOptions(threads=2)

    first = build(steps, opts, root=ws.root, db=db)
    assert first.status is Status.OK and first.counts["speculated"] == 0
    ws.write("main.c", '#include "util.h"\nint main() { return util() * 3; }\n')
    ws.write("util.c", '#include "util.h"\nint util() { return 5; }\n')
    second = build(steps, opts, root=ws.root, db=db)
    assert second.status is Status.OK and second.counts["executed"] == 3

    print(f"first build {first.wall_time:.3f}s, second build {second.wall_time:.3f}s")
    assert 0.75 * 3 * unit <= first.wall_time <= 1.25 * 3 * unit
    assert 0.75 * 2 * unit <= second.wall_time <= 1.25 * 2 * unit
    assert second.counts["speculated"] >= 1


# -- fixed point over generated MiniLang scripts ----------------------------------


def random_minilang_script(rng: random.Random) -> tuple[dict[str, str], list]:
    """A hazard-free script: every command writes fresh files from earlier ones."""
    files = {"in0.txt": f"alpha {rng.random()}\n", "in1.txt": f"beta {rng.randint(0, 9)}\n", "n0": str(rng.randint(0, 99))}
    files["inc.h"] = f"int k = {rng.randint(0, 5)};\n"
    files["prog.c"] = '#include "inc.h"\nint main() { return k; }\n'
    text_files = ["in0.txt", "in1.txt"]
    numbers = ["n0"]
    lines: list = []
    n = rng.randint(1, 6)
    i = 0
    while i < n:
        group_size = 2 if i + 1 < n and rng.random() < 0.3 else 1
        text_pool, num_pool = list(text_files), list(numbers)
        group = []
        for _ in range(group_size):
            out = f"out{i}"
            verb = rng.choice(["write", "copy", "concat", "hashsum", "compilec", "calc", "exists"])
            if verb == "write":
                line = f"write {out} v{rng.randint(0, 9)}"
            elif verb == "copy":
                line = f"copy {rng.choice(text_pool)} {out}"
            elif verb == "concat":
                line = f"concat {out} " + " ".join(rng.sample(text_pool, min(len(text_pool), rng.randint(1, 3))))
            elif verb == "hashsum":
                line = f"hashsum {out} {rng.choice(text_pool)}"
            elif verb == "compilec":
                line = f"compilec {out} prog.c"
            elif verb == "exists":
                line = f"exists missing{i}"
            else:
                line = f"calc mix {rng.randint(0, 9)} {out} " + " ".join(rng.sample(num_pool, min(len(num_pool), rng.randint(1, 2))))
            group.append(line)
            if verb == "calc":
                numbers.append(out)
            elif verb != "exists":
                text_files.append(out)
            i += 1
        lines.append(group[0] if len(group) == 1 else group)
    return files, lines


@criterion(3, "an immediate rebuild of a hazard-free script executes nothing")
def test_rebuild_is_a_fixed_point():
    rng = random.Random(20261014)
    checked = 0
    for k in range(200):
        files, lines = random_minilang_script(rng)
        with tempfile.TemporaryDirectory() as tmp:
            root = os.path.realpath(tmp)
            for name, text in files.items():
                Path(root, name).write_text(text)
            make = lambda line: Command.create(line.split(), root, env_fp="t")  # noqa: E731
            steps = [make(s) if isinstance(s, str) else [make(x) for x in s] for s in lines]
            db = TraceDb(None)
            opts = BuildOptions(threads=1 + k % 2)
            first = build(steps, opts, root=root, db=db)
            assert first.status is Status.OK and not first.hazards, lines
            again = build(steps, opts, root=root, db=db)
            assert again.status is Status.OK, lines
            assert again.counts["executed"] == 0, lines
            assert {c.disposition for c in again.commands} == {"skipped"}, lines
        checked += 1
    assert checked >= 200


# -- oracle corpus ------------------------------------------------------------------


CORPUS_SEED = 2026


@pytest.fixture(scope="module")
def corpus():
    return generate_corpus(CORPUS_SEED, size=500, max_cmds=5, n_files=6)


@pytest.fixture(scope="module")
def claims(corpus):
    t0 = time.monotonic()
    report = check_claims(corpus, threads=2, engine_samples=6, seed=CORPUS_SEED)
    return report, time.monotonic() - t0


@criterion(4, "clean interleavings agree and engine hazards match the model")
def test_interleavings_and_engine_agreement(corpus, claims):
    report, elapsed = claims
    print(report.render())
    print(f"oracle corpus checked in {elapsed:.1f}s")
    assert len(corpus) >= 500
    assert all(len(s.commands) <= 5 and s.files <= set(range(6)) for s in corpus)
    for claim in ("fixed-point", "reordering", "interleaving", "engine-agreement"):
        assert report.checks.get(claim, 0) > 0, claim
        assert not report.failures(claim), report.failures(claim)[:3]
    assert elapsed < 120


def _bytes(root: str, n_files: int) -> dict[str, bytes | None]:
    out = {}
    for f in range(n_files):
        p = os.path.join(root, file_name(f))
        out[file_name(f)] = Path(p).read_bytes() if os.path.exists(p) else None
    return out


@criterion(5, "file-disjoint speculated commands leave script files byte-identical")
def test_disjoint_speculation_changes_nothing(corpus, claims):
    report, _ = claims
    assert report.checks.get("speculation", 0) > 0
    assert not report.failures("speculation"), report.failures("speculation")[:3]

    rng = random.Random(CORPUS_SEED)
    compared = 0
    with EngineRunner() as runner:
        for script in corpus:
            cmds = list(script.commands)
            n = len(cmds)
            init = script.initial_state
            if run_symbolic(cmds, sequential(n), init).hazards:
                continue
            extra, n_files = disjoint_extra(script, rng)
            runner.run(cmds, sequential(n), init, n, n_files)
            baseline = _bytes(runner.root, n_files)
            both = cmds + [extra]
            # Overlap the extra with a random stretch of the sequential script.
            events = list(sequential(n))
            i = rng.randint(0, len(events))
            j = rng.randint(i, len(events))
            sched = tuple(events[:i] + [(n, "start")] + events[i:j] + [(n, "finish")] + events[j:])
            assert not run_symbolic(both, sched, init, n_script=n).hazards
            result = runner.run(both, sched, init, n, n_files)
            assert not result.hazards
            after = _bytes(runner.root, n_files)
            for f in script.files:
                assert after[file_name(f)] == baseline[file_name(f)], (script, sched)
            compared += 1
    assert compared >= 200


@criterion(6, "a script that hazards sequentially hazards under every schedule")
def test_hazards_are_preserved(corpus, claims):
    report, _ = claims
    hazardous = [s for s in corpus if run_symbolic(list(s.commands), sequential(len(s.commands)), s.initial_state).hazards]
    assert hazardous
    assert report.checks.get("hazard-preservation", 0) > 0
    assert not report.failures("hazard-preservation"), report.failures("hazard-preservation")[:3]


# -- hazard behaviour on the real engine ------------------------------------------------


@criterion(7, "double write and hash cycle are fatal without speculation")
def test_textbook_hazards_are_fatal(ws):
    opts = BuildOptions(speculate=False)
    foo = ws.path("foo.txt")

    r = build([ws.cmd("write foo.txt 1"), ws.cmd("write foo.txt 2")], opts, root=ws.root, db=ws.db())
    assert r.status is Status.HAZARD and r.exit_code == 2 and not r.restarted
    assert [(h.kind, h.file, h.recovery) for h in r.hazards] == [("write-write", foo, "fatal")]

    ws.write("foo.txt", "seed\n")
    steps = [ws.cmd("hashsum bar.txt foo.txt"), ws.cmd("hashsum foo.txt bar.txt")]
    r = build(steps, opts, root=ws.root, db=ws.db())
    assert r.status is Status.HAZARD and not r.restarted
    assert [(h.kind, h.file, h.recovery) for h in r.hazards] == [("read-write", foo, "fatal")]


@criterion(8, "a stale speculated relink is restartable and the rerun succeeds")
def test_relink_hazard_restarts(ws):
    db = ws.db()
    ws.write("a.c", "int a;\n")
    ws.write("b.c", "int b;\n")
    old = [ws.cmd("compilec a.o a.c"), ws.cmd("concat lib.so a.o")]
    assert run_scripted(old, root=ws.root, db=db).status is Status.OK

    # The script gains a second object; the last run's link is still speculated.
    new = [ws.cmd("compilec a.o a.c"), ws.cmd("compilec b.o b.c"), ws.cmd("concat lib.so a.o b.o")]
    r = run_scripted(new, plan("+r0 -r0 +s0 +r1 -s0 -r1 +r2 -r2"), [old[1]], root=ws.root, db=db)
    first = [h for h in r.hazards if h.attempt == 0]
    assert [(h.kind, h.file, h.recovery) for h in first] == [("write-write", ws.path("lib.so"), "restartable")]
    assert r.restarted and r.status is Status.OK
    assert r.to_json()["restarted"] is True
    assert ws.read("lib.so") == ws.read("a.o") + ws.read("b.o")


@criterion(9, "shared cache restores byte-identical outputs in another checkout")
def test_cache_round_trip_between_checkouts(tmp_path, monkeypatch, capsys):
    store = tmp_path / "store"
    store.mkdir()
    script = "\n".join(["compilec obj/main.o main.c", "compilec obj/util.o util.c", "concat bin/main.exe obj/main.o obj/util.o"])

    def checkout(name: str) -> Path:
        d = tmp_path / name
        (d / "obj").mkdir(parents=True)
        (d / "bin").mkdir()
        for f, text in (("main.c", MAIN_C), ("util.c", UTIL_C), ("util.h", UTIL_H), ("build.txt", script)):
            (d / f).write_text(text)
        return d

    def run_in(d: Path) -> dict:
        monkeypatch.chdir(d)
        capsys.readouterr()
        assert main(["run", "build.txt", "--shared-cache", str(store), "--report", "json"]) == 0
        return json.loads(capsys.readouterr().out)

    a, b = checkout("alice"), checkout("bob")
    first = run_in(a)
    assert first["counts"]["executed"] == 3
    second = run_in(b)
    assert second["counts"]["executed"] == 0 and second["counts"]["restored"] == 3
    for out in ("obj/main.o", "obj/util.o", "bin/main.exe"):
        assert (b / out).read_bytes() == (a / out).read_bytes()
    # Paths are stored relative to the checkout, never as alice's absolute root.
    for entry in (store / "entries").rglob("*.json"):
        assert str(a) not in entry.read_text()


@criterion(10, "traces touched by a hazard are not persisted")
def test_hazard_blocks_trace_persistence(ws):
    attempts = []
    lines = ["write e 1", "write foo 1", "write a 1", "write foo 2"]
    e, foo1, a, b = [ws.cmd(x) for x in lines]
    # B (second foo writer) hazards while A runs alongside it; E finished earlier.
    r = run_scripted([e, foo1, [a, b]], plan("+r0 -r0 +r1 -r1 +r2 +r3 -r3 -r2"), root=ws.root, attempts=attempts)
    assert r.status is Status.HAZARD
    assert [h.kind for h in r.hazards] == ["write-write"]
    db = attempts[0].ctx.db
    assert db.lookup(e)
    assert not db.lookup(a) and not db.lookup(b)
