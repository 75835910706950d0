from __future__ import annotations

import pytest

from forge.engine import BuildOptions, Policy
from forge.report import Status
from forge.scripted import PlanError, run_scripted, sequential_plan


def plan(text: str):
    """'+s0 -s0 +r0 -r0' → start/finish events."""
    return [("start" if tok[0] == "+" else "finish", tok[1:]) for tok in text.split()]


def test_sequential_plan_helper():
    assert sequential_plan(2) == plan("+r0 -r0 +r1 -r1")


def test_default_plan_is_sequential(ws):
    r = run_scripted([ws.cmd("write a 1"), ws.cmd("copy a b")], root=ws.root)
    assert r.status is Status.OK and ws.read("b") == "1"
    a, b = r.commands
    assert a.finish < b.start


def test_speculated_writer_read_by_required_command(ws):
    attempts = []
    ws.write("input.c", "orig")
    r = run_scripted(
        [ws.cmd("compilec main.o input.c")],
        plan("+s0 -s0 +r0 -r0"),
        [ws.cmd("write input.c x")],
        root=ws.root,
        attempts=attempts,
    )
    first = [h for h in r.hazards if h.attempt == 0]
    assert [(h.kind, h.recovery) for h in first] == [("speculative-write-read", "restartable")]
    assert r.restarted and r.status is Status.OK


def test_script_command_started_early_is_promoted(ws):
    ws.write("a", "1")
    r = run_scripted([ws.cmd("write x 1"), ws.cmd("copy a b")], plan("+r1 +r0 -r0 -r1"), root=ws.root)
    assert r.status is Status.OK and not r.restarted
    by_label = {c.label: c for c in r.commands}
    assert by_label["r1"].adopted and by_label["r1"].provenance == "required"


def test_early_start_that_reads_a_later_write_hazards(ws):
    ws.write("f", "0")
    steps = [ws.cmd("write f 1"), ws.cmd("copy f g")]
    r = run_scripted(steps, plan("+r1 +r0 -r0 -r1"), root=ws.root)
    assert [h.kind for h in r.hazards if h.attempt == 0] == ["read-write"]
    assert r.restarted and ws.read("g") == "1"


def test_relink_story_restarts(ws):
    ws.write("new.c", "int v = 2;\n")
    ws.write("old.o", "stale object")
    steps = [ws.cmd("compilec new.o new.c"), ws.cmd("concat app new.o")]
    extras = [ws.cmd("concat app old.o")]
    r = run_scripted(steps, plan("+s0 +r0 -s0 -r0 +r1 -r1"), extras, root=ws.root)
    (h,) = [h for h in r.hazards if h.attempt == 0]
    assert (h.kind, h.recovery) == ("write-write", "restartable")
    assert h.file.endswith("/app")
    assert r.restarted and r.status is Status.OK
    assert ws.read("app") == ws.read("new.o")


def test_continue_policy_keeps_going_on_continuable(ws):
    db_attempts = []
    steps = [ws.cmd("write out 1")]
    extras = [ws.cmd("write junk a"), ws.cmd("write junk b")]
    r = run_scripted(
        steps,
        plan("+s0 +s1 -s0 -s1"),
        extras,
        BuildOptions(policy=Policy.CONTINUE),
        root=ws.root,
        attempts=db_attempts,
    )
    assert [h.recovery for h in r.hazards] == ["continuable"]
    assert not r.restarted and r.status is Status.OK
    db = db_attempts[0].ctx.db
    assert not db.lookup(extras[0]) and not db.lookup(extras[1])
    assert db.lookup(steps[0])


def test_restart_policy_restarts_on_continuable(ws):
    steps = [ws.cmd("write out 1")]
    extras = [ws.cmd("write junk a"), ws.cmd("write junk b")]
    r = run_scripted(steps, plan("+s0 +s1 -s0 -s1"), extras, root=ws.root)
    assert r.restarted and r.status is Status.OK


def test_fatal_without_speculation(ws):
    r = run_scripted([ws.cmd("write f 1"), ws.cmd("write f 2")], root=ws.root)
    assert r.status is Status.HAZARD and not r.restarted
    assert [h.recovery for h in r.hazards] == ["fatal"]


def test_hazard_neighbours_are_not_persisted(ws):
    attempts = []
    steps = [ws.cmd("write e 1"), ws.cmd("write foo 1"), [ws.cmd("write a 1"), ws.cmd("write foo 2")]]
    r = run_scripted(steps, plan("+r0 -r0 +r1 -r1 +r2 +r3 -r3 -r2"), root=ws.root, attempts=attempts)
    assert r.status is Status.HAZARD
    db = attempts[0].ctx.db
    e, _, a, b = [ws.cmd(x) for x in ("write e 1", "write foo 1", "write a 1", "write foo 2")]
    assert db.lookup(e)
    assert not db.lookup(a) and not db.lookup(b)


def test_adopts_matching_extra(ws):
    steps = [ws.cmd("write a 1"), ws.cmd("write b 2")]
    r = run_scripted(steps, plan("+s0 -s0 +r0 -r0"), [ws.cmd("write b 2")], root=ws.root)
    assert r.status is Status.OK
    assert [c.label for c in r.commands] == ["s0", "r0"]
    assert r.commands[0].adopted and r.commands[0].position == 1


@pytest.mark.parametrize("bad", ["-r0", "+r0 +r0", "+zz", "+r0 -r0 -r0"])
def test_malformed_plans_are_rejected(ws, bad):
    with pytest.raises(PlanError):
        run_scripted([ws.cmd("write a 1")], plan(bad), root=ws.root)


def test_no_halt_mode_collects_all_hazards(ws):
    r = run_scripted(
        [ws.cmd("write f 1"), ws.cmd("write f 2"), ws.cmd("write f 3")],
        root=ws.root,
        halt_on_hazard=False,
    )
    assert len(r.hazards) == 3 and r.status is Status.OK
