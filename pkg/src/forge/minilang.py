"""A tiny command language whose file accesses are known exactly.

Each verb declares which arguments it reads and writes, so the tracer for
this backend is exact by construction.  Verbs::

    write F LITERAL          writes F
    copy A B                 reads A, writes B
    concat OUT IN...         reads every IN, writes OUT
    hashsum OUT IN           reads IN, writes OUT = hex sha256 + newline
    append F LITERAL         reads and writes F (never reaches a fixed point)
    exists F                 probes F
    remove F                 deletes F
    sleep MS [VERB ARGS...]  waits, then optionally runs another verb
    compilec OUT IN          reads IN and its #include "..." closure
    calc KIND N OUTS IN...   integer arithmetic, OUTS comma separated

Relative paths resolve against the command's working directory.
"""

from __future__ import annotations

import re
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

from .fsutil import canonicalize, hash_bytes
from .trace import Command, CommandFailed, RawAccessReport

_INCLUDE = re.compile(r'^\s*#\s*include\s+"([^"]+)"', re.MULTILINE)

CALC_MODULUS = 1_000_003
CALC_KINDS = ("const", "copy", "sum", "mix")


class MiniLangError(ValueError):
    """A malformed MiniLang command line."""


def tokenize(line: str) -> list[str]:
    """Split on whitespace; ``"..."`` quotes a literal with ``\\n``, ``\\t``, ``\\"``, ``\\\\`` escapes."""
    tokens: list[str] = []
    buf: list[str] = []
    in_token = False
    i = 0
    n = len(line)
    while i < n:
        ch = line[i]
        if ch == '"':
            in_token = True
            i += 1
            while True:
                if i >= n:
                    raise MiniLangError(f"unterminated quote in: {line}")
                ch = line[i]
                if ch == '"':
                    i += 1
                    break
                if ch == "\\" and i + 1 < n:
                    esc = line[i + 1]
                    buf.append({"n": "\n", "t": "\t", '"': '"', "\\": "\\"}.get(esc, "\\" + esc))
                    i += 2
                    continue
                buf.append(ch)
                i += 1
        elif ch.isspace():
            if in_token:
                tokens.append("".join(buf))
                buf, in_token = [], False
            i += 1
        else:
            buf.append(ch)
            in_token = True
            i += 1
    if in_token:
        tokens.append("".join(buf))
    return tokens


@dataclass
class _Effects:
    reads: set[str] = field(default_factory=set)
    queries: set[str] = field(default_factory=set)
    outputs: dict[str, bytes | None] = field(default_factory=dict)
    text: str = ""


def _read(path: str, eff: _Effects) -> bytes:
    eff.reads.add(path)
    try:
        return Path(path).read_bytes()
    except FileNotFoundError:
        raise MiniLangError(f"cannot read {path}: no such file") from None


def _arity(args: Sequence[str], lo: int, hi: int | None, usage: str) -> None:
    if len(args) < lo or (hi is not None and len(args) > hi):
        raise MiniLangError(f"usage: {usage}")


def _v_write(args, cwd, eff):
    _arity(args, 2, 2, "write FILE LITERAL")
    eff.outputs[canonicalize(args[0], cwd)] = args[1].encode()


def _v_copy(args, cwd, eff):
    _arity(args, 2, 2, "copy SRC DST")
    eff.outputs[canonicalize(args[1], cwd)] = _read(canonicalize(args[0], cwd), eff)


def _v_concat(args, cwd, eff):
    _arity(args, 1, None, "concat OUT IN...")
    data = b"".join(_read(canonicalize(a, cwd), eff) for a in args[1:])
    eff.outputs[canonicalize(args[0], cwd)] = data


def _v_hashsum(args, cwd, eff):
    _arity(args, 2, 2, "hashsum OUT IN")
    data = _read(canonicalize(args[1], cwd), eff)
    eff.outputs[canonicalize(args[0], cwd)] = (hash_bytes(data) + "\n").encode()


def _v_append(args, cwd, eff):
    _arity(args, 2, 2, "append FILE LITERAL")
    path = canonicalize(args[0], cwd)
    eff.reads.add(path)
    try:
        old = Path(path).read_bytes()
    except FileNotFoundError:
        old = b""
    eff.outputs[path] = old + args[1].encode()


def _v_exists(args, cwd, eff):
    _arity(args, 1, 1, "exists FILE")
    path = canonicalize(args[0], cwd)
    eff.queries.add(path)
    eff.text = "yes\n" if Path(path).exists() else "no\n"


def _v_remove(args, cwd, eff):
    _arity(args, 1, 1, "remove FILE")
    eff.outputs[canonicalize(args[0], cwd)] = None


def preprocess(path: str, eff: _Effects) -> str:
    """Inline ``#include "..."`` lines, each file at most once."""
    seen: set[str] = set()

    def expand(p: str) -> str:
        if p in seen:
            return ""
        seen.add(p)
        text = _read(p, eff).decode("utf-8", errors="replace")
        base = str(Path(p).parent)
        return _INCLUDE.sub(lambda m: expand(canonicalize(m.group(1), base)), text)

    return expand(path)


def object_code(preprocessed: str) -> bytes:
    """Whitespace-insensitive stand-in for compiled output."""
    normalized = " ".join(preprocessed.split())
    return f"compilec-object {hash_bytes(normalized.encode())}\n".encode()


def _v_compilec(args, cwd, eff):
    _arity(args, 2, 2, "compilec OUT IN")
    text = preprocess(canonicalize(args[1], cwd), eff)
    eff.outputs[canonicalize(args[0], cwd)] = object_code(text)


def calc_values(kind: str, param: int, inputs: Sequence[int], n_out: int) -> list[int]:
    if kind == "const":
        return [param + k for k in range(n_out)]
    if kind == "copy":
        return [inputs[0] if inputs else 0] * n_out
    if kind == "sum":
        return [sum(inputs) + k for k in range(n_out)]
    if kind == "mix":
        h = param
        for v in inputs:
            h = (h * 31 + v) % CALC_MODULUS
        return [(h + 17 * k) % CALC_MODULUS for k in range(n_out)]
    raise MiniLangError(f"unknown calc kind {kind!r}")


def _v_calc(args, cwd, eff):
    _arity(args, 3, None, "calc KIND N OUT[,OUT...] IN...")
    kind, param, outs = args[0], args[1], args[2].split(",")
    try:
        n = int(param)
    except ValueError:
        raise MiniLangError(f"calc parameter must be an integer, got {param!r}") from None
    values = []
    for a in args[3:]:
        path = canonicalize(a, cwd)
        eff.reads.add(path)
        try:
            values.append(int(Path(path).read_text() or 0))
        except FileNotFoundError:
            values.append(0)
        except ValueError:
            raise MiniLangError(f"calc input {path} is not an integer") from None
    for out, v in zip(outs, calc_values(kind, n, values, len(outs))):
        eff.outputs[canonicalize(out, cwd)] = str(v).encode()


VERBS: dict[str, Callable[[Sequence[str], str, _Effects], None]] = {
    "write": _v_write,
    "copy": _v_copy,
    "concat": _v_concat,
    "hashsum": _v_hashsum,
    "append": _v_append,
    "exists": _v_exists,
    "remove": _v_remove,
    "compilec": _v_compilec,
    "calc": _v_calc,
}


def split_sleep(argv: Sequence[str]) -> tuple[float, list[str]]:
    """Peel leading ``sleep MS`` prefixes; returns (seconds, remaining argv)."""
    delay = 0.0
    argv = list(argv)
    while argv and argv[0] == "sleep":
        if len(argv) < 2:
            raise MiniLangError("usage: sleep MS [VERB ARGS...]")
        try:
            ms = int(argv[1])
        except ValueError:
            raise MiniLangError(f"sleep needs milliseconds, got {argv[1]!r}") from None
        if ms < 0:
            raise MiniLangError("sleep duration must be non-negative")
        delay += ms / 1000.0
        argv = argv[2:]
    return delay, argv


def static_accesses(argv: Sequence[str], cwd: str) -> tuple[set[str], set[str], set[str], set[str]]:
    """Access sets implied by the command line alone: (reads, writes, queries, deletes).

    ``compilec`` also reads its include closure, which is not visible here.
    """
    _, rest = split_sleep(argv)
    if not rest:
        return set(), set(), set(), set()
    verb, args = rest[0], rest[1:]
    c = lambda a: canonicalize(a, cwd)  # noqa: E731
    if verb in ("write",):
        return set(), {c(args[0])}, set(), set()
    if verb == "copy":
        return {c(args[0])}, {c(args[1])}, set(), set()
    if verb == "concat":
        return {c(a) for a in args[1:]}, {c(args[0])}, set(), set()
    if verb in ("hashsum", "compilec"):
        return {c(args[1])}, {c(args[0])}, set(), set()
    if verb == "append":
        return {c(args[0])}, {c(args[0])}, set(), set()
    if verb == "exists":
        return set(), set(), {c(args[0])}, set()
    if verb == "remove":
        return set(), set(), set(), {c(args[0])}
    if verb == "calc":
        return {c(a) for a in args[3:]}, {c(o) for o in args[2].split(",")}, set(), set()
    raise MiniLangError(f"unknown verb {verb!r}")


class MiniExecution:
    """Two-phase execution of one MiniLang command."""

    def __init__(self, cmd: Command) -> None:
        self.cmd = cmd
        try:
            self.delay, self._argv = split_sleep(cmd.argv)
        except MiniLangError as e:
            raise CommandFailed(cmd, str(e)) from None
        if self._argv and self._argv[0] not in VERBS:
            raise CommandFailed(cmd, f"unknown verb {self._argv[0]!r}")
        self._effects: _Effects | None = None

    def read(self) -> None:
        eff = _Effects()
        if self._argv:
            try:
                VERBS[self._argv[0]](self._argv[1:], self.cmd.cwd, eff)
            except MiniLangError as e:
                raise CommandFailed(self.cmd, str(e)) from None
        self._effects = eff

    def commit(self) -> RawAccessReport:
        if self._effects is None:
            self.read()
        eff = self._effects
        assert eff is not None
        writes, deletes = set(), set()
        try:
            for path, data in eff.outputs.items():
                p = Path(path)
                if data is None:
                    p.unlink(missing_ok=True)
                    deletes.add(path)
                else:
                    p.parent.mkdir(parents=True, exist_ok=True)
                    p.write_bytes(data)
                    writes.add(path)
        except OSError as e:
            raise CommandFailed(self.cmd, f"write failed: {e}") from None
        return RawAccessReport(
            reads=frozenset(eff.reads),
            writes=frozenset(writes),
            queries=frozenset(eff.queries),
            deletes=frozenset(deletes),
            output=eff.text,
        )
