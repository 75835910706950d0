"""``forge`` command-line entry point.

Exit codes: 0 success, 1 command failure, 2 fatal hazard, 3 usage error.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path
from typing import Sequence

from .db import DEFAULT_DB, DbError, TraceDb
from .engine import BuildOptions, Policy, build, open_db
from .fsutil import SubstTable, canonicalize
from .script import ScriptSyntaxError, parse_line, parse_script
from .trace import Command, CommandFailed, TraceError, env_fingerprint, execute_traced, finalize_trace

EXIT_USAGE = 3


class _Parser(argparse.ArgumentParser):
    def error(self, message: str):  # type: ignore[override]
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _add_db(p: argparse.ArgumentParser) -> None:
    p.add_argument("--db", help=f"trace database (default: {DEFAULT_DB})")


def _parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="forge", description="Forward build system with traced, speculative execution.")
    parser.add_argument("-v", "--verbose", action="store_true", help="log scheduling decisions")
    sub = parser.add_subparsers(dest="subcommand", required=True, parser_class=_Parser)

    run = sub.add_parser("run", help="run a build script")
    run.add_argument("script", help="script file, one command per line")
    run.add_argument("--threads", type=int, default=1, help="worker slots (default: 1)")
    run.add_argument("--no-speculate", action="store_true", help="never start commands ahead of the script")
    run.add_argument("--policy", choices=[p.value for p in Policy], default=Policy.RESTART.value)
    _add_db(run)
    run.add_argument("--shared-cache", help="shared output cache directory (default: $FORGE_CACHE)")
    run.add_argument("--ignore", action="append", default=[], metavar="GLOB", help="untracked paths")
    run.add_argument("--input", action="append", default=[], metavar="PATH", help="declared input file")
    run.add_argument("--report", choices=["text", "json"], default="text")

    one = sub.add_parser("trace-one", help="run a single command and print its trace")
    one.add_argument("command", nargs=argparse.REMAINDER, help="command line (prefix ! for an OS command)")
    one.add_argument("--ignore", action="append", default=[], metavar="GLOB")

    show = sub.add_parser("db-show", help="list stored traces")
    _add_db(show)

    gc = sub.add_parser("cache-gc-noop", help="report shared cache usage without deleting anything")
    gc.add_argument("--shared-cache", help="shared output cache directory (default: $FORGE_CACHE)")

    orc = sub.add_parser("oracle", help="check the build model on a random corpus")
    orc.add_argument("--seed", type=int, default=0)
    orc.add_argument("--max-cmds", type=int, default=5)
    orc.add_argument("--size", type=int, default=100, help="number of scripts")
    orc.add_argument("--engine-samples", type=int, default=2, help="schedules per script replayed on the engine")
    return parser


def _root() -> str:
    return canonicalize(os.getcwd(), "/")


def _subst(root: str) -> SubstTable:
    return SubstTable.default(root, os.path.expanduser("~"))


def cmd_run(args: argparse.Namespace) -> int:
    if args.threads < 1:
        print("forge: --threads must be at least 1", file=sys.stderr)
        return EXIT_USAGE
    try:
        text = Path(args.script).read_text()
    except OSError as e:
        print(f"forge: cannot read {args.script}: {e.strerror}", file=sys.stderr)
        return EXIT_USAGE
    root = _root()
    opts = BuildOptions(
        threads=args.threads,
        speculate=not args.no_speculate,
        policy=Policy(args.policy),
        shared_cache=args.shared_cache or os.environ.get("FORGE_CACHE") or None,
        ignore_globs=tuple(args.ignore),
        input_paths=tuple(args.input),
    )
    try:
        db, _ = open_db(root, args.db, _subst(root))
    except DbError as e:
        print(f"forge: {e}", file=sys.stderr)
        return 1
    with db:
        env_fp = env_fingerprint()
        make = lambda argv, **kw: Command.create(argv, root, env_fp=env_fp, subst=db.subst, **kw)  # noqa: E731
        try:
            steps = parse_script(text, make)
        except ScriptSyntaxError as e:
            print(f"forge: {args.script}: {e}", file=sys.stderr)
            return EXIT_USAGE
        report = build(steps, opts, root=root, db=db)
    print(report.render_json() if args.report == "json" else report.render_text())
    return report.exit_code


def cmd_trace_one(args: argparse.Namespace) -> int:
    words = [w for w in args.command if w != "--"]
    if not words:
        print("forge: trace-one needs a command", file=sys.stderr)
        return EXIT_USAGE
    root = _root()
    line = " ".join(words) if words[0].startswith(("!", "~")) else None
    if line is not None:
        argv, backend, cacheable = parse_line(line)
    else:
        argv, backend, cacheable = words, None, True
    kw = {"backend": backend} if backend is not None else {}
    cmd = Command.create(argv, root, subst=_subst(root), cacheable=cacheable, **kw)
    try:
        trace = finalize_trace(cmd, execute_traced(cmd, root), args.ignore)
    except CommandFailed as e:
        print(f"forge: {e}", file=sys.stderr)
        if e.output:
            print(e.output, file=sys.stderr, end="")
        return 1
    except TraceError as e:
        print(f"forge: {e}", file=sys.stderr)
        return 1
    print(json.dumps({"command": cmd.display(), **trace.to_json(_subst(root))}, indent=2))
    return 0


def cmd_db_show(args: argparse.Namespace) -> int:
    root = _root()
    path = Path(args.db) if args.db else Path(root) / DEFAULT_DB
    if not path.exists():
        print(f"forge: no database at {path}", file=sys.stderr)
        return 1
    try:
        db = TraceDb(path, _subst(root))
    except DbError as e:
        print(f"forge: {e}", file=sys.stderr)
        return 1
    with db:
        for cmd, traces in db.entries():
            name = cmd.display() if cmd is not None else "<unknown command>"
            for i, t in enumerate(traces):
                print(f"{name}  [{i}] reads={len(t.reads)} writes={len(t.writes)}")
                for p, h in sorted(t.reads.items()):
                    print(f"    read  {db.subst.substitute(p)} {h[:12]}")
                for p, h in sorted(t.writes.items()):
                    print(f"    write {db.subst.substitute(p)} {h[:12]}")
        last = db.load_last_run()
        print(f"last run: {len(last)} commands")
    return 0


def cmd_cache_gc_noop(args: argparse.Namespace) -> int:
    location = args.shared_cache or os.environ.get("FORGE_CACHE")
    if not location:
        print("forge: no shared cache configured", file=sys.stderr)
        return EXIT_USAGE
    root = Path(location)
    blobs = [p for p in (root / "blobs").rglob("*") if p.is_file()]
    entries = [p for p in (root / "entries").rglob("*.json")]
    size = sum(p.stat().st_size for p in blobs)
    print(f"{len(entries)} entries, {len(blobs)} blobs, {size} bytes; nothing deleted")
    return 0


def cmd_oracle(args: argparse.Namespace) -> int:
    from .oracle import MAX_ENUM_CMDS, check_claims, generate_corpus

    if not 1 <= args.max_cmds < MAX_ENUM_CMDS:
        print(f"forge: --max-cmds must be between 1 and {MAX_ENUM_CMDS - 1}", file=sys.stderr)
        return EXIT_USAGE
    corpus = generate_corpus(args.seed, size=args.size, max_cmds=args.max_cmds)
    report = check_claims(corpus, engine_samples=args.engine_samples, seed=args.seed)
    print(report.render())
    return 0 if report.ok else 1


COMMANDS = {
    "run": cmd_run,
    "trace-one": cmd_trace_one,
    "db-show": cmd_db_show,
    "cache-gc-noop": cmd_cache_gc_noop,
    "oracle": cmd_oracle,
}


def main(argv: Sequence[str] | None = None) -> int:
    args = _parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s: %(message)s")
    return COMMANDS[args.subcommand](args)


if __name__ == "__main__":
    sys.exit(main())
