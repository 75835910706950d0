"""Best-effort tracing of ordinary OS processes.

There is no portable syscall interception available, so this backend
approximates: files under the project root are hashed before and after the
process runs and any difference counts as a write (or delete).  Reads are
guessed from command-line arguments that name existing files.  Nothing in
the test suite depends on this being complete.
"""

from __future__ import annotations

import os
import subprocess

from .fsutil import MISSING, canonicalize, hash_file, is_under
from .trace import Command, CommandFailed, RawAccessReport

SKIP_DIRS = {".forge", ".git"}


def snapshot(root: str) -> dict[str, str]:
    state: dict[str, str] = {}
    for dirpath, dirnames, filenames in os.walk(root):
        dirnames[:] = [d for d in dirnames if d not in SKIP_DIRS]
        for name in filenames:
            path = os.path.join(dirpath, name)
            if os.path.isfile(path):
                state[canonicalize(path, root)] = hash_file(path)
    return state


class OsExecution:
    delay = 0.0

    def __init__(self, cmd: Command, fs_root: str) -> None:
        self.cmd = cmd
        self.root = fs_root

    def read(self) -> None:
        pass

    def commit(self) -> RawAccessReport:
        before = snapshot(self.root)
        try:
            proc = subprocess.run(list(self.cmd.argv), cwd=self.cmd.cwd, capture_output=True, text=True)
        except OSError as e:
            raise CommandFailed(self.cmd, str(e)) from None
        output = proc.stdout + proc.stderr
        if proc.returncode != 0:
            raise CommandFailed(self.cmd, f"exit status {proc.returncode}", output)
        after = snapshot(self.root)
        writes = {p for p, h in after.items() if before.get(p) != h}
        deletes = {p for p in before if p not in after}
        reads = set()
        for arg in self.cmd.argv[1:]:
            if arg.startswith("-"):
                continue
            path = canonicalize(arg, self.cmd.cwd)
            if is_under(path, self.root) and before.get(path, MISSING) != MISSING and path not in writes:
                reads.add(path)
        return RawAccessReport(
            reads=frozenset(reads),
            writes=frozenset(writes),
            deletes=frozenset(deletes),
            output=output,
        )
