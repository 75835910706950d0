"""Content-addressed shared output store.

Layout under the shared root::

    blobs/<first two hex digits>/<sha256>
    entries/<command key>/<reads fingerprint>.json

An entry lists the portable read set it was produced from and the outputs
it wrote.  Writes go through a temporary file and ``os.replace`` so readers
never see partial data.  The cache is an optimization: failures to publish
only warn.
"""

from __future__ import annotations

import json
import logging
import os
import shutil
import tempfile
from pathlib import Path
from typing import Mapping

from .fsutil import MISSING, SubstTable, hash_bytes, hash_file
from .trace import Command, Trace

logger = logging.getLogger(__name__)


class CacheCorruption(RuntimeError):
    """Restored bytes did not hash to what the entry promised."""


def reads_fingerprint(portable_reads: Mapping[str, str]) -> str:
    """Order-insensitive digest of a (portable path, hash) read set."""
    listing = json.dumps(sorted(portable_reads.items()), separators=(",", ":"))
    return hash_bytes(listing.encode())


def _atomic_write(path: Path, data: bytes) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=".tmp-")
    try:
        with os.fdopen(fd, "wb") as f:
            f.write(data)
        os.replace(tmp, path)
    except BaseException:
        Path(tmp).unlink(missing_ok=True)
        raise


class SharedCache:
    def __init__(self, root: str | os.PathLike[str], subst: SubstTable | None = None) -> None:
        self.root = Path(root)
        self.subst = subst or SubstTable()

    def blob_path(self, digest: str) -> Path:
        return self.root / "blobs" / digest[:2] / digest

    def _entry_dir(self, key: str) -> Path:
        return self.root / "entries" / key

    def _portable(self, files: Mapping[str, str]) -> dict[str, str]:
        return {self.subst.substitute(p): h for p, h in files.items()}

    def publish(self, cmd: Command, trace: Trace) -> bool:
        """Store the outputs of a cleared trace.  Returns False when skipped."""
        if not cmd.cacheable:
            return False
        if not self.root.is_dir():
            logger.warning("shared cache %s does not exist; not publishing", self.root)
            return False
        try:
            for path, digest in trace.writes.items():
                if digest == MISSING:
                    continue
                blob = self.blob_path(digest)
                if blob.exists():
                    continue
                data = Path(path).read_bytes()
                if hash_bytes(data) != digest:
                    logger.warning("%s changed since it was traced; not publishing %s", path, cmd.display())
                    return False
                _atomic_write(blob, data)
            reads = self._portable(trace.reads)
            entry = {
                "command_key": cmd.key,
                "reads_fingerprint": reads_fingerprint(reads),
                "reads": reads,
                "outputs": self._portable(trace.writes),
            }
            target = self._entry_dir(cmd.key) / f"{entry['reads_fingerprint']}.json"
            _atomic_write(target, json.dumps(entry, sort_keys=True, indent=1).encode())
        except OSError as e:
            logger.warning("could not publish %s to shared cache: %s", cmd.display(), e)
            return False
        return True

    def _load_entry(self, path: Path) -> dict | None:
        try:
            return json.loads(path.read_text())
        except FileNotFoundError:
            return None
        except (OSError, ValueError) as e:
            logger.warning("unreadable cache entry %s: %s", path, e)
            return None

    def candidates(self, cmd: Command) -> list[Trace]:
        """Traces of every published entry for ``cmd`` (for read-set discovery)."""
        if not cmd.cacheable:
            return []
        out = []
        try:
            paths = sorted(self._entry_dir(cmd.key).glob("*.json"))
        except OSError:
            return []
        for path in paths:
            entry = self._load_entry(path)
            if entry is None or entry.get("command_key") != cmd.key:
                continue
            try:
                out.append(self._entry_trace(entry))
            except (KeyError, ValueError) as e:
                logger.warning("skipping cache entry %s: %s", path, e)
        return out

    def _entry_trace(self, entry: dict) -> Trace:
        return Trace(
            entry["command_key"],
            {self.subst.expand(p): h for p, h in entry["reads"].items()},
            {self.subst.expand(p): h for p, h in entry["outputs"].items()},
        )

    def fetch(self, cmd: Command, current_reads: Mapping[str, str]) -> Trace | None:
        """Restore outputs for a matching read set; None on a miss.

        All outputs are staged next to their targets and verified before any
        is moved into place, so a miss never leaves a partial restore.
        """
        if not cmd.cacheable:
            return None
        fingerprint = reads_fingerprint(self._portable(current_reads))
        entry = self._load_entry(self._entry_dir(cmd.key) / f"{fingerprint}.json")
        if entry is None or entry.get("command_key") != cmd.key:
            return None
        try:
            trace = self._entry_trace(entry)
        except (KeyError, ValueError) as e:
            logger.warning("bad cache entry for %s: %s", cmd.display(), e)
            return None
        staged: list[tuple[str, str]] = []
        deletes: list[str] = []
        try:
            for path, digest in trace.writes.items():
                if digest == MISSING:
                    deletes.append(path)
                    continue
                blob = self.blob_path(digest)
                target = Path(path)
                target.parent.mkdir(parents=True, exist_ok=True)
                fd, tmp = tempfile.mkstemp(dir=target.parent, prefix=".forge-restore-")
                os.close(fd)
                os.chmod(tmp, 0o644)
                staged.append((tmp, path))
                try:
                    shutil.copyfile(blob, tmp)
                except FileNotFoundError:
                    logger.warning("cache blob %s missing for %s", digest, cmd.display())
                    raise _Miss() from None
                if hash_file(tmp) != digest:
                    logger.warning("cache blob %s is corrupt", digest)
                    raise _Miss()
        except (_Miss, OSError) as e:
            if isinstance(e, OSError):
                logger.warning("cache restore of %s failed: %s", cmd.display(), e)
            for tmp, _ in staged:
                Path(tmp).unlink(missing_ok=True)
            return None
        for tmp, path in staged:
            os.replace(tmp, path)
        for path in deletes:
            Path(path).unlink(missing_ok=True)
        for path, digest in trace.writes.items():
            if hash_file(path) != digest:
                raise CacheCorruption(f"{path} does not match cache entry after restore")
        return trace


class _Miss(Exception):
    pass
