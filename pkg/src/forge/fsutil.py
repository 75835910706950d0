"""Content hashing, lexical path canonicalization and path substitution.

Every file name that enters a trace goes through :func:`canonicalize`, and
every path that is persisted (trace database, shared cache) is rewritten
with a :class:`SubstTable` so results carry over between checkouts and
machines.
"""

from __future__ import annotations

import hashlib
import os
import posixpath
import re
from dataclasses import dataclass
from typing import Iterable

HASH_ALGORITHM = "sha256"

#: Digest recorded for a file that does not exist.  Never a valid hex digest.
MISSING = "absent"

_CHUNK = 1 << 16
_VAR_NAME = re.compile(r"[A-Za-z_][A-Za-z0-9_]*")


class SubstitutionError(ValueError):
    """Raised when portable path text cannot be expanded."""


def hash_bytes(data: bytes) -> str:
    return hashlib.sha256(data).hexdigest()


def hash_file(path: str | os.PathLike[str]) -> str:
    """Return the hex SHA-256 of the file's contents, or :data:`MISSING`.

    Only the bytes are hashed; timestamps and permissions never matter.
    Any error other than the file not existing propagates.
    """
    digest = hashlib.sha256()
    try:
        with open(path, "rb") as f:
            for chunk in iter(lambda: f.read(_CHUNK), b""):
                digest.update(chunk)
    except (FileNotFoundError, NotADirectoryError):
        return MISSING
    return digest.hexdigest()


def canonicalize(raw: str, cwd: str) -> str:
    """Lexically resolve ``raw`` against ``cwd`` into an absolute path.

    The file does not need to exist.  Symlinks are not resolved and case is
    preserved, so comparison is byte-wise.
    """
    if not raw:
        raise ValueError("cannot canonicalize an empty path")
    joined = posixpath.join(cwd, raw)
    if not joined.startswith("/"):
        joined = posixpath.join(os.getcwd(), joined)
    norm = posixpath.normpath(joined)
    # POSIX normpath keeps a leading "//"; we treat it like "/".
    if norm.startswith("//"):
        norm = "/" + norm.lstrip("/")
    return norm


def is_under(path: str, prefix: str) -> bool:
    return path == prefix or path.startswith(prefix.rstrip("/") + "/")


def _escape(text: str) -> str:
    return text.replace("$", "$$")


@dataclass(frozen=True)
class SubstTable:
    """Ordered ``(concrete prefix, variable name)`` pairs.

    Variable names are written without the ``$``.  When several prefixes
    match, the longest wins; equal lengths fall back to table order.
    """

    entries: tuple[tuple[str, str], ...] = ()

    def __post_init__(self) -> None:
        for prefix, name in self.entries:
            if not prefix.startswith("/") or prefix == "/":
                raise ValueError(f"substitution prefix must be a non-root absolute path: {prefix!r}")
            if not _VAR_NAME.fullmatch(name):
                raise ValueError(f"invalid substitution variable name: {name!r}")

    @classmethod
    def of(cls, pairs: Iterable[tuple[str, str]]) -> SubstTable:
        return cls(tuple((canonicalize(p, "/"), n.lstrip("$")) for p, n in pairs))

    @classmethod
    def default(cls, root: str, home: str | None = None) -> SubstTable:
        """``$ROOT`` for the project directory, ``$HOME`` for the user's home."""
        pairs = [(root, "ROOT")]
        home = home if home is not None else os.path.expanduser("~")
        if home and home.startswith("/") and home != "/":
            pairs.append((home, "HOME"))
        return cls.of(pairs)

    def _match(self, path: str) -> tuple[str, str] | None:
        best: tuple[str, str] | None = None
        for prefix, name in self.entries:
            if is_under(path, prefix) and (best is None or len(prefix) > len(best[0])):
                best = (prefix, name)
        return best

    def substitute(self, path: str) -> str:
        """Rewrite a canonical path into portable text."""
        match = self._match(path)
        if match is None:
            return _escape(path)
        prefix, name = match
        return f"${name}" + _escape(path[len(prefix):])

    def expand(self, portable: str) -> str:
        """Inverse of :meth:`substitute` on the same table."""
        lookup: dict[str, str] = {}
        for prefix, name in self.entries:
            lookup.setdefault(name, prefix)
        out: list[str] = []
        i = 0
        while i < len(portable):
            ch = portable[i]
            if ch != "$":
                out.append(ch)
                i += 1
                continue
            if portable.startswith("$$", i):
                out.append("$")
                i += 2
                continue
            m = _VAR_NAME.match(portable, i + 1)
            if m is None:
                raise SubstitutionError(f"dangling '$' at offset {i} in {portable!r}")
            token = m.group(0)
            if token not in lookup:
                raise SubstitutionError(f"unknown substitution variable ${token} in {portable!r}")
            out.append(lookup[token])
            i = m.end()
        return "".join(out)


__all__ = [
    "HASH_ALGORITHM",
    "MISSING",
    "SubstTable",
    "SubstitutionError",
    "canonicalize",
    "hash_bytes",
    "hash_file",
    "is_under",
]
