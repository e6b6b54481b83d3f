"""Append-only, hash-chained audit ledger of every provider exchange and pipeline decision.

File format: UTF-8 text, one canonical JSON object per line, each line
terminated by ``\\n``. The first line is a header record; entry lines follow
with ``sequence`` 1, 2, ... . Every entry carries ``prev_hash`` (the previous
entry's ``entry_hash``, or 64 zeros for the first entry) and ``entry_hash``,
the SHA-256 of the canonical JSON of all its other fields. Canonical JSON is
``json.dumps(obj, sort_keys=True, ensure_ascii=False, separators=(",", ":"))``;
verification also requires each stored line to be byte-identical to the
canonical form of its parsed record.
"""

from __future__ import annotations

import datetime as dt
import hashlib
import json
import os
import threading
from collections.abc import Callable, Mapping
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Any

HASH_ALGORITHM = "sha256"
GENESIS_HASH = "0" * 64
FORMAT = "llmhara-ledger/1"


class LedgerError(Exception):
    """The ledger could not be written; no exchange may proceed unrecorded."""


class LedgerIntegrityError(LedgerError):
    def __init__(self, sequence: int, reason: str) -> None:
        super().__init__(f"ledger integrity violated at sequence {sequence}: {reason}")
        self.sequence = sequence
        self.reason = reason


def canonical_json(obj: Any) -> str:
    return json.dumps(obj, sort_keys=True, ensure_ascii=False, separators=(",", ":"))


def digest(obj: Any) -> str:
    return hashlib.sha256(canonical_json(obj).encode("utf-8")).hexdigest()


def utc_now() -> str:
    return dt.datetime.now(dt.timezone.utc).isoformat(timespec="microseconds")


@dataclass(frozen=True)
class LedgerEntry:
    sequence: int
    kind: str  # "exchange" | "decision"
    stage: str
    logical_key: str
    attempt: int
    retry: int
    request_digest: str
    request_text: str
    response_text: str
    finish_reason: str
    timestamp: str
    data: Mapping[str, Any]
    prev_hash: str
    entry_hash: str = ""

    def body(self) -> dict[str, Any]:
        d = asdict(self)
        d.pop("entry_hash")
        d["data"] = dict(self.data)
        return d

    def record(self) -> dict[str, Any]:
        return {**self.body(), "entry_hash": self.entry_hash}

    @classmethod
    def from_record(cls, rec: Mapping[str, Any]) -> "LedgerEntry":
        return cls(**rec)


@dataclass
class IntegrityReport:
    clean: bool
    entries: int = 0
    sequence: int | None = None
    reason: str = ""
    header: dict[str, Any] = field(default_factory=dict)

    def __str__(self) -> str:
        if self.clean:
            return f"clean ({self.entries} entries)"
        return f"divergence at sequence {self.sequence}: {self.reason}"


def make_header(**fields: Any) -> dict[str, Any]:
    header = {"kind": "header", "format": FORMAT, "hash_algorithm": HASH_ALGORITHM, **fields}
    header["header_hash"] = digest(header)
    return header


def _parse(path: str | Path) -> tuple[dict[str, Any], list[LedgerEntry]]:
    """Read and fully verify a ledger; raise LedgerIntegrityError at the first bad line."""
    raw = Path(path).read_bytes()
    lines = raw.split(b"\n")
    # a well-formed file ends with "\n", so the final split element is empty
    tail = lines.pop()
    if not lines:
        raise LedgerIntegrityError(0, "missing header")

    def decode(seq: int, line: bytes) -> dict[str, Any]:
        try:
            text = line.decode("utf-8")
            rec = json.loads(text)
        except (UnicodeDecodeError, json.JSONDecodeError) as exc:
            raise LedgerIntegrityError(seq, f"unreadable record ({exc})") from None
        if not isinstance(rec, dict):
            raise LedgerIntegrityError(seq, "record is not an object")
        if canonical_json(rec) != text:
            raise LedgerIntegrityError(seq, "record is not in canonical form")
        return rec

    header = decode(0, lines[0])
    claimed = header.get("header_hash")
    if header.get("kind") != "header" or claimed != digest({k: v for k, v in header.items() if k != "header_hash"}):
        raise LedgerIntegrityError(0, "header hash mismatch")
    if header.get("hash_algorithm") != HASH_ALGORITHM:
        raise LedgerIntegrityError(0, f"unsupported hash algorithm {header.get('hash_algorithm')!r}")

    entries: list[LedgerEntry] = []
    prev = GENESIS_HASH
    for i, line in enumerate(lines[1:], start=1):
        rec = decode(i, line)
        try:
            entry = LedgerEntry.from_record(rec)
        except TypeError as exc:
            raise LedgerIntegrityError(i, f"malformed entry ({exc})") from None
        if entry.sequence != i:
            raise LedgerIntegrityError(i, f"sequence {entry.sequence} out of order")
        if entry.prev_hash != prev:
            raise LedgerIntegrityError(i, "prev_hash does not match the preceding entry")
        if entry.entry_hash != digest(entry.body()):
            raise LedgerIntegrityError(i, "entry hash mismatch")
        entries.append(entry)
        prev = entry.entry_hash
    if tail:
        raise LedgerIntegrityError(len(lines), "truncated final entry")
    return header, entries


def read_ledger(path: str | Path) -> tuple[dict[str, Any], list[LedgerEntry]]:
    try:
        return _parse(path)
    except OSError as exc:
        raise LedgerError(f"cannot read ledger {path}: {exc}") from exc


def verify(path: str | Path) -> IntegrityReport:
    """Verify the full hash chain; report the first divergence, or clean."""
    try:
        header, entries = _parse(path)
    except LedgerIntegrityError as exc:
        return IntegrityReport(False, sequence=exc.sequence, reason=exc.reason)
    except OSError as exc:
        return IntegrityReport(False, sequence=0, reason=f"unreadable: {exc}")
    return IntegrityReport(True, entries=len(entries), header=header)


class Ledger:
    """Single-writer append handle. Thread-safe; appends are serialized."""

    def __init__(
        self,
        path: str | Path,
        header: dict[str, Any],
        entries: list[LedgerEntry],
        fsync: bool = True,
        clock: Callable[[], str] = utc_now,
    ) -> None:
        self.path = Path(path)
        self.header = header
        self.entries = entries
        self.fsync = fsync
        self.clock = clock
        self._lock = threading.Lock()
        self._broken = False
        try:
            self._fh = open(self.path, "a", encoding="utf-8", newline="\n")
        except OSError as exc:
            raise LedgerError(f"cannot open ledger {self.path}: {exc}") from exc

    @classmethod
    def create(cls, path: str | Path, header: dict[str, Any], **kw: Any) -> "Ledger":
        p = Path(path)
        try:
            p.parent.mkdir(parents=True, exist_ok=True)
            with open(p, "x", encoding="utf-8", newline="\n") as fh:
                fh.write(canonical_json(header) + "\n")
                fh.flush()
                os.fsync(fh.fileno())
        except OSError as exc:
            raise LedgerError(f"cannot create ledger {p}: {exc}") from exc
        return cls(p, header, [], **kw)

    @classmethod
    def open(cls, path: str | Path, **kw: Any) -> "Ledger":
        header, entries = read_ledger(path)
        return cls(path, header, entries, **kw)

    @property
    def last_hash(self) -> str:
        return self.entries[-1].entry_hash if self.entries else GENESIS_HASH

    def append(
        self,
        kind: str,
        stage: str,
        *,
        logical_key: str = "",
        attempt: int = 0,
        retry: int = 0,
        request_digest: str = "",
        request_text: str = "",
        response_text: str = "",
        finish_reason: str = "",
        data: Mapping[str, Any] | None = None,
    ) -> LedgerEntry:
        """Persist one entry and return it; the entry is on disk before this returns."""
        with self._lock:
            if self._broken:
                raise LedgerError("ledger is unusable after a failed append")
            entry = LedgerEntry(
                sequence=len(self.entries) + 1,
                kind=kind,
                stage=stage,
                logical_key=logical_key,
                attempt=attempt,
                retry=retry,
                request_digest=request_digest,
                request_text=request_text,
                response_text=response_text,
                finish_reason=finish_reason,
                timestamp=self.clock(),
                data=dict(data or {}),
                prev_hash=self.last_hash,
            )
            entry = LedgerEntry(**{**entry.body(), "entry_hash": digest(entry.body())})
            try:
                self._fh.write(canonical_json(entry.record()) + "\n")
                self._fh.flush()
                if self.fsync:
                    os.fsync(self._fh.fileno())
            except (OSError, ValueError) as exc:
                self._broken = True
                raise LedgerError(f"ledger append failed at sequence {entry.sequence}: {exc}") from exc
            self.entries.append(entry)
            return entry

    def decide(self, stage: str, event: str, **data: Any) -> LedgerEntry:
        return self.append("decision", stage, data={"event": event, **data})

    def close(self) -> None:
        self._fh.close()

    def __enter__(self) -> "Ledger":
        return self

    def __exit__(self, *exc: object) -> None:
        self.close()
