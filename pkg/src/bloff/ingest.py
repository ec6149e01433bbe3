"""Log ingestion: read records, canonicalize, hash and submit anchors.

The anchored bytes are the producer's bytes. Canonicalization strips exactly
one trailing line terminator (LF or CRLF) and nothing else, so a log handed
over later with or without its final newline still verifies. Raw record
bytes never leave this layer: only their 32-byte digests travel onward.
"""

from __future__ import annotations

import os
import sys
import time
from dataclasses import dataclass, field
from typing import Iterator, Protocol

from .crypto import Digest, KeyPair, sha256_digest
from .ledger import AnchorTransaction, Transaction, build_anchor_tx, tx_id

MAX_RECORD_BYTES = 65_536


class RecordError(ValueError):
    """A line that cannot become a record; ``reason`` is a stable tag."""

    def __init__(self, reason: str):
        super().__init__(reason)
        self.reason = reason


class SourceError(Exception):
    """A log source that cannot be read, carrying the offending path."""


class SubmitError(Exception):
    def __init__(self, reason: str):
        super().__init__(reason)
        self.reason = reason


class SubmitTarget(Protocol):
    """Anything that can accept a signed transaction for inclusion."""

    def submit_tx(self, tx: Transaction) -> tuple[bool, str | None]:
        ...


def canonicalize_record(raw: bytes) -> bytes:
    """Strip one trailing LF or CRLF; perform no other normalization."""
    if raw.endswith(b"\r\n"):
        raw = raw[:-2]
    elif raw.endswith(b"\n"):
        raw = raw[:-1]
    if not raw:
        raise RecordError("empty-record")
    if len(raw) > MAX_RECORD_BYTES:
        raise RecordError("oversize")
    return raw


@dataclass(frozen=True)
class LogRecord:
    """One canonicalized log entry with its provenance stamp."""

    raw: bytes
    source_id: str
    capture_timestamp: int

    def __post_init__(self) -> None:
        if not self.raw or len(self.raw) > MAX_RECORD_BYTES:
            raise ValueError("record must be 1..65536 bytes")

    @property
    def log_hash(self) -> Digest:
        return sha256_digest(self.raw)


@dataclass(frozen=True)
class LogSource:
    kind: str  # "file" | "directory-watch" | "standard-input"
    source_id: str
    location: str | None = None


def _records_from_lines(lines, source_id: str, clock) -> Iterator[LogRecord]:
    for line in lines:
        if line in (b"", b"\n", b"\r\n"):
            # Blank lines carry no evidence; skip rather than abort the run.
            continue
        raw = canonicalize_record(line)
        yield LogRecord(raw=raw, source_id=source_id, capture_timestamp=int(clock()))


def ingest(source: LogSource, clock=time.time) -> Iterator[LogRecord]:
    """Yield records from a source in order, stamped with wall-clock time.

    File content is read as raw bytes; invalid UTF-8 passes through intact.
    A final line without a terminator still yields a record. Oversize lines
    raise; blank lines are skipped.
    """
    if source.kind == "file":
        if source.location is None or not os.path.exists(source.location):
            raise SourceError(f"unreadable log source: {source.location}")
        with open(source.location, "rb") as fh:
            yield from _records_from_lines(fh, source.source_id, clock)
    elif source.kind == "standard-input":
        yield from _records_from_lines(sys.stdin.buffer, source.source_id, clock)
    elif source.kind == "directory-watch":
        if source.location is None or not os.path.isdir(source.location):
            raise SourceError(f"unreadable log source: {source.location}")
        watcher = DirectoryWatcher(source.location, source.source_id, clock=clock)
        while True:
            for record in watcher.poll():
                yield record
            time.sleep(0.2)
    else:
        raise SourceError(f"unknown source kind: {source.kind}")


@dataclass
class DirectoryWatcher:
    """Tail every file in a directory, yielding newly appended lines.

    ``poll()`` performs one non-blocking scan in sorted file order, buffering
    incomplete trailing lines until their terminator arrives.
    """

    directory: str
    source_id: str
    clock: object = time.time
    _offsets: dict[str, int] = field(default_factory=dict)
    _partial: dict[str, bytes] = field(default_factory=dict)

    def poll(self) -> list[LogRecord]:
        records: list[LogRecord] = []
        for name in sorted(os.listdir(self.directory)):
            path = os.path.join(self.directory, name)
            if not os.path.isfile(path):
                continue
            offset = self._offsets.get(path, 0)
            size = os.path.getsize(path)
            if size <= offset:
                continue
            with open(path, "rb") as fh:
                fh.seek(offset)
                data = self._partial.pop(path, b"") + fh.read()
            self._offsets[path] = size
            lines = data.split(b"\n")
            self._partial[path] = lines.pop()  # bytes after the last terminator
            for line in lines:
                if line in (b"", b"\r"):
                    continue
                raw = canonicalize_record(line + b"\n")
                records.append(
                    LogRecord(raw=raw, source_id=self.source_id, capture_timestamp=int(self.clock()))
                )
        return records

    def flush_tails(self) -> list[LogRecord]:
        """Treat buffered unterminated tails as final lines (end of watch)."""
        records = []
        for path, tail in sorted(self._partial.items()):
            if tail:
                raw = canonicalize_record(tail)
                records.append(
                    LogRecord(raw=raw, source_id=self.source_id, capture_timestamp=int(self.clock()))
                )
                self._partial[path] = b""
        return records


def build_anchor_for_record(record: LogRecord, keypair: KeyPair) -> AnchorTransaction:
    return build_anchor_tx(
        log_hash=record.log_hash,
        source_id=record.source_id,
        capture_timestamp=record.capture_timestamp,
        keypair=keypair,
    )


def anchor_record(record: LogRecord, keypair: KeyPair, target: SubmitTarget) -> Digest:
    """Hash, sign and submit one record; returns the transaction id."""
    tx = build_anchor_for_record(record, keypair)
    accepted, reason = target.submit_tx(tx)
    if not accepted:
        raise SubmitError(reason or "rejected")
    return tx_id(tx)
