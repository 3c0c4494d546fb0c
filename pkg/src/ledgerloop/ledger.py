"""Append-only, hash-chained event ledger: the system's source of truth.

Wire format: one record per line, each a canonical JSON object with
lexicographically sorted keys, no insignificant whitespace, integers in base
10, and every float carried as a 16-hex-digit big-endian IEEE-754 string (see
:func:`encode_float`). Record ``n`` has ``seq == n``; its ``hash`` is the
SHA-256 of ``prev_hash`` concatenated with the canonical bytes of the record
body (everything except the ``hash`` field itself), and record 0 chains from
32 zero bytes. Any single corrupted byte therefore breaks either a hash
recomputation or the chain linkage.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
import os
import struct
import threading
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Iterator

from .errors import ConfigurationError, DecodeError, IsolationError, StorageError

GENESIS_HASH = b"\x00" * 32

ENVIRONMENT_PROFILES = ("dev", "test", "prod-sim")

EVENT_TYPES = (
    "HEADER",
    "DATA_INGESTED",
    "FEATURE_SNAPSHOT",
    "DECISION",
    "OUTCOME_OBSERVED",
    "MODEL_UPDATE",
    "VERSION_CHANGE",
    "ERROR",
    "ALERT",
)

FORMAT_VERSION = 1


def encode_float(x: float) -> str:
    """Big-endian IEEE-754 bit pattern of a float64 as 16 lowercase hex chars.

    Total on the bit level: negative zero and NaN payloads survive intact.
    """
    return struct.pack(">d", x).hex()


def decode_float(hex_str: str) -> float:
    """Inverse of :func:`encode_float`; rejects anything but 16 hex chars."""
    if not isinstance(hex_str, str) or len(hex_str) != 16:
        raise DecodeError(f"float encoding must be 16 hex chars, got {hex_str!r}")
    try:
        raw = bytes.fromhex(hex_str)
    except ValueError:
        raise DecodeError(f"malformed float encoding {hex_str!r}") from None
    return struct.unpack(">d", raw)[0]


def _reject_floats(obj, path="$"):
    if isinstance(obj, float):
        raise ConfigurationError(
            f"raw float at {path}; canonical payloads must hex-encode floats"
        )
    if isinstance(obj, dict):
        for k, v in obj.items():
            if not isinstance(k, str):
                raise ConfigurationError(f"non-string key at {path}: {k!r}")
            _reject_floats(v, f"{path}.{k}")
    elif isinstance(obj, (list, tuple)):
        for i, v in enumerate(obj):
            _reject_floats(v, f"{path}[{i}]")


def canonical_json_bytes(obj) -> bytes:
    """Serialize to canonical JSON: sorted keys, compact separators, ASCII.

    Raw floats are refused outright so a non-canonical number can never leak
    into hashed bytes; callers encode floats with :func:`encode_float` first.
    """
    _reject_floats(obj)
    return json.dumps(obj, sort_keys=True, separators=(",", ":"), ensure_ascii=True).encode("ascii")


@dataclass(frozen=True)
class EventEnvelope:
    """One ledger record. ``payload`` is a canonical-ready dict (no raw
    floats); ``prev_hash``/``hash`` are 32-byte digests."""

    seq: int
    stream_id: str
    environment_profile: str
    device_ts: int | None
    backend_ts: int
    version_id: str
    event_type: str
    payload: dict
    prev_hash: bytes
    hash: bytes

    def body_dict(self) -> dict:
        """Record body as written to disk, minus the hash field."""
        return {
            "seq": self.seq,
            "stream_id": self.stream_id,
            "environment_profile": self.environment_profile,
            "device_ts": self.device_ts,
            "backend_ts": self.backend_ts,
            "version_id": self.version_id,
            "event_type": self.event_type,
            "payload": self.payload,
            "prev_hash": self.prev_hash.hex(),
        }

    def to_line(self) -> bytes:
        body = self.body_dict()
        body["hash"] = self.hash.hex()
        return canonical_json_bytes(body)


def compute_record_hash(prev_hash: bytes, body_bytes: bytes) -> bytes:
    return hashlib.sha256(prev_hash + body_bytes).digest()


def _envelope_from_dict(obj: dict, seq_hint: int) -> EventEnvelope:
    try:
        prev_hash = bytes.fromhex(obj["prev_hash"])
        rec_hash = bytes.fromhex(obj["hash"])
        if len(prev_hash) != 32 or len(rec_hash) != 32:
            raise ValueError("hashes must be 32 bytes")
        return EventEnvelope(
            seq=int(obj["seq"]),
            stream_id=obj["stream_id"],
            environment_profile=obj["environment_profile"],
            device_ts=obj["device_ts"],
            backend_ts=int(obj["backend_ts"]),
            version_id=obj["version_id"],
            event_type=obj["event_type"],
            payload=obj["payload"],
            prev_hash=prev_hash,
            hash=rec_hash,
        )
    except (KeyError, ValueError, TypeError) as exc:
        raise DecodeError(f"malformed record at seq {seq_hint}: {exc}", seq=seq_hint) from None


def _parse_line(line: bytes, seq_hint: int) -> EventEnvelope:
    try:
        obj = json.loads(line)
    except ValueError as exc:  # JSONDecodeError and UnicodeDecodeError
        raise DecodeError(f"record {seq_hint} is not valid JSON: {exc}", seq=seq_hint) from None
    if not isinstance(obj, dict):
        raise DecodeError(f"record {seq_hint} is not an object", seq=seq_hint)
    return _envelope_from_dict(obj, seq_hint)


class Ledger:
    """Append-only event log for exactly one stream and environment profile.

    File-backed when ``path`` is given (each append is flushed, and fsynced
    by default, before returning) or purely in-memory when ``path`` is None,
    which the digital twin uses for throwaway evaluation runs. The record
    bytes are identical either way.

    Appends are serialized by an internal lock; readers always observe a
    prefix of the final record sequence.
    """

    def __init__(
        self,
        stream_id: str,
        environment_profile: str,
        path: str | Path | None = None,
        fsync: bool = True,
        _records: list[EventEnvelope] | None = None,
        _create: bool = True,
    ):
        if environment_profile not in ENVIRONMENT_PROFILES:
            raise ConfigurationError(
                f"unknown environment_profile {environment_profile!r}; "
                f"expected one of {ENVIRONMENT_PROFILES}"
            )
        self.stream_id = stream_id
        self.environment_profile = environment_profile
        self.path = Path(path) if path is not None else None
        self.fsync = fsync
        self._lock = threading.Lock()
        self._records: list[EventEnvelope] = _records or []
        self._last_hash = self._records[-1].hash if self._records else GENESIS_HASH
        self._fh = None
        if self.path is not None:
            if _create:
                if self.path.exists():
                    raise StorageError(f"refusing to overwrite existing ledger {self.path}")
                try:
                    self._fh = open(self.path, "ab")
                except OSError as exc:
                    raise StorageError(f"cannot create ledger file: {exc}") from None
            else:
                try:
                    self._fh = open(self.path, "ab")
                except OSError as exc:
                    raise StorageError(f"cannot open ledger file: {exc}") from None

    # -- construction ------------------------------------------------------

    @classmethod
    def open(cls, path: str | Path) -> "Ledger":
        """Load an existing ledger file, decoding every record eagerly.

        Raises DecodeError (carrying the failing seq) on a corrupt record.
        """
        records = list(read_records(path))
        if not records:
            raise DecodeError("ledger file is empty", seq=0)
        first = records[0]
        ledger = cls(
            stream_id=first.stream_id,
            environment_profile=first.environment_profile,
            path=path,
            _records=records,
            _create=False,
        )
        return ledger

    # -- core operations ---------------------------------------------------

    def append(
        self,
        event_type: str,
        payload: dict,
        backend_ts: int,
        version_id: str,
        device_ts: int | None = None,
        stream_id: str | None = None,
        environment_profile: str | None = None,
    ) -> EventEnvelope:
        """Append one record: assigns seq, chains hashes, writes durably.

        ``stream_id``/``environment_profile`` default to the ledger's own;
        passing a mismatching value is an isolation error, which is how
        mixed-profile ledgers are made unrepresentable.
        """
        if event_type not in EVENT_TYPES:
            raise ConfigurationError(f"unknown event_type {event_type!r}")
        if stream_id is not None and stream_id != self.stream_id:
            raise IsolationError(
                f"stream {stream_id!r} does not match ledger stream {self.stream_id!r}"
            )
        if environment_profile is not None and environment_profile != self.environment_profile:
            raise IsolationError(
                f"profile {environment_profile!r} does not match ledger "
                f"profile {self.environment_profile!r}"
            )
        with self._lock:
            seq = len(self._records)
            if event_type == "HEADER" and seq != 0:
                raise ConfigurationError("HEADER is only valid at seq 0")
            envelope = EventEnvelope(
                seq=seq,
                stream_id=self.stream_id,
                environment_profile=self.environment_profile,
                device_ts=device_ts,
                backend_ts=backend_ts,
                version_id=version_id,
                event_type=event_type,
                payload=payload,
                prev_hash=self._last_hash,
                hash=b"",
            )
            body = canonical_json_bytes(envelope.body_dict())
            rec_hash = compute_record_hash(self._last_hash, body)
            envelope = dataclasses.replace(envelope, hash=rec_hash)
            if self._fh is not None:
                try:
                    self._fh.write(envelope.to_line() + b"\n")
                    self._fh.flush()
                    if self.fsync:
                        os.fsync(self._fh.fileno())
                except OSError as exc:
                    raise StorageError(f"append to {self.path} failed: {exc}") from None
            self._records.append(envelope)
            self._last_hash = rec_hash
            return envelope

    def iterate(
        self, from_seq: int = 0, event_types: Iterable[str] | None = None
    ) -> Iterator[EventEnvelope]:
        """Yield records in seq order, optionally filtered by event type."""
        if from_seq < 0:
            raise ConfigurationError("from_seq must be >= 0")
        wanted = None if event_types is None else frozenset(event_types)
        with self._lock:
            snapshot = self._records[from_seq:]
        for record in snapshot:
            if wanted is None or record.event_type in wanted:
                yield record

    def records(self) -> list[EventEnvelope]:
        with self._lock:
            return list(self._records)

    def __len__(self) -> int:
        with self._lock:
            return len(self._records)

    def next_seq(self) -> int:
        return len(self)

    def close(self) -> None:
        if self._fh is not None:
            self._fh.close()
            self._fh = None

    def __enter__(self) -> "Ledger":
        return self

    def __exit__(self, *exc) -> None:
        self.close()


def read_records(path: str | Path) -> Iterator[EventEnvelope]:
    """Stream records from a ledger file; DecodeError carries the bad seq."""
    try:
        with open(path, "rb") as fh:
            raw = fh.read()
    except OSError as exc:
        raise StorageError(f"cannot read ledger file {path}: {exc}") from None
    for i, line in enumerate(raw.splitlines()):
        yield _parse_line(line, i)


def verify_chain(source: "Ledger | str | Path") -> int | None:
    """Recompute every hash and check seq gaplessness and chain linkage.

    Returns None when the whole ledger verifies, otherwise the smallest
    offending seq. Works on a file path or a Ledger (file-backed ledgers are
    re-read from disk so on-disk corruption is what gets checked).
    """
    if isinstance(source, Ledger) and source.path is None:
        lines = [record.to_line() for record in source.records()]
    else:
        path = source.path if isinstance(source, Ledger) else Path(source)
        try:
            with open(path, "rb") as fh:
                data = fh.read()
        except OSError as exc:
            raise StorageError(f"cannot read ledger file {path}: {exc}") from None
        lines = data.splitlines()

    prev_hash = GENESIS_HASH
    for i, line in enumerate(lines):
        try:
            record = _parse_line(line, i)
        except DecodeError:
            return i
        if record.seq != i:
            return i
        if record.prev_hash != prev_hash:
            return i
        body = canonical_json_bytes(record.body_dict())
        if compute_record_hash(prev_hash, body) != record.hash:
            return i
        # The canonical re-encoding must reproduce the stored line exactly;
        # anything else means the on-disk bytes are not canonical.
        if record.to_line() != bytes(line):
            return i
        prev_hash = record.hash
    return None
