"""Typed payload schemas for every ledger event.

Builders turn domain values into canonical-ready dicts (floats hex-encoded,
digests as hex strings); parsers invert them bit-exactly. These are the only
places that know which payload fields are floats.
"""

from __future__ import annotations

from dataclasses import dataclass

from .errors import DecodeError, StructuralAuditError
from .ledger import decode_float, encode_float
from .policy import DecisionRecord, FeatureSnapshot


# -- HEADER ------------------------------------------------------------------

def header_payload(
    stream_id: str,
    environment_profile: str,
    deployment_seed: int,
    config: dict,
    config_digest: str,
) -> dict:
    return {
        "format_version": 1,
        "stream_id": stream_id,
        "environment_profile": environment_profile,
        "deployment_seed": deployment_seed,
        "config": config,
        "config_digest": config_digest,
    }


@dataclass(frozen=True)
class HeaderInfo:
    format_version: int
    stream_id: str
    environment_profile: str
    deployment_seed: int
    config: dict
    config_digest: str


def parse_header(payload: dict) -> HeaderInfo:
    try:
        return HeaderInfo(
            format_version=int(payload["format_version"]),
            stream_id=payload["stream_id"],
            environment_profile=payload["environment_profile"],
            deployment_seed=int(payload["deployment_seed"]),
            config=payload["config"],
            config_digest=payload["config_digest"],
        )
    except (KeyError, TypeError, ValueError) as exc:
        raise DecodeError(f"malformed HEADER payload: {exc}") from None


# -- DATA_INGESTED -------------------------------------------------------------

def data_ingested_payload(
    participant_id: str,
    feature: str,
    value: float,
    device_ts: int,
    superseded_snapshot_seq: int | None = None,
) -> dict:
    return {
        "participant_id": participant_id,
        "feature": feature,
        "value": encode_float(value),
        "device_ts": device_ts,
        "superseded_snapshot_seq": superseded_snapshot_seq,
    }


@dataclass(frozen=True)
class DatumInfo:
    participant_id: str
    feature: str
    value: float
    device_ts: int
    superseded_snapshot_seq: int | None


def parse_data_ingested(payload: dict) -> DatumInfo:
    try:
        return DatumInfo(
            participant_id=payload["participant_id"],
            feature=payload["feature"],
            value=decode_float(payload["value"]),
            device_ts=int(payload["device_ts"]),
            superseded_snapshot_seq=payload["superseded_snapshot_seq"],
        )
    except (KeyError, TypeError, ValueError) as exc:
        raise DecodeError(f"malformed DATA_INGESTED payload: {exc}") from None


# -- FEATURE_SNAPSHOT ----------------------------------------------------------

def snapshot_payload(participant_id: str, decision_index: int, snapshot: FeatureSnapshot) -> dict:
    return {
        "participant_id": participant_id,
        "decision_index": decision_index,
        "baseline": [encode_float(v) for v in snapshot.baseline],
        "treatment": [encode_float(v) for v in snapshot.treatment],
        "provenance": list(snapshot.provenance),
        "imputation_methods": list(snapshot.imputation_methods),
        "source_device_ts": list(snapshot.source_device_ts),
        "assembled_ts": snapshot.assembled_ts,
    }


def parse_snapshot(payload: dict) -> tuple[str, int, FeatureSnapshot]:
    try:
        snapshot = FeatureSnapshot(
            baseline=tuple(decode_float(v) for v in payload["baseline"]),
            treatment=tuple(decode_float(v) for v in payload["treatment"]),
            provenance=tuple(payload["provenance"]),
            imputation_methods=tuple(payload["imputation_methods"]),
            source_device_ts=tuple(payload["source_device_ts"]),
            assembled_ts=int(payload["assembled_ts"]),
        )
        return payload["participant_id"], int(payload["decision_index"]), snapshot
    except (KeyError, TypeError, ValueError) as exc:
        raise DecodeError(f"malformed FEATURE_SNAPSHOT payload: {exc}") from None


# -- DECISION ------------------------------------------------------------------

def decision_payload(record: DecisionRecord) -> dict:
    return {
        "participant_id": record.participant_id,
        "decision_index": record.decision_index,
        "pi_raw": encode_float(record.pi_raw),
        "pi": encode_float(record.pi),
        "seed": record.seed,
        "action": record.action,
        "fallback": record.fallback,
        "fallback_reason": record.fallback_reason,
        "version_id": record.version_id,
    }


def parse_decision(payload: dict) -> DecisionRecord:
    try:
        return DecisionRecord(
            participant_id=payload["participant_id"],
            decision_index=int(payload["decision_index"]),
            pi_raw=decode_float(payload["pi_raw"]),
            pi=decode_float(payload["pi"]),
            seed=int(payload["seed"]),
            action=int(payload["action"]),
            fallback=bool(payload["fallback"]),
            fallback_reason=payload["fallback_reason"],
            version_id=payload["version_id"],
        )
    except (KeyError, TypeError, ValueError) as exc:
        raise DecodeError(f"malformed DECISION payload: {exc}") from None


# -- OUTCOME_OBSERVED ----------------------------------------------------------

def outcome_payload(participant_id: str, decision_index: int, reward: float, device_ts: int) -> dict:
    return {
        "participant_id": participant_id,
        "decision_index": decision_index,
        "reward": encode_float(reward),
        "device_ts": device_ts,
    }


@dataclass(frozen=True)
class OutcomeInfo:
    participant_id: str
    decision_index: int
    reward: float
    device_ts: int


def parse_outcome(payload: dict) -> OutcomeInfo:
    try:
        return OutcomeInfo(
            participant_id=payload["participant_id"],
            decision_index=int(payload["decision_index"]),
            reward=decode_float(payload["reward"]),
            device_ts=int(payload["device_ts"]),
        )
    except (KeyError, TypeError, ValueError) as exc:
        raise DecodeError(f"malformed OUTCOME_OBSERVED payload: {exc}") from None


# -- MODEL_UPDATE --------------------------------------------------------------

def update_payload(
    participant_id: str,
    batch_seqs: list[int],
    pre_state_hash: bytes,
    post_state_hash: bytes,
    post_state: bytes,
) -> dict:
    if any(a >= b for a, b in zip(batch_seqs, batch_seqs[1:])):
        raise StructuralAuditError("batch_seqs must be strictly increasing")
    return {
        "participant_id": participant_id,
        "batch_seqs": list(batch_seqs),
        "pre_state_hash": pre_state_hash.hex(),
        "post_state_hash": post_state_hash.hex(),
        "post_state": post_state.hex(),
    }


@dataclass(frozen=True)
class UpdateInfo:
    participant_id: str
    batch_seqs: tuple[int, ...]
    pre_state_hash: bytes
    post_state_hash: bytes
    post_state: bytes


def parse_update(payload: dict) -> UpdateInfo:
    try:
        return UpdateInfo(
            participant_id=payload["participant_id"],
            batch_seqs=tuple(int(s) for s in payload["batch_seqs"]),
            pre_state_hash=bytes.fromhex(payload["pre_state_hash"]),
            post_state_hash=bytes.fromhex(payload["post_state_hash"]),
            post_state=bytes.fromhex(payload["post_state"]),
        )
    except (KeyError, TypeError, ValueError) as exc:
        raise DecodeError(f"malformed MODEL_UPDATE payload: {exc}") from None


# -- VERSION_CHANGE --------------------------------------------------------------

def version_change_payload(
    version_id: str, fingerprint: str, previous_version_id: str | None
) -> dict:
    return {
        "version_id": version_id,
        "fingerprint": fingerprint,
        "previous_version_id": previous_version_id,
    }


# -- ERROR / ALERT ---------------------------------------------------------------

def error_payload(
    kind: str,
    message: str,
    participant_id: str | None = None,
    decision_index: int | None = None,
) -> dict:
    return {
        "kind": kind,
        "message": message,
        "participant_id": participant_id,
        "decision_index": decision_index,
    }


def alert_payload(
    metric: str,
    comparator: str,
    threshold: float,
    value: float,
    window: str,
    day: int | None,
    severity: str,
) -> dict:
    return {
        "metric": metric,
        "comparator": comparator,
        "threshold": encode_float(threshold),
        "value": encode_float(value),
        "window": window,
        "day": day,
        "severity": severity,
    }
