"""Streaming-session data model, log parsing, and feature summaries.

A session log is a UTF-8 JSON document with the fields

    initial_buffering_s : number, startup delay in seconds
    mos                 : number, optional subjective score
    chunks              : array of {quality, rebuffer_s, duration_s}
                          plus optional per-chunk ``bitrate_kbps`` and ``qp``

A dataset file wraps an array of session documents together with a
``name`` and the subjective scale ``mos_scale: [low, high]``.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, replace

from .errors import ParseError, ValidationError

# Presentation-quality scores live on a fixed 0..100 perceptual scale.
QUALITY_MAX = 100.0


@dataclass(frozen=True)
class Chunk:
    """One playback chunk: its quality, the stall right before it, its length."""

    presentation_quality: float
    rebuffering_before: float = 0.0
    duration: float = 2.0
    bitrate_kbps: float | None = None
    qp: float | None = None


@dataclass(frozen=True)
class Session:
    """An ordered chunk sequence with startup delay and an optional MOS label."""

    chunks: tuple[Chunk, ...]
    initial_buffering: float = 0.0
    mos: float | None = None

    def __post_init__(self):
        object.__setattr__(self, "chunks", tuple(self.chunks))


@dataclass(frozen=True)
class Dataset:
    name: str
    sessions: tuple[Session, ...]
    mos_scale: tuple[float, float] = (0.0, 100.0)

    def __post_init__(self):
        object.__setattr__(self, "sessions", tuple(self.sessions))
        object.__setattr__(self, "mos_scale", tuple(self.mos_scale))


@dataclass(frozen=True)
class FeatureSummary:
    """Session-level aggregates consumed by the parametric baseline models."""

    mean_quality: float
    total_rebuffer_seconds: float
    rebuffer_count: int
    total_switch_magnitude: float
    session_seconds: float


@dataclass(frozen=True)
class Violation:
    """A single invariant failure: which field, where, and what bound broke."""

    field: str
    chunk_index: int | None
    bound: str

    def __str__(self):
        where = "session" if self.chunk_index is None else f"chunk {self.chunk_index}"
        return f"{where}: {self.field} violates {self.bound}"


def validate_session(s: Session) -> list[Violation]:
    """Return every invariant violation in ``s``; empty list means valid.

    Violations are values rather than exceptions so that invalid sessions
    can be inspected and reported in bulk.
    """
    out: list[Violation] = []
    if len(s.chunks) == 0:
        out.append(Violation("chunks", None, "non-empty"))
    if s.initial_buffering < 0:
        out.append(Violation("initial_buffering", None, ">= 0"))
    for idx, ch in enumerate(s.chunks):
        if not 0.0 <= ch.presentation_quality <= QUALITY_MAX:
            out.append(
                Violation(
                    "presentation_quality", idx, f"within [0,{QUALITY_MAX:g}]"
                )
            )
        if ch.rebuffering_before < 0:
            out.append(Violation("rebuffering_before", idx, ">= 0"))
        if ch.duration <= 0:
            out.append(Violation("duration", idx, "> 0"))
    return out


def session_features(s: Session) -> FeatureSummary:
    """Aggregate per-chunk fields into the summary baselines consume."""
    qualities = [c.presentation_quality for c in s.chunks]
    mean_quality = sum(qualities) / len(qualities)
    switch = sum(
        abs(qualities[t] - qualities[t - 1]) for t in range(1, len(qualities))
    )
    stalls = [c.rebuffering_before for c in s.chunks]
    total_stall = sum(stalls)
    seconds = s.initial_buffering + total_stall + sum(c.duration for c in s.chunks)
    return FeatureSummary(
        mean_quality=mean_quality,
        total_rebuffer_seconds=total_stall,
        rebuffer_count=sum(1 for v in stalls if v > 0),
        total_switch_magnitude=switch,
        session_seconds=seconds,
    )


# ---------------------------------------------------------------------------
# Session-log / dataset documents
# ---------------------------------------------------------------------------


def _number(obj, key, location, default=None, required=True):
    if key not in obj:
        if required:
            raise ParseError(f"missing field '{key}'", location)
        return default
    value = obj[key]
    if isinstance(value, bool) or not isinstance(value, (int, float)):
        raise ParseError(f"field '{key}' must be a number", location)
    return float(value)


def _chunk_from_doc(obj, location) -> Chunk:
    if not isinstance(obj, dict):
        raise ParseError("chunk entry must be an object", location)
    return Chunk(
        presentation_quality=_number(obj, "quality", location),
        rebuffering_before=_number(obj, "rebuffer_s", location, 0.0, required=False),
        duration=_number(obj, "duration_s", location),
        bitrate_kbps=_number(obj, "bitrate_kbps", location, None, required=False),
        qp=_number(obj, "qp", location, None, required=False),
    )


def session_from_doc(doc, location: str = "session") -> Session:
    """Build and validate a Session from a decoded JSON object."""
    if not isinstance(doc, dict):
        raise ParseError("session document must be an object", location)
    chunks_doc = doc.get("chunks")
    if not isinstance(chunks_doc, list):
        raise ParseError("missing or non-array field 'chunks'", location)
    chunks = [
        _chunk_from_doc(c, f"{location}.chunks[{i}]") for i, c in enumerate(chunks_doc)
    ]
    session = Session(
        chunks=tuple(chunks),
        initial_buffering=_number(doc, "initial_buffering_s", location, 0.0, required=False),
        mos=_number(doc, "mos", location, None, required=False),
    )
    violations = validate_session(session)
    if violations:
        raise ValidationError(
            "; ".join(f"{location}: {v}" for v in violations)
        )
    return session


def parse_session_log(text: str) -> Session:
    """Parse one session-log document; raises on malformed or invalid input."""
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ParseError(exc.msg, f"line {exc.lineno}, column {exc.colno}") from exc
    return session_from_doc(doc)


def session_to_doc(s: Session) -> dict:
    chunks = []
    for c in s.chunks:
        entry = {
            "quality": c.presentation_quality,
            "rebuffer_s": c.rebuffering_before,
            "duration_s": c.duration,
        }
        if c.bitrate_kbps is not None:
            entry["bitrate_kbps"] = c.bitrate_kbps
        if c.qp is not None:
            entry["qp"] = c.qp
        chunks.append(entry)
    doc = {"initial_buffering_s": s.initial_buffering, "chunks": chunks}
    if s.mos is not None:
        doc["mos"] = s.mos
    return doc


def serialize_session(s: Session) -> str:
    return json.dumps(session_to_doc(s), sort_keys=True, indent=2)


def parse_dataset(text: str) -> Dataset:
    """Parse a dataset file: named session collection plus its MOS scale."""
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ParseError(exc.msg, f"line {exc.lineno}, column {exc.colno}") from exc
    if not isinstance(doc, dict):
        raise ParseError("dataset document must be an object", "dataset")
    name = doc.get("name")
    if not isinstance(name, str):
        raise ParseError("missing or non-string field 'name'", "dataset")
    scale = doc.get("mos_scale")
    if (
        not isinstance(scale, list)
        or len(scale) != 2
        or any(isinstance(v, bool) or not isinstance(v, (int, float)) for v in scale)
    ):
        raise ParseError("field 'mos_scale' must be [low, high]", "dataset")
    sessions_doc = doc.get("sessions")
    if not isinstance(sessions_doc, list):
        raise ParseError("missing or non-array field 'sessions'", "dataset")
    sessions = [
        session_from_doc(s, f"sessions[{i}]") for i, s in enumerate(sessions_doc)
    ]
    return Dataset(name=name, sessions=tuple(sessions), mos_scale=(float(scale[0]), float(scale[1])))


def serialize_dataset(ds: Dataset) -> str:
    doc = {
        "name": ds.name,
        "mos_scale": list(ds.mos_scale),
        "sessions": [session_to_doc(s) for s in ds.sessions],
    }
    return json.dumps(doc, sort_keys=True, indent=2)


def with_mos(s: Session, mos: float | None) -> Session:
    return replace(s, mos=mos)
