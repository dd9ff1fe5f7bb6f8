"""Model evaluation on sessions: per-chunk QoE and the session score.

Per-chunk QoE decomposes additively into the chunk's presentation quality,
the stall penalty looked up on the rebuffering surface at (previous
quality, stall length), and the switch adjustment looked up on the
adaptation surface at (previous quality, new quality).  The first chunk
has no predecessor; its reference quality is the fixed expectation of 80,
and startup delay enters through the same stall surface discounted by
1/9.  The session score is the running mean of per-chunk QoE.

Training quantizes features to the nearest bin; prediction instead
interpolates the trained surfaces so that off-grid qualities do not
produce staircase artifacts.  The rebuffering surface extends beyond the
stall ceiling by continuing the slope of its last two columns.  The
adaptation surface is interpolated linearly on the two triangles each
index cell splits into along the switch-free diagonal, which keeps
"no switch" mapping to exactly zero between grid nodes.
"""

from __future__ import annotations

import hashlib
import math
from dataclasses import dataclass

from .errors import ValidationError
from .session import Session
from .training import KsqiModel, serialize_model

# Viewer expectation standing in for the missing chunk before playback,
# and the startup-delay discount relative to a mid-stream stall.
EXPECTED_INITIAL_QUALITY = 80.0
INITIAL_BUFFERING_DISCOUNT = 1.0 / 9.0


@dataclass(frozen=True)
class PredictionTrace:
    """Per-chunk QoE, its running mean, and the end-of-session score."""

    per_chunk_q: tuple[float, ...]
    cumulative: tuple[float, ...]
    final_score: float


def _bilinear(values, fi: float, fj: float) -> float:
    """Bilinear lookup at 0-based float grid coordinates."""
    last = values.shape[0] - 2
    i0 = min(int(math.floor(fi)), last)
    j0 = min(int(math.floor(fj)), last)
    u = fi - i0
    v = fj - j0
    return float(
        (1 - u) * (1 - v) * values[i0, j0]
        + u * (1 - v) * values[i0 + 1, j0]
        + (1 - u) * v * values[i0, j0 + 1]
        + u * v * values[i0 + 1, j0 + 1]
    )


def rebuffering_penalty(m: KsqiModel, p: float, tau: float) -> float:
    """Stall penalty at prior quality ``p`` and stall length ``tau``.

    Inside the trained domain this is bilinear interpolation; past the
    stall ceiling the penalty continues linearly along the slope of the
    last two columns at the interpolated quality.
    """
    spec = m.spec
    if not 0.0 <= p <= spec.quality_max:
        raise ValidationError(f"quality {p} outside [0, {spec.quality_max:g}]")
    if tau < 0:
        raise ValidationError(f"stall duration {tau} < 0")
    N = spec.n_steps
    fi = p * N / spec.quality_max
    if tau <= spec.rebuffer_max:
        return _bilinear(m.s_grid.values, fi, tau * N / spec.rebuffer_max)
    v_last = _bilinear(m.s_grid.values, fi, float(N))
    v_prev = _bilinear(m.s_grid.values, fi, float(N - 1))
    d_tau = spec.rebuffer_max / N
    return v_last + (tau - spec.rebuffer_max) * (v_last - v_prev) / d_tau


def adaptation_delta(m: KsqiModel, p_prev: float, p_cur: float) -> float:
    """QoE adjustment for a switch from ``p_prev`` to ``p_cur``.

    Linear interpolation on the triangles of the (prior, destination)
    index square, split along the no-switch diagonal so the diagonal stays
    exactly zero.
    """
    spec = m.spec
    for name, value in (("previous", p_prev), ("current", p_cur)):
        if not 0.0 <= value <= spec.quality_max:
            raise ValidationError(
                f"{name} quality {value} outside [0, {spec.quality_max:g}]"
            )
    N = spec.n_steps
    a = m.a_grid.values
    fi = p_prev * N / spec.quality_max
    fj = p_cur * N / spec.quality_max
    i0 = min(int(math.floor(fi)), N - 1)
    j0 = min(int(math.floor(fj)), N - 1)
    u = fi - i0
    v = fj - j0
    if u >= v:
        return float(
            a[i0, j0]
            + u * (a[i0 + 1, j0] - a[i0, j0])
            + v * (a[i0 + 1, j0 + 1] - a[i0 + 1, j0])
        )
    return float(
        a[i0, j0]
        + v * (a[i0, j0 + 1] - a[i0, j0])
        + u * (a[i0 + 1, j0 + 1] - a[i0, j0 + 1])
    )


def _reference_quality(m: KsqiModel) -> float:
    # The 80-point expectation assumes the standard 0..100 scale; clamp for
    # nonstandard grids rather than query outside the surface.
    return min(EXPECTED_INITIAL_QUALITY, m.spec.quality_max)


def chunk_qoe(
    m: KsqiModel, s: Session, t: int, first_chunk_adaptation: bool = True
) -> float:
    """QoE of the 1-based chunk ``t``: quality plus stall and switch terms.

    ``first_chunk_adaptation`` controls whether the first chunk is charged
    an adaptation term against the fixed 80-point expectation; published
    behaviour is ambiguous on this, so the convention is explicit here and
    recorded in prediction documents.
    """
    if not 1 <= t <= len(s.chunks):
        raise IndexError(f"chunk index {t} outside 1..{len(s.chunks)}")
    chunk = s.chunks[t - 1]
    quality = chunk.presentation_quality
    if t == 1:
        p_prev = _reference_quality(m)
        q = quality + rebuffering_penalty(m, p_prev, chunk.rebuffering_before)
        q += INITIAL_BUFFERING_DISCOUNT * rebuffering_penalty(
            m, p_prev, s.initial_buffering
        )
        if first_chunk_adaptation:
            q += adaptation_delta(m, p_prev, quality)
        return q
    p_prev = s.chunks[t - 2].presentation_quality
    return (
        quality
        + rebuffering_penalty(m, p_prev, chunk.rebuffering_before)
        + adaptation_delta(m, p_prev, quality)
    )


def session_qoe(
    m: KsqiModel, s: Session, first_chunk_adaptation: bool = True
) -> PredictionTrace:
    """Score a whole session; the final score is the mean per-chunk QoE."""
    per_chunk = [
        chunk_qoe(m, s, t, first_chunk_adaptation)
        for t in range(1, len(s.chunks) + 1)
    ]
    cumulative: list[float] = []
    running = 0.0
    for t, q in enumerate(per_chunk, start=1):
        running = ((t - 1) * running + q) / t
        cumulative.append(running)
    return PredictionTrace(
        per_chunk_q=tuple(per_chunk),
        cumulative=tuple(cumulative),
        final_score=cumulative[-1],
    )


def model_digest(m: KsqiModel) -> str:
    """Stable content hash of the serialized model, for provenance fields."""
    return hashlib.sha256(serialize_model(m).encode("utf-8")).hexdigest()


def trace_to_doc(
    trace: PredictionTrace, digest: str, first_chunk_adaptation: bool
) -> dict:
    """Prediction output document: scores plus evaluation conventions."""
    return {
        "per_chunk_q": list(trace.per_chunk_q),
        "cumulative": list(trace.cumulative),
        "final_score": trace.final_score,
        "model_digest": digest,
        "first_chunk_adaptation": first_chunk_adaptation,
    }
