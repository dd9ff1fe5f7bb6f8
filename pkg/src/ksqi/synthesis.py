"""Offline-optimal streaming session synthesis over throughput traces.

A fluid player model replays a per-segment representation choice sequence
against a throughput trace: downloads are sequential, the buffer fills by
one segment per completed download and drains in real time once playback
has started, and playback starts when the buffer first reaches the
startup threshold (or the buffer cap forces it).  Stall time accrues to
the chunk whose arrival ends the stall.

On top of the replay, ``dp_optimal_session`` searches the b^d choice
sequences for the one maximizing a per-chunk-additive QoE evaluator,
using full future knowledge of the trace.  Forward states collapse onto
(previous representation, buffer level rounded to a quantum) once
playback has begun, which keeps the search polynomial; before playback
begins states stay exact, because the first chunk cannot be scored until
the startup delay is known.  ``brute_force_optimal`` enumerates every
sequence on small instances and is the correctness oracle for the DP.
"""

from __future__ import annotations

import itertools
import json
import math
from dataclasses import dataclass

import numpy as np

from .errors import ParseError, TraceExhaustedError, ValidationError
from .prediction import (
    INITIAL_BUFFERING_DISCOUNT,
    _reference_quality,
    adaptation_delta,
    rebuffering_penalty,
)
from .session import QUALITY_MAX, Chunk, Session
from .training import KsqiModel


@dataclass(frozen=True)
class NetworkTrace:
    """Piecewise-constant throughput: sample k covers the interval ending
    at times[k] (the first interval starts at time zero).  The trace is
    exhausted past its final timestamp."""

    times: np.ndarray
    rates_bps: np.ndarray

    def __post_init__(self):
        times = np.asarray(self.times, dtype=float)
        rates = np.asarray(self.rates_bps, dtype=float)
        if times.ndim != 1 or times.shape != rates.shape or len(times) == 0:
            raise ValidationError("trace needs matching 1-D timestamp/rate arrays")
        if np.any(np.diff(times) <= 0) or times[0] < 0:
            raise ValidationError("trace timestamps must be strictly increasing")
        if np.any(rates <= 0):
            raise ValidationError("trace throughput must be positive")
        object.__setattr__(self, "times", times)
        object.__setattr__(self, "rates_bps", rates)

    @property
    def end_time(self) -> float:
        return float(self.times[-1])


def parse_trace(text: str) -> NetworkTrace:
    """Two-column text: ``timestamp_s throughput_bps`` per line."""
    times, rates = [], []
    for lineno, line in enumerate(text.splitlines(), start=1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        parts = line.replace(",", " ").split()
        if len(parts) != 2:
            raise ParseError("expected two columns", f"line {lineno}")
        try:
            times.append(float(parts[0]))
            rates.append(float(parts[1]))
        except ValueError as exc:
            raise ParseError(str(exc), f"line {lineno}") from exc
    if not times:
        raise ParseError("trace file contains no samples")
    return NetworkTrace(np.asarray(times), np.asarray(rates))


def trace_to_text(trace: NetworkTrace) -> str:
    return "".join(
        f"{t:.6f} {r:.6f}\n" for t, r in zip(trace.times, trace.rates_bps)
    )


@dataclass(frozen=True)
class Representation:
    segment_bytes: tuple[float, ...]
    qualities: tuple[float, ...]

    def __post_init__(self):
        object.__setattr__(self, "segment_bytes", tuple(float(v) for v in self.segment_bytes))
        object.__setattr__(self, "qualities", tuple(float(v) for v in self.qualities))
        if len(self.segment_bytes) != len(self.qualities):
            raise ValidationError("segment_bytes and qualities must align")
        if any(v <= 0 for v in self.segment_bytes):
            raise ValidationError("segment sizes must be positive")
        if any(not 0.0 <= q <= QUALITY_MAX for q in self.qualities):
            raise ValidationError(f"quality scores must lie in [0, {QUALITY_MAX:g}]")


@dataclass(frozen=True)
class BitrateLadder:
    representations: tuple[Representation, ...]
    segment_duration: float

    def __post_init__(self):
        object.__setattr__(self, "representations", tuple(self.representations))
        if not self.representations:
            raise ValidationError("ladder needs at least one representation")
        counts = {len(r.segment_bytes) for r in self.representations}
        if len(counts) != 1:
            raise ValidationError("all representations must have equal segment counts")
        if self.segment_duration <= 0:
            raise ValidationError("segment_duration must be positive")

    @property
    def segment_count(self) -> int:
        return len(self.representations[0].segment_bytes)

    def bitrate_kbps(self, rep: int, seg: int) -> float:
        return self.representations[rep].segment_bytes[seg] * 8.0 / self.segment_duration / 1000.0


def parse_ladder(text: str) -> BitrateLadder:
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ParseError(exc.msg, f"line {exc.lineno}") from exc
    if not isinstance(doc, dict):
        raise ParseError("ladder document must be an object")
    reps = [
        Representation(entry["segment_bytes"], entry["qualities"])
        for entry in doc.get("representations", [])
    ]
    return BitrateLadder(tuple(reps), float(doc.get("segment_duration_s", 0.0)))


def ladder_to_doc(ladder: BitrateLadder) -> dict:
    return {
        "segment_duration_s": ladder.segment_duration,
        "representations": [
            {"segment_bytes": list(r.segment_bytes), "qualities": list(r.qualities)}
            for r in ladder.representations
        ],
    }


@dataclass(frozen=True)
class PlayerConfig:
    """Player constants.  ``startup_threshold`` of None means one segment."""

    buffer_capacity: float = 60.0
    startup_threshold: float | None = None
    buffer_quantum: float = 0.1

    def __post_init__(self):
        if self.buffer_capacity <= 0:
            raise ValidationError("buffer_capacity must be positive")
        if self.startup_threshold is not None:
            if not 0 < self.startup_threshold <= self.buffer_capacity:
                raise ValidationError(
                    "startup_threshold must lie in (0, buffer_capacity]"
                )
        if self.buffer_quantum <= 0:
            raise ValidationError("buffer_quantum must be positive")

    def resolved_startup(self, segment_duration: float) -> float:
        startup = self.startup_threshold if self.startup_threshold is not None else segment_duration
        if startup > self.buffer_capacity:
            raise ValidationError("startup threshold exceeds buffer capacity")
        return startup


class _Downloader:
    """Closed-form byte integration over the piecewise-constant trace."""

    def __init__(self, trace: NetworkTrace):
        self.bounds = np.concatenate([[0.0], trace.times])
        rate_bytes = trace.rates_bps / 8.0
        self.rate_bytes = rate_bytes
        self.cum = np.concatenate([[0.0], np.cumsum(rate_bytes * np.diff(self.bounds))])

    def bytes_at(self, t: float) -> float:
        k = int(np.searchsorted(self.bounds, t, side="right")) - 1
        k = min(max(k, 0), len(self.rate_bytes) - 1)
        return float(self.cum[k] + self.rate_bytes[k] * (t - self.bounds[k]))

    def completion(self, start: float, size_bytes: float) -> float:
        """Wall-clock time at which a download of ``size_bytes`` finishes."""
        end_time = self.bounds[-1]
        if start > end_time + 1e-9:
            raise TraceExhaustedError(
                f"download starts at {start:.3f}s but the trace ends at {end_time:.3f}s"
            )
        target = self.bytes_at(start) + size_bytes
        if target > self.cum[-1] + 1e-9:
            raise TraceExhaustedError(
                f"trace ends at {end_time:.3f}s before {size_bytes:.0f} bytes "
                f"starting at {start:.3f}s finish downloading"
            )
        k = int(np.searchsorted(self.cum, target, side="right")) - 1
        k = min(max(k, 0), len(self.rate_bytes) - 1)
        return float(self.bounds[k] + (target - self.cum[k]) / self.rate_bytes[k])


@dataclass(frozen=True)
class _PlayerState:
    wall: float = 0.0
    buffer: float = 0.0
    playing: bool = False
    initial_buffering: float | None = None


def _advance(
    state: _PlayerState,
    size_bytes: float,
    seg: float,
    startup: float,
    capacity: float,
    downloader: _Downloader,
) -> tuple[_PlayerState, float, float, float]:
    """Download one segment; returns (state, stall, download_time, idle_time)."""
    wall, buf, playing, ib = state.wall, state.buffer, state.playing, state.initial_buffering
    idle = 0.0
    if buf + seg > capacity:
        if not playing:
            # Threshold above cap-room: start playing rather than deadlock.
            playing = True
            ib = wall
        idle = buf + seg - capacity
        wall += idle
        buf -= idle
    end = downloader.completion(wall, size_bytes)
    download = end - wall
    stall = 0.0
    if playing:
        if download > buf:
            stall = download - buf
            buf = 0.0
        else:
            buf -= download
        buf += seg
    else:
        buf += seg
        if buf >= startup - 1e-12:
            playing = True
            ib = end
    return _PlayerState(end, buf, playing, ib), stall, download, idle


@dataclass(frozen=True)
class SimulationTiming:
    download_seconds: tuple[float, ...]
    idle_seconds: tuple[float, ...]
    playback_start: float
    playback_end: float
    wall_end: float


def simulate_download_timed(
    choices, ladder: BitrateLadder, trace: NetworkTrace, cfg: PlayerConfig
) -> tuple[Session, SimulationTiming]:
    choices = list(choices)
    seg = ladder.segment_duration
    if len(choices) != ladder.segment_count:
        raise ValidationError(
            f"expected {ladder.segment_count} choices, got {len(choices)}"
        )
    n_reps = len(ladder.representations)
    for k, r in enumerate(choices):
        if not 0 <= r < n_reps:
            raise ValidationError(f"choice {r} at segment {k} outside 0..{n_reps - 1}")
    if seg > cfg.buffer_capacity:
        raise ValidationError("buffer capacity below one segment duration")
    startup = cfg.resolved_startup(seg)
    downloader = _Downloader(trace)

    state = _PlayerState()
    stalls, downloads, idles = [], [], []
    for k, r in enumerate(choices):
        state, stall, download, idle = _advance(
            state, ladder.representations[r].segment_bytes[k], seg, startup, cfg.buffer_capacity, downloader
        )
        stalls.append(stall)
        downloads.append(download)
        idles.append(idle)
    if not state.playing:
        state = _PlayerState(state.wall, state.buffer, True, state.wall)

    chunks = tuple(
        Chunk(
            presentation_quality=ladder.representations[r].qualities[k],
            rebuffering_before=stalls[k],
            duration=seg,
            bitrate_kbps=ladder.bitrate_kbps(r, k),
        )
        for k, r in enumerate(choices)
    )
    session = Session(chunks=chunks, initial_buffering=state.initial_buffering)
    timing = SimulationTiming(
        download_seconds=tuple(downloads),
        idle_seconds=tuple(idles),
        playback_start=state.initial_buffering,
        playback_end=state.initial_buffering + sum(stalls) + seg * len(choices),
        wall_end=state.wall,
    )
    return session, timing


def simulate_download(choices, ladder, trace, cfg: PlayerConfig = PlayerConfig()) -> Session:
    """Replay a choice sequence through the player model."""
    session, _ = simulate_download_timed(choices, ladder, trace, cfg)
    return session


# ---------------------------------------------------------------------------
# QoE evaluators over chunks
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class ChunkContext:
    """Everything a per-chunk-additive evaluator may look at."""

    index: int
    quality: float
    prev_quality: float | None
    rebuffer_before: float
    initial_buffering: float
    bitrate_kbps: float | None = None
    prev_bitrate_kbps: float | None = None


class KsqiScorer:
    """Adapter exposing a trained model as a per-chunk evaluator."""

    def __init__(self, model: KsqiModel, first_chunk_adaptation: bool = True):
        self.model = model
        self.first_chunk_adaptation = first_chunk_adaptation

    def score_chunk(self, ctx: ChunkContext) -> float:
        if ctx.index == 0:
            p_prev = _reference_quality(self.model)
            q = ctx.quality + rebuffering_penalty(self.model, p_prev, ctx.rebuffer_before)
            q += INITIAL_BUFFERING_DISCOUNT * rebuffering_penalty(
                self.model, p_prev, ctx.initial_buffering
            )
            if self.first_chunk_adaptation:
                q += adaptation_delta(self.model, p_prev, ctx.quality)
            return q
        return (
            ctx.quality
            + rebuffering_penalty(self.model, ctx.prev_quality, ctx.rebuffer_before)
            + adaptation_delta(self.model, ctx.prev_quality, ctx.quality)
        )


class LinearScorer:
    """Classic linear QoE objective over quality or bitrate."""

    def __init__(
        self,
        signal: str = "quality",
        signal_weight: float = 1.0,
        stall_weight: float = 1.0,
        switch_weight: float = 1.0,
    ):
        if signal not in ("quality", "bitrate"):
            raise ValidationError("signal must be 'quality' or 'bitrate'")
        self.signal = signal
        self.signal_weight = signal_weight
        self.stall_weight = stall_weight
        self.switch_weight = switch_weight

    def _value(self, quality, bitrate):
        if self.signal == "quality":
            return quality
        if bitrate is None:
            raise ValidationError("bitrate scorer needs per-chunk bitrate")
        return bitrate

    def score_chunk(self, ctx: ChunkContext) -> float:
        value = self._value(ctx.quality, ctx.bitrate_kbps)
        score = self.signal_weight * value - self.stall_weight * ctx.rebuffer_before
        if ctx.index == 0:
            score -= self.stall_weight * ctx.initial_buffering
        else:
            prev = self._value(ctx.prev_quality, ctx.prev_bitrate_kbps)
            score -= self.switch_weight * abs(value - prev)
        return score


def session_contexts(s: Session) -> list[ChunkContext]:
    out = []
    for k, chunk in enumerate(s.chunks):
        prev = s.chunks[k - 1] if k else None
        out.append(
            ChunkContext(
                index=k,
                quality=chunk.presentation_quality,
                prev_quality=prev.presentation_quality if prev else None,
                rebuffer_before=chunk.rebuffering_before,
                initial_buffering=s.initial_buffering if k == 0 else 0.0,
                bitrate_kbps=chunk.bitrate_kbps,
                prev_bitrate_kbps=prev.bitrate_kbps if prev else None,
            )
        )
    return out


def score_session(scorer, s: Session) -> float:
    """Session score: running mean of per-chunk scores (moving-average form)."""
    running = 0.0
    for t, ctx in enumerate(session_contexts(s)):
        running = (t * running + scorer.score_chunk(ctx)) / (t + 1)
    return running


# ---------------------------------------------------------------------------
# Optimal sequence search
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class _DpEntry:
    score: float
    state: _PlayerState
    path: tuple[int, ...]

    def beats(self, other: "_DpEntry") -> bool:
        if self.score != other.score:
            return self.score > other.score
        if self.state.wall != other.state.wall:
            return self.state.wall < other.state.wall
        return self.path < other.path


def dp_optimal_session(
    ladder: BitrateLadder,
    trace: NetworkTrace,
    cfg: PlayerConfig,
    scorer,
) -> tuple[tuple[int, ...], Session, float]:
    """Best-case session under full future throughput knowledge.

    Ties between equally scoring sequences resolve toward the lower
    representation index, then the lexicographically earliest sequence.
    The returned score is the evaluator applied to the re-simulated
    session for the winning sequence.
    """
    seg = ladder.segment_duration
    if seg > cfg.buffer_capacity:
        raise ValidationError("buffer capacity below one segment duration")
    startup = cfg.resolved_startup(seg)
    downloader = _Downloader(trace)
    quantum = cfg.buffer_quantum
    n_reps = len(ladder.representations)
    n_segs = ladder.segment_count

    def chunk_score(k: int, prev_rep: int | None, rep: int, stall: float, ib: float) -> float:
        ctx = ChunkContext(
            index=k,
            quality=ladder.representations[rep].qualities[k],
            prev_quality=(
                ladder.representations[prev_rep].qualities[k - 1]
                if prev_rep is not None
                else None
            ),
            rebuffer_before=stall,
            initial_buffering=ib,
            bitrate_kbps=ladder.bitrate_kbps(rep, k),
            prev_bitrate_kbps=(
                ladder.bitrate_kbps(prev_rep, k - 1) if prev_rep is not None else None
            ),
        )
        return scorer.score_chunk(ctx)

    # Keys: ("pre", path) while playback has not started (chunk 0 cannot be
    # scored yet), then (prev_rep, buffer bucket) afterwards.
    states: dict = {("pre", ()): _DpEntry(0.0, _PlayerState(), ())}

    for k in range(n_segs):
        nxt: dict = {}
        for key in sorted(states, key=str):
            entry = states[key]
            pre_play = key[0] == "pre"
            for rep in range(n_reps):
                try:
                    state, stall, _, _ = _advance(
                        entry.state,
                        ladder.representations[rep].segment_bytes[k],
                        seg,
                        startup,
                        cfg.buffer_capacity,
                        downloader,
                    )
                except TraceExhaustedError:
                    continue
                path = entry.path + (rep,)
                score = entry.score
                prev_rep = entry.path[-1] if k else None
                if k > 0:
                    score += chunk_score(k, prev_rep, rep, stall, 0.0)
                if pre_play and state.playing:
                    # Startup just resolved: the first chunk becomes scoreable.
                    score += chunk_score(0, None, path[0], 0.0, state.initial_buffering)
                elif k == 0 and not state.playing:
                    pass  # deferred until startup resolves
                new_key = (
                    ("pre", path)
                    if not state.playing
                    else (rep, _bucket(state.buffer, quantum))
                )
                candidate = _DpEntry(score, state, path)
                existing = nxt.get(new_key)
                if existing is None or candidate.beats(existing):
                    nxt[new_key] = candidate
        if not nxt:
            raise TraceExhaustedError(
                f"the trace cannot carry any choice sequence past segment {k}"
            )
        states = nxt

    best: _DpEntry | None = None
    for key in sorted(states, key=str):
        entry = states[key]
        if key[0] == "pre":
            # Playback never started during downloads; it starts at the end.
            state = entry.state
            score = entry.score + chunk_score(0, None, entry.path[0], 0.0, state.wall)
            entry = _DpEntry(score, _PlayerState(state.wall, state.buffer, True, state.wall), entry.path)
        # Final tie-break is purely score then sequence order; the wall
        # clock only matters while futures are still undecided.
        if (
            best is None
            or entry.score > best.score
            or (entry.score == best.score and entry.path < best.path)
        ):
            best = entry

    session = simulate_download(best.path, ladder, trace, cfg)
    return best.path, session, score_session(scorer, session)


def _bucket(buffer: float, quantum: float) -> int:
    return int(math.floor(buffer / quantum + 0.5))


def brute_force_optimal(
    ladder: BitrateLadder,
    trace: NetworkTrace,
    cfg: PlayerConfig,
    scorer,
    max_segments: int = 8,
    max_representations: int = 4,
) -> tuple[tuple[int, ...], Session, float]:
    """Exhaustive search oracle; guarded against combinatorial blow-up."""
    if ladder.segment_count > max_segments or len(ladder.representations) > max_representations:
        raise ValidationError(
            f"instance too large for enumeration: {ladder.segment_count} segments x "
            f"{len(ladder.representations)} representations"
        )
    best = None
    for choices in itertools.product(
        range(len(ladder.representations)), repeat=ladder.segment_count
    ):
        try:
            session = simulate_download(choices, ladder, trace, cfg)
        except TraceExhaustedError:
            continue
        score = score_session(scorer, session)
        if best is None or score > best[2]:
            best = (choices, session, score)
    if best is None:
        raise TraceExhaustedError("the trace cannot carry any choice sequence")
    return best
