"""Shared synthetic-data generators.

The planted surfaces are closed forms chosen to satisfy every knowledge
constraint (checked by tests), so they double as recovery oracles: a
model trained on sessions generated from them must reproduce them.
"""

from __future__ import annotations

import numpy as np

from ksqi.grid import GridSpec
from ksqi.session import Chunk, Session
from ksqi.training import TrainingSet

QUALITY_MAX = 100.0


def s_linear(p, tau):
    """Stall surface, linear in both axes; zero curvature everywhere."""
    return -tau * (0.5 + p / (2 * QUALITY_MAX))


def s_curved(p, tau):
    """Stall surface with genuine curvature along the stall axis."""
    return -(tau ** 0.7) * (0.4 + p / (2 * QUALITY_MAX))


def a_planted(p, dp):
    """Switch surface: reward grows with the jump, shrinks with quality."""
    return 0.3 * dp - 0.15 * abs(dp) * p / QUALITY_MAX


def planted_s_grid(spec: GridSpec, fn=s_linear) -> np.ndarray:
    n = spec.n_points
    return np.array(
        [[fn(spec.quality_at(i + 1), spec.rebuffer_at(j + 1)) for j in range(n)] for i in range(n)]
    )


def planted_a_grid(spec: GridSpec, fn=a_planted) -> np.ndarray:
    n = spec.n_points
    return np.array(
        [
            [fn(spec.quality_at(i + 1), spec.quality_at(j + 1) - spec.quality_at(i + 1)) for j in range(n)]
            for i in range(n)
        ]
    )


def rebuffer_session(p: float, tau: float, mos: float, chunks: int = 4) -> Session:
    """Constant-quality session with one stall before its second chunk."""
    cs = [Chunk(p)] + [
        Chunk(p, rebuffering_before=tau if k == 0 else 0.0) for k in range(chunks - 1)
    ]
    return Session(tuple(cs), 0.0, mos)


def switch_session(p_from: float, p_to: float, mos: float, chunks: int = 4) -> Session:
    """One quality switch after the first chunk, no stalls."""
    cs = [Chunk(p_from)] + [Chunk(p_to)] * (chunks - 1)
    return Session(tuple(cs), 0.0, mos)


def full_coverage_training_set(
    spec: GridSpec,
    s_fn=s_linear,
    a_fn=a_planted,
    chunks: int = 4,
    repeats: int = 1,
    noise_sigma: float = 0.0,
    seed: int = 0,
) -> TrainingSet:
    """One (or more) sessions per grid cell, labelled from the planted surfaces."""
    rng = np.random.default_rng(seed)
    n = spec.n_points
    s_star = planted_s_grid(spec, s_fn)
    a_star = planted_a_grid(spec, a_fn)

    rebuf = []
    for i in range(n):
        p = spec.quality_at(i + 1)
        for j in range(1, n):
            tau = spec.rebuffer_at(j + 1)
            for _ in range(repeats):
                mos = p + s_star[i, j] / chunks + rng.normal(0.0, noise_sigma)
                rebuf.append(rebuffer_session(p, tau, mos, chunks))
    adapt = []
    for i in range(n):
        for j in range(n):
            if i == j:
                continue
            qi, qj = spec.quality_at(i + 1), spec.quality_at(j + 1)
            clean = (qi + (chunks - 1) * qj) / chunks + a_star[i, j] / chunks
            for _ in range(repeats):
                adapt.append(switch_session(qi, qj, clean + rng.normal(0.0, noise_sigma)))
    return TrainingSet(tuple(rebuf), tuple(adapt))


def holdout_sessions(spec: GridSpec, s_fn=s_linear, a_fn=a_planted, count: int = 60, seed: int = 1):
    """Mixed off-grid sessions with their exact model-free QoE labels.

    Ground truth replicates the prediction rule (mean quality plus event
    terms from the planted closed forms), so a recovered model's
    predictions must correlate essentially perfectly with these labels.
    """
    rng = np.random.default_rng(seed)
    sessions, truths = [], []
    for _ in range(count):
        length = int(rng.integers(4, 9))
        qualities = rng.uniform(10.0, 95.0, size=length)
        stalls = np.where(rng.random(length) < 0.4, rng.uniform(0.5, 8.0, length), 0.0)
        stalls[0] = 0.0
        chunks = tuple(
            Chunk(float(q), rebuffering_before=float(st)) for q, st in zip(qualities, stalls)
        )
        total = 0.0
        for t in range(length):
            q = qualities[t]
            if t == 0:
                total += q + a_fn(80.0, q - 80.0)
            else:
                total += q + s_fn(qualities[t - 1], stalls[t]) + a_fn(
                    qualities[t - 1], q - qualities[t - 1]
                )
        sessions.append(Session(chunks, 0.0, None))
        truths.append(total / length)
    return sessions, np.asarray(truths)
