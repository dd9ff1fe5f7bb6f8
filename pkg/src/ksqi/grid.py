"""Discretized QoE function grids and their linear constraint systems.

The rebuffering surface S(p, tau) and the adaptation surface A(p, dp) are
sampled on (N+1) x (N+1) grids.  Entry (i, j), 1-based as in the math
convention used throughout, represents

    S grid:  (p, tau) = ((i-1)/N * P, (j-1)/N * tau_max)
    A grid:  (p, dp)  = ((i-1)/N * P, (j-i)/N * P)

so for A the column j indexes the destination quality.  Grids vectorize
row-major: vec index k = (i-1)(N+1) + j.

Knowledge constraints become sparse linear rows over the vectorized grid:

    zero-anchor  s_{i,1} = 0            (no penalty without a stall)
                 a_{i,i} = 0            (no change without a switch)
    S1  s_{i,j+1} - s_{i,j}   <= 0      penalty grows with stall length
    S2  s_{i+1,j} - s_{i,j}   <= 0      penalty grows with prior quality
    S3  s_{i,j1} + s_{i,j2} - s_{i,j1+j2-1} <= 0   splitting a stall hurts
    S4  s_{i,j} - s_{i+1,j}   <= P/N    higher quality still wins overall
    A1/A2  a_{i,j} - a_{i,j+1} <= 0     reward monotone in switch direction
    A3  a_{i+1,j+1} - a_{i,j} <= 0      same switch hurts more from high p
    A4  a_{i,i-d} + a_{i-d,i} <= 0      down-switch outweighs up-switch

Adjacent-bin rows suffice for the monotone families (transitivity covers
the rest); S3 needs all (j1, j2) pairs because superadditivity is not
implied by adjacent cases.
"""

from __future__ import annotations

import io
import math
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp

from .errors import ValidationError

REBUFFERING = "rebuffering"
ADAPTATION = "adaptation"

S_CONSTRAINTS = ("S1", "S2", "S3", "S4")
A_CONSTRAINTS = ("A1", "A2", "A3", "A4")


@dataclass(frozen=True)
class GridSpec:
    """Discretization parameters: N grid steps, quality scale, stall ceiling."""

    n_steps: int = 10
    quality_max: float = 100.0
    rebuffer_max: float = 10.0

    def __post_init__(self):
        if int(self.n_steps) != self.n_steps or self.n_steps < 2:
            raise ValidationError("n_steps must be an integer >= 2")
        if self.quality_max <= 0:
            raise ValidationError("quality_max must be > 0")
        if self.rebuffer_max <= 0:
            raise ValidationError("rebuffer_max must be > 0")

    @property
    def n_points(self) -> int:
        return self.n_steps + 1

    @property
    def n_cells(self) -> int:
        return self.n_points * self.n_points

    def quality_at(self, i: int) -> float:
        """Quality value of 1-based row index i."""
        return (i - 1) / self.n_steps * self.quality_max

    def rebuffer_at(self, j: int) -> float:
        """Stall duration of 1-based column index j."""
        return (j - 1) / self.n_steps * self.rebuffer_max


@dataclass(frozen=True)
class QoEGrid:
    """A sampled QoE surface: ``kind`` is REBUFFERING or ADAPTATION."""

    kind: str
    values: np.ndarray
    spec: GridSpec

    def __post_init__(self):
        if self.kind not in (REBUFFERING, ADAPTATION):
            raise ValidationError(f"unknown grid kind {self.kind!r}")
        values = np.asarray(self.values, dtype=float)
        n = self.spec.n_points
        if values.shape != (n, n):
            raise ValidationError(
                f"grid values must be {n}x{n}, got {values.shape}"
            )
        object.__setattr__(self, "values", values)

    def vec(self) -> np.ndarray:
        return self.values.ravel(order="C")

    def anchor_violations(self, tol: float = 1e-9) -> list[str]:
        """Check the structural anchors: zero first column (S) / diagonal (A)."""
        out = []
        n = self.spec.n_points
        if self.kind == REBUFFERING:
            for i in range(n):
                if abs(self.values[i, 0]) > tol:
                    out.append(f"s[{i + 1},1] = {self.values[i, 0]:.3g} != 0")
        else:
            for i in range(n):
                if abs(self.values[i, i]) > tol:
                    out.append(f"a[{i + 1},{i + 1}] = {self.values[i, i]:.3g} != 0")
        return out


@dataclass(frozen=True)
class ConstraintSystem:
    """Sparse inequality (G x <= h) and equality (B x = c) systems.

    Each row carries a label like ``"S1(i=2,j=3)"`` naming the source
    constraint family and the 1-based grid location that produced it.
    """

    ineq_matrix: sp.csr_matrix
    ineq_bound: np.ndarray
    eq_matrix: sp.csr_matrix
    eq_bound: np.ndarray
    ineq_labels: tuple[str, ...] = field(default=())
    eq_labels: tuple[str, ...] = field(default=())

    def __post_init__(self):
        if self.ineq_matrix.shape[1] != self.eq_matrix.shape[1]:
            raise ValidationError("G and B must have the same column count")
        if self.ineq_matrix.shape[0] != len(self.ineq_bound):
            raise ValidationError("inequality row/bound count mismatch")
        if self.eq_matrix.shape[0] != len(self.eq_bound):
            raise ValidationError("equality row/bound count mismatch")
        if len(self.ineq_labels) != self.ineq_matrix.shape[0]:
            raise ValidationError("inequality label count mismatch")
        if len(self.eq_labels) != self.eq_matrix.shape[0]:
            raise ValidationError("equality label count mismatch")

    @property
    def n_vars(self) -> int:
        return self.ineq_matrix.shape[1]

    def counts_by_family(self) -> dict[str, int]:
        """Row counts keyed by constraint family (label prefix)."""
        counts: dict[str, int] = {}
        for label in list(self.eq_labels) + list(self.ineq_labels):
            family = label.split("(", 1)[0]
            counts[family] = counts.get(family, 0) + 1
        return counts


class _RowBuilder:
    """Accumulates sparse rows as triplets plus bounds and labels."""

    def __init__(self, n_vars: int):
        self.n_vars = n_vars
        self.rows: list[int] = []
        self.cols: list[int] = []
        self.vals: list[float] = []
        self.bounds: list[float] = []
        self.labels: list[str] = []

    def add(self, entries: list[tuple[int, float]], bound: float, label: str):
        r = len(self.bounds)
        for col, val in entries:
            self.rows.append(r)
            self.cols.append(col)
            self.vals.append(val)
        self.bounds.append(bound)
        self.labels.append(label)

    def build(self) -> tuple[sp.csr_matrix, np.ndarray, tuple[str, ...]]:
        mat = sp.csr_matrix(
            (self.vals, (self.rows, self.cols)),
            shape=(len(self.bounds), self.n_vars),
        )
        return mat, np.asarray(self.bounds, dtype=float), tuple(self.labels)


def _vec_index(spec: GridSpec, i: int, j: int) -> int:
    """Row-major vector index of 1-based grid entry (i, j)."""
    return (i - 1) * spec.n_points + (j - 1)


def _check_enabled(enabled, allowed) -> frozenset:
    enabled = frozenset(enabled)
    unknown = enabled - frozenset(allowed)
    if unknown:
        raise ValidationError(
            f"unknown constraint names {sorted(unknown)}; allowed: {list(allowed)}"
        )
    return enabled


def build_rebuffering_constraints(
    spec: GridSpec, enabled=S_CONSTRAINTS
) -> ConstraintSystem:
    """Constraint system for the rebuffering grid.

    The zero anchors s_{i,1} = 0 are always emitted; the S1..S4 inequality
    families are emitted only when named in ``enabled`` (possibly empty,
    which is the no-knowledge ablation baseline).
    """
    enabled = _check_enabled(enabled, S_CONSTRAINTS)
    n = spec.n_points
    N = spec.n_steps
    eq = _RowBuilder(spec.n_cells)
    for i in range(1, n + 1):
        eq.add([(_vec_index(spec, i, 1), 1.0)], 0.0, f"zero-anchor(i={i})")

    ineq = _RowBuilder(spec.n_cells)
    if "S1" in enabled:
        for i in range(1, n + 1):
            for j in range(1, N + 1):
                ineq.add(
                    [
                        (_vec_index(spec, i, j + 1), 1.0),
                        (_vec_index(spec, i, j), -1.0),
                    ],
                    0.0,
                    f"S1(i={i},j={j})",
                )
    if "S2" in enabled:
        for i in range(1, N + 1):
            for j in range(1, n + 1):
                ineq.add(
                    [
                        (_vec_index(spec, i + 1, j), 1.0),
                        (_vec_index(spec, i, j), -1.0),
                    ],
                    0.0,
                    f"S2(i={i},j={j})",
                )
    if "S3" in enabled:
        for i in range(1, n + 1):
            for j1 in range(2, n + 1):
                for j2 in range(j1, n + 1):
                    j_sum = j1 + j2 - 1
                    if j_sum > n:
                        break
                    entries = {
                        _vec_index(spec, i, j1): 0.0,
                        _vec_index(spec, i, j2): 0.0,
                        _vec_index(spec, i, j_sum): 0.0,
                    }
                    entries[_vec_index(spec, i, j1)] += 1.0
                    entries[_vec_index(spec, i, j2)] += 1.0
                    entries[_vec_index(spec, i, j_sum)] -= 1.0
                    ineq.add(
                        sorted(entries.items()),
                        0.0,
                        f"S3(i={i},j1={j1},j2={j2})",
                    )
    if "S4" in enabled:
        step = spec.quality_max / N
        for i in range(1, N + 1):
            for j in range(1, n + 1):
                ineq.add(
                    [
                        (_vec_index(spec, i, j), 1.0),
                        (_vec_index(spec, i + 1, j), -1.0),
                    ],
                    step,
                    f"S4(i={i},j={j})",
                )

    gmat, h, glabels = ineq.build()
    bmat, c, blabels = eq.build()
    return ConstraintSystem(gmat, h, bmat, c, glabels, blabels)


def build_adaptation_constraints(
    spec: GridSpec, enabled=A_CONSTRAINTS
) -> ConstraintSystem:
    """Constraint system for the adaptation grid.

    A1 (sign) and A2 (monotone in the switch magnitude) collapse onto the
    same adjacent-column rows once the zero diagonal is anchored, so
    enabling either emits the shared ``A1/A2`` family.
    """
    enabled = _check_enabled(enabled, A_CONSTRAINTS)
    n = spec.n_points
    N = spec.n_steps
    eq = _RowBuilder(spec.n_cells)
    for i in range(1, n + 1):
        eq.add([(_vec_index(spec, i, i), 1.0)], 0.0, f"zero-anchor(i={i})")

    ineq = _RowBuilder(spec.n_cells)
    if "A1" in enabled or "A2" in enabled:
        for i in range(1, n + 1):
            for j in range(1, N + 1):
                ineq.add(
                    [
                        (_vec_index(spec, i, j), 1.0),
                        (_vec_index(spec, i, j + 1), -1.0),
                    ],
                    0.0,
                    f"A1/A2(i={i},j={j})",
                )
    if "A3" in enabled:
        for i in range(1, N + 1):
            for j in range(1, N + 1):
                ineq.add(
                    [
                        (_vec_index(spec, i + 1, j + 1), 1.0),
                        (_vec_index(spec, i, j), -1.0),
                    ],
                    0.0,
                    f"A3(i={i},j={j})",
                )
    if "A4" in enabled:
        for i in range(2, n + 1):
            for d in range(1, i):
                ineq.add(
                    [
                        (_vec_index(spec, i, i - d), 1.0),
                        (_vec_index(spec, i - d, i), 1.0),
                    ],
                    0.0,
                    f"A4(i={i},d={d})",
                )

    gmat, h, glabels = ineq.build()
    bmat, c, blabels = eq.build()
    return ConstraintSystem(gmat, h, bmat, c, glabels, blabels)


def expected_row_counts(n_steps: int, kind: str) -> dict[str, int]:
    """Closed-form row counts per constraint family for an N-step grid."""
    N = n_steps
    n = N + 1
    if kind == REBUFFERING:
        s3_pairs = sum(
            1
            for j1 in range(2, n + 1)
            for j2 in range(j1, n + 1)
            if j1 + j2 <= N + 2
        )
        return {
            "zero-anchor": n,
            "S1": n * N,
            "S2": N * n,
            "S3": n * s3_pairs,
            "S4": N * n,
        }
    return {
        "zero-anchor": n,
        "A1/A2": n * N,
        "A3": N * N,
        "A4": N * n // 2,
    }


def check_feasible(
    grid: QoEGrid, cs: ConstraintSystem, tol: float = 1e-6
) -> list[tuple[str, float]]:
    """Rows of ``cs`` that ``grid`` violates beyond ``tol``.

    Inequality row r is reported when (G v - h)_r > tol; equality row r
    when |(B v - c)_r| > tol.  Returns (label, residual) pairs.
    """
    v = grid.vec()
    if cs.n_vars != v.size:
        raise ValidationError(
            f"system has {cs.n_vars} columns but grid has {v.size} cells"
        )
    out: list[tuple[str, float]] = []
    eq_res = cs.eq_matrix @ v - cs.eq_bound
    for label, res in zip(cs.eq_labels, eq_res):
        if abs(res) > tol:
            out.append((label, float(res)))
    ineq_res = cs.ineq_matrix @ v - cs.ineq_bound
    for label, res in zip(cs.ineq_labels, ineq_res):
        if res > tol:
            out.append((label, float(res)))
    return out


def bin_index(spec: GridSpec, p: float, second_coord: float, kind: str) -> tuple[int, int]:
    """Quantize a continuous feature pair onto 1-based grid indices.

    Nearest-bin rounding with ties toward the larger index.  For the
    rebuffering grid, stalls beyond the ceiling clamp to the last column
    (training-time behaviour; prediction extrapolates instead).  For the
    adaptation grid the column is derived from the already-rounded row, so
    on-grid switches land exactly on their destination-quality column.
    """
    N = spec.n_steps
    if not 0.0 <= p <= spec.quality_max:
        raise ValidationError(f"quality {p} outside [0, {spec.quality_max:g}]")
    i = _round_half_up(p * N / spec.quality_max) + 1
    if kind == REBUFFERING:
        tau = second_coord
        if tau < 0:
            raise ValidationError(f"rebuffering duration {tau} < 0")
        if tau > spec.rebuffer_max:
            j = N + 1
        else:
            j = _round_half_up(tau * N / spec.rebuffer_max) + 1
    elif kind == ADAPTATION:
        dp = second_coord
        if dp < -p - 1e-12 or dp > spec.quality_max - p + 1e-12:
            raise ValidationError(
                f"quality change {dp} outside [-p, P-p] = [{-p:g}, {spec.quality_max - p:g}]"
            )
        j = _round_half_up(i + dp * N / spec.quality_max)
        j = min(max(j, 1), N + 1)
    else:
        raise ValidationError(f"unknown grid kind {kind!r}")
    return i, j


def _round_half_up(x: float) -> int:
    return int(math.floor(x + 0.5))


def export_triplets(cs: ConstraintSystem) -> str:
    """Dump a system as sparse-triplet text for cross-checking externally.

    Layout: an ``[inequality]`` section of ``row col value`` triplets with
    0-based indices, a ``bounds`` line per row, then the same for the
    ``[equality]`` section.
    """
    buf = io.StringIO()
    for title, mat, bound, labels in (
        ("inequality", cs.ineq_matrix, cs.ineq_bound, cs.ineq_labels),
        ("equality", cs.eq_matrix, cs.eq_bound, cs.eq_labels),
    ):
        buf.write(f"[{title}] rows={mat.shape[0]} cols={mat.shape[1]}\n")
        coo = mat.tocoo()
        order = np.lexsort((coo.col, coo.row))
        for k in order:
            buf.write(f"{coo.row[k]} {coo.col[k]} {coo.data[k]:.17g}\n")
        for r, (b, label) in enumerate(zip(bound, labels)):
            buf.write(f"bound {r} {b:.17g} {label}\n")
    return buf.getvalue()
