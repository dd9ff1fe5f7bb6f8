"""Model training: fidelity/smoothness objective assembly and the QP solves.

Training data is split by event type: sessions with stalls and a constant
quality track fit the rebuffering surface, sessions with quality switches
and no stalls fit the adaptation surface.  Each event in session m puts a
1/C_m weight (C_m = chunk count) into a sparse design matrix W at the
event's grid cell, and the target is the session's MOS minus its mean
presentation quality.  The fitted surface v then minimizes

    |W v - y|^2 / M  +  lambda * |D v|^2 / (N+1)^2

over the knowledge constraint set, where D stacks second differences
along both grid axes.  MOS values must already be on the presentation
quality scale (see ``ksqi.metrics.rescale_mos``).

Startup delay never enters training; it is handled by a fixed discount
rule at prediction time.  For the same reason a stall attached to the
very first chunk (which is indistinguishable from startup delay) produces
no training event.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp

from .errors import FeasibilityError, SolverFailure, ValidationError
from .grid import (
    A_CONSTRAINTS,
    ADAPTATION,
    REBUFFERING,
    S_CONSTRAINTS,
    ConstraintSystem,
    GridSpec,
    QoEGrid,
    bin_index,
    build_adaptation_constraints,
    build_rebuffering_constraints,
    check_feasible,
)
from .session import Dataset, Session, session_features
from .solver import QpProblem, SolverStatus, solve_qp

MODEL_FORMAT_VERSION = 1
FEASIBILITY_TOL = 1e-6


def _require_mos(s: Session, where: str) -> float:
    if s.mos is None:
        raise ValidationError(f"{where} has no MOS label")
    return s.mos


def _check_rebuffer_session(s: Session, where: str):
    feats = session_features(s)
    if feats.total_switch_magnitude != 0:
        raise ValidationError(
            f"{where} has quality switches and cannot train the rebuffering surface"
        )
    _require_mos(s, where)


def _check_adaptation_session(s: Session, where: str):
    feats = session_features(s)
    if feats.total_rebuffer_seconds != 0 or s.initial_buffering != 0:
        raise ValidationError(
            f"{where} has stalls or startup delay and cannot train the adaptation surface"
        )
    _require_mos(s, where)


@dataclass(frozen=True)
class TrainingSet:
    """Event-partitioned, MOS-labelled sessions ready for the two QP fits."""

    rebuffer_sessions: tuple[Session, ...]
    adaptation_sessions: tuple[Session, ...]

    def __post_init__(self):
        object.__setattr__(self, "rebuffer_sessions", tuple(self.rebuffer_sessions))
        object.__setattr__(self, "adaptation_sessions", tuple(self.adaptation_sessions))
        for k, s in enumerate(self.rebuffer_sessions):
            _check_rebuffer_session(s, f"rebuffer session {k}")
        for k, s in enumerate(self.adaptation_sessions):
            _check_adaptation_session(s, f"adaptation session {k}")


def split_training_set(ds: Dataset) -> tuple[TrainingSet, list[int]]:
    """Partition a labelled dataset by event type.

    Constant-quality stall-free sessions qualify for both partitions (they
    carry no events but anchor the MOS scale).  Sessions mixing stalls and
    switches fit neither partition and are skipped; their indices are
    returned so callers can report them.
    """
    rebuffer: list[Session] = []
    adaptation: list[Session] = []
    skipped: list[int] = []
    for k, s in enumerate(ds.sessions):
        if s.mos is None:
            raise ValidationError(f"session {k} in dataset '{ds.name}' has no MOS label")
        feats = session_features(s)
        no_switch = feats.total_switch_magnitude == 0
        no_stall = feats.total_rebuffer_seconds == 0 and s.initial_buffering == 0
        if no_switch:
            rebuffer.append(s)
        if no_stall and not no_switch:
            adaptation.append(s)
        if not no_switch and not no_stall:
            skipped.append(k)
    return TrainingSet(tuple(rebuffer), tuple(adaptation)), skipped


# ---------------------------------------------------------------------------
# Objective assembly
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class FidelityDesign:
    """Sparse per-session event-count rows W and targets y = MOS - mean P."""

    weight_matrix: sp.csr_matrix
    target_vector: np.ndarray


def rebuffer_events(s: Session, spec: GridSpec) -> list[tuple[int, int]]:
    """Grid cells (1-based) hit by the session's mid-stream stalls."""
    cells = []
    for c in range(1, len(s.chunks)):
        tau = s.chunks[c].rebuffering_before
        if tau > 0:
            p_prev = s.chunks[c - 1].presentation_quality
            cells.append(bin_index(spec, p_prev, tau, REBUFFERING))
    return cells


def switch_events(s: Session, spec: GridSpec) -> list[tuple[int, int]]:
    """Grid cells (1-based) hit by the session's quality switches."""
    cells = []
    for c in range(1, len(s.chunks)):
        p_prev = s.chunks[c - 1].presentation_quality
        p_cur = s.chunks[c].presentation_quality
        if p_cur != p_prev:
            cells.append(bin_index(spec, p_prev, p_cur - p_prev, ADAPTATION))
    return cells


def _design(sessions, spec: GridSpec, extract) -> FidelityDesign:
    n = spec.n_points
    rows, cols, vals, targets = [], [], [], []
    for m, s in enumerate(sessions):
        c_m = len(s.chunks)
        feats = session_features(s)
        targets.append(s.mos - feats.mean_quality)
        for (i, j) in extract(s, spec):
            rows.append(m)
            cols.append((i - 1) * n + (j - 1))
            vals.append(1.0 / c_m)
    W = sp.csr_matrix(
        (vals, (rows, cols)), shape=(len(sessions), spec.n_cells)
    )
    W.sum_duplicates()
    return FidelityDesign(W, np.asarray(targets, dtype=float))


def rebuffering_design(sessions, spec: GridSpec) -> FidelityDesign:
    for k, s in enumerate(sessions):
        _check_rebuffer_session(s, f"rebuffer session {k}")
    return _design(sessions, spec, rebuffer_events)


def adaptation_design(sessions, spec: GridSpec) -> FidelityDesign:
    for k, s in enumerate(sessions):
        _check_adaptation_session(s, f"adaptation session {k}")
    return _design(sessions, spec, switch_events)


def second_difference_operator(spec: GridSpec) -> sp.csr_matrix:
    """Stacked second differences along both axes, interior points only.

    |D v|^2 / (N+1)^2 is the smoothness energy of the grid vector v.
    """
    n = spec.n_points
    rows, cols, vals = [], [], []
    r = 0

    def cell(i, j):
        return i * n + j

    for j in range(n):  # along the quality axis
        for i in range(1, n - 1):
            rows += [r, r, r]
            cols += [cell(i - 1, j), cell(i, j), cell(i + 1, j)]
            vals += [1.0, -2.0, 1.0]
            r += 1
    for i in range(n):  # along the second axis
        for j in range(1, n - 1):
            rows += [r, r, r]
            cols += [cell(i, j - 1), cell(i, j), cell(i, j + 1)]
            vals += [1.0, -2.0, 1.0]
            r += 1
    return sp.csr_matrix((vals, (rows, cols)), shape=(r, spec.n_cells))


def fidelity_error(design: FidelityDesign, v: np.ndarray) -> float:
    """Mean squared training error of grid vector v under the design."""
    resid = design.weight_matrix @ v - design.target_vector
    return float(resid @ resid / len(design.target_vector))


def smoothness_energy(spec: GridSpec, v: np.ndarray) -> float:
    d = second_difference_operator(spec) @ v
    return float(d @ d / spec.n_cells)


def _assemble(design: FidelityDesign, spec: GridSpec, lam: float, cs: ConstraintSystem) -> QpProblem:
    W = design.weight_matrix
    y = design.target_vector
    M = W.shape[0]
    D = second_difference_operator(spec)
    quad = 2.0 * ((W.T @ W).toarray() / M + lam * (D.T @ D).toarray() / spec.n_cells)
    quad = (quad + quad.T) / 2.0
    lin = -2.0 * (W.T @ y) / M
    return QpProblem(quad, np.asarray(lin).ravel(), cs)


def assemble_rebuffering_objective(
    ts: TrainingSet, spec: GridSpec, lam: float, enabled=S_CONSTRAINTS
) -> QpProblem:
    if not ts.rebuffer_sessions:
        raise ValidationError("rebuffer partition is empty")
    design = rebuffering_design(ts.rebuffer_sessions, spec)
    return _assemble(design, spec, lam, build_rebuffering_constraints(spec, enabled))


def assemble_adaptation_objective(
    ts: TrainingSet, spec: GridSpec, lam: float, enabled=A_CONSTRAINTS
) -> QpProblem:
    if not ts.adaptation_sessions:
        raise ValidationError("adaptation partition is empty")
    design = adaptation_design(ts.adaptation_sessions, spec)
    return _assemble(design, spec, lam, build_adaptation_constraints(spec, enabled))


# ---------------------------------------------------------------------------
# The trained model
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class KsqiModel:
    """Trained rebuffering and adaptation grids plus their provenance."""

    s_grid: QoEGrid
    a_grid: QoEGrid
    spec: GridSpec
    lam: float
    constraints: tuple[str, ...] = S_CONSTRAINTS + A_CONSTRAINTS
    provenance: dict = field(default_factory=dict)

    @property
    def s_constraints(self) -> tuple[str, ...]:
        return tuple(c for c in self.constraints if c in S_CONSTRAINTS)

    @property
    def a_constraints(self) -> tuple[str, ...]:
        return tuple(c for c in self.constraints if c in A_CONSTRAINTS)


def verify_model_feasibility(model: KsqiModel, tol: float = FEASIBILITY_TOL):
    """Raise FeasibilityError if either grid violates its constraint system."""
    s_cs = build_rebuffering_constraints(model.spec, model.s_constraints)
    a_cs = build_adaptation_constraints(model.spec, model.a_constraints)
    violations = [
        ("S", label, res) for label, res in check_feasible(model.s_grid, s_cs, tol)
    ] + [
        ("A", label, res) for label, res in check_feasible(model.a_grid, a_cs, tol)
    ]
    if violations:
        worst = max(violations, key=lambda v: abs(v[2]))
        raise FeasibilityError(
            f"{len(violations)} constraint rows violated beyond {tol:g}; "
            f"worst: {worst[0]} grid, {worst[1]} by {worst[2]:.3g}",
            violations,
        )


def _solve_grid(problem: QpProblem, kind: str, spec: GridSpec, solver_opts) -> tuple[QoEGrid, dict]:
    report = solve_qp(problem, **solver_opts)
    if report.status is not SolverStatus.OPTIMAL:
        raise SolverFailure(
            f"{kind} training QP ended with status {report.status.value} "
            f"(primal {report.primal_residual:.3g}, dual {report.dual_residual:.3g})",
            report,
        )
    values = report.solution.reshape(spec.n_points, spec.n_points).copy()
    # The anchors are tight at optimality; snap them so lookups are exact.
    if kind == REBUFFERING:
        values[:, 0] = 0.0
    else:
        np.fill_diagonal(values, 0.0)
    grid = QoEGrid(kind, values, spec)
    info = {
        "iterations": report.iterations,
        "primal_residual": report.primal_residual,
        "dual_residual": report.dual_residual,
        "objective": report.objective,
    }
    return grid, info


def train_ksqi(
    ts: TrainingSet,
    spec: GridSpec = GridSpec(),
    lam: float = 1.0,
    constraints=None,
    **solver_opts,
) -> KsqiModel:
    """Fit both surfaces and return a feasibility-verified model.

    ``constraints`` restricts the enabled inequality families (ablation
    runs); None enables all of S1..S4 and A1..A4.  The zero anchors are
    always kept.  Solver keyword arguments pass through to ``solve_qp``.
    """
    if constraints is None:
        enabled = S_CONSTRAINTS + A_CONSTRAINTS
    else:
        enabled = tuple(constraints)
        unknown = set(enabled) - set(S_CONSTRAINTS + A_CONSTRAINTS)
        if unknown:
            raise ValidationError(f"unknown constraint names {sorted(unknown)}")
    s_enabled = tuple(c for c in enabled if c in S_CONSTRAINTS)
    a_enabled = tuple(c for c in enabled if c in A_CONSTRAINTS)

    s_problem = assemble_rebuffering_objective(ts, spec, lam, s_enabled)
    a_problem = assemble_adaptation_objective(ts, spec, lam, a_enabled)
    s_grid, s_info = _solve_grid(s_problem, REBUFFERING, spec, solver_opts)
    a_grid, a_info = _solve_grid(a_problem, ADAPTATION, spec, solver_opts)

    model = KsqiModel(
        s_grid=s_grid,
        a_grid=a_grid,
        spec=spec,
        lam=lam,
        constraints=enabled,
        provenance={
            "rebuffer_sessions": len(ts.rebuffer_sessions),
            "adaptation_sessions": len(ts.adaptation_sessions),
            "rebuffering_solve": s_info,
            "adaptation_solve": a_info,
        },
    )
    verify_model_feasibility(model)
    return model


def cross_validate_lambda(
    ts: TrainingSet,
    spec: GridSpec,
    candidates,
    split_fraction: float = 0.8,
    seed: int = 0,
    first_chunk_adaptation: bool = False,
    **solver_opts,
) -> tuple[float, list[float]]:
    """Pick the weighting factor by a random train/validation split.

    Returns the winning candidate and the per-candidate validation MSE.
    Deterministic for a fixed seed; ties go to the larger candidate.
    Validation scoring defaults to the training-consistent convention
    (no first-chunk adaptation term): training extracts no event from the
    first chunk, so charging one here would bias the selection.
    """
    from .prediction import session_qoe

    candidates = list(candidates)
    if not candidates:
        raise ValidationError("no lambda candidates given")
    if not 0 < split_fraction < 1:
        raise ValidationError("split_fraction must lie in (0, 1)")
    for name, sessions in (
        ("rebuffer", ts.rebuffer_sessions),
        ("adaptation", ts.adaptation_sessions),
    ):
        if len(sessions) < 2:
            raise ValidationError(
                f"{name} partition needs at least 2 sessions to split"
            )

    rng = np.random.default_rng(seed)

    def split(sessions):
        idx = rng.permutation(len(sessions))
        n_train = min(max(int(round(len(sessions) * split_fraction)), 1), len(sessions) - 1)
        train = tuple(sessions[i] for i in idx[:n_train])
        val = tuple(sessions[i] for i in idx[n_train:])
        return train, val

    train_r, val_r = split(ts.rebuffer_sessions)
    train_a, val_a = split(ts.adaptation_sessions)
    train_set = TrainingSet(train_r, train_a)
    validation = list(val_r) + list(val_a)

    losses = []
    for lam in candidates:
        model = train_ksqi(train_set, spec, lam, **solver_opts)
        errs = [
            session_qoe(model, s, first_chunk_adaptation).final_score - s.mos
            for s in validation
        ]
        losses.append(float(np.mean(np.square(errs))))

    best_lam, best_loss = candidates[0], losses[0]
    for lam, loss in zip(candidates[1:], losses[1:]):
        if loss < best_loss or (loss == best_loss and lam > best_lam):
            best_lam, best_loss = lam, loss
    return best_lam, losses


@dataclass(frozen=True)
class SweepPoint:
    lam: float
    s_fidelity: float
    s_smoothness: float
    a_fidelity: float
    a_smoothness: float


def lambda_sweep(ts: TrainingSet, spec: GridSpec, lambdas, **solver_opts) -> list[SweepPoint]:
    """Train at each weighting factor and record both objective terms."""
    s_design = rebuffering_design(ts.rebuffer_sessions, spec)
    a_design = adaptation_design(ts.adaptation_sessions, spec)
    points = []
    for lam in lambdas:
        model = train_ksqi(ts, spec, lam, **solver_opts)
        sv = model.s_grid.vec()
        av = model.a_grid.vec()
        points.append(
            SweepPoint(
                lam=float(lam),
                s_fidelity=fidelity_error(s_design, sv),
                s_smoothness=smoothness_energy(spec, sv),
                a_fidelity=fidelity_error(a_design, av),
                a_smoothness=smoothness_energy(spec, av),
            )
        )
    return points


# ---------------------------------------------------------------------------
# Model documents
# ---------------------------------------------------------------------------


def serialize_model(model: KsqiModel) -> str:
    doc = {
        "format_version": MODEL_FORMAT_VERSION,
        "kind": "ksqi-model",
        "grid": {
            "n_steps": model.spec.n_steps,
            "quality_max": model.spec.quality_max,
            "rebuffer_max": model.spec.rebuffer_max,
        },
        "lambda": model.lam,
        "constraints": list(model.constraints),
        "s_values": model.s_grid.values.tolist(),
        "a_values": model.a_grid.values.tolist(),
        "provenance": model.provenance,
    }
    return json.dumps(doc, sort_keys=True, indent=2)


def deserialize_model(text: str) -> KsqiModel:
    """Parse a model document and re-verify its feasibility invariants."""
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ValidationError(f"model document is not valid JSON: {exc}") from exc
    if not isinstance(doc, dict) or doc.get("kind") != "ksqi-model":
        raise ValidationError("document is not a ksqi model")
    version = doc.get("format_version")
    if version != MODEL_FORMAT_VERSION:
        raise ValidationError(
            f"unsupported model format version {version!r} "
            f"(expected {MODEL_FORMAT_VERSION})"
        )
    grid_doc = doc.get("grid", {})
    spec = GridSpec(
        n_steps=int(grid_doc.get("n_steps", 0)),
        quality_max=float(grid_doc.get("quality_max", 0.0)),
        rebuffer_max=float(grid_doc.get("rebuffer_max", 0.0)),
    )
    constraints = tuple(doc.get("constraints", []))
    model = KsqiModel(
        s_grid=QoEGrid(REBUFFERING, np.asarray(doc["s_values"], dtype=float), spec),
        a_grid=QoEGrid(ADAPTATION, np.asarray(doc["a_values"], dtype=float), spec),
        spec=spec,
        lam=float(doc["lambda"]),
        constraints=constraints,
        provenance=doc.get("provenance", {}),
    )
    verify_model_feasibility(model)
    return model
