"""Convex QP solver based on operator splitting (ADMM) with over-relaxation.

Solves

    minimize    1/2 x' P x + q' x
    subject to  G x <= h,   B x = c

by splitting on z = A x with A = [G; B] and box bounds l <= z <= u where
l = [-inf; c], u = [h; c].  Per iteration, with step weights rho (larger on
equality rows) and regularizer sigma:

    x~ = (P + sigma I + A' diag(rho) A)^{-1} (sigma x - q + A'(rho z - y))
    x  = alpha x~ + (1 - alpha) x
    z^ = alpha A x~ + (1 - alpha) z
    z  = clip(z^ + y / rho, l, u)
    y  = y + rho (z^ - z)

The step weight is rescaled from the primal/dual residual ratio, and a
final active-set polish solves the KKT system of the detected active rows
to push residuals to machine precision when the active set is identified
correctly.  Primal infeasibility is detected from the dual update
direction acting as a Farkas certificate.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass
from typing import IO, NamedTuple

import numpy as np
import scipy.linalg
import scipy.sparse as sp

from .errors import ValidationError
from .grid import ConstraintSystem


class SolverStatus(enum.Enum):
    OPTIMAL = "optimal"
    MAX_ITERATIONS = "max_iterations"
    INFEASIBLE = "infeasible"


@dataclass(frozen=True)
class QpProblem:
    """Quadratic objective 1/2 x'Px + q'x over a linear constraint system."""

    quad_matrix: np.ndarray
    lin_vector: np.ndarray
    constraints: ConstraintSystem

    def __post_init__(self):
        P = np.asarray(self.quad_matrix, dtype=float)
        q = np.asarray(self.lin_vector, dtype=float)
        if P.ndim != 2 or P.shape[0] != P.shape[1]:
            raise ValidationError("quad_matrix must be square")
        scale = max(np.abs(P).max(), 1.0)
        if np.abs(P - P.T).max() > 1e-12 * scale:
            raise ValidationError("quad_matrix must be symmetric")
        if q.shape != (P.shape[0],):
            raise ValidationError("lin_vector length must match quad_matrix")
        if self.constraints.n_vars != P.shape[0]:
            raise ValidationError("constraint column count must match quad_matrix")
        object.__setattr__(self, "quad_matrix", P)
        object.__setattr__(self, "lin_vector", q)

    @property
    def n_vars(self) -> int:
        return self.quad_matrix.shape[0]

    def objective(self, x: np.ndarray) -> float:
        x = np.asarray(x, dtype=float)
        return float(0.5 * x @ (self.quad_matrix @ x) + self.lin_vector @ x)


@dataclass(frozen=True)
class SolverReport:
    solution: np.ndarray
    status: SolverStatus
    primal_residual: float
    dual_residual: float
    iterations: int
    objective: float
    ineq_duals: np.ndarray
    eq_duals: np.ndarray


class KktResiduals(NamedTuple):
    primal: float
    dual: float
    complementarity: float


def kkt_residuals(
    problem: QpProblem,
    x: np.ndarray,
    ineq_duals: np.ndarray,
    eq_duals: np.ndarray,
) -> KktResiduals:
    """Infinity norms of primal feasibility, stationarity, and slackness.

    Inequality duals must be nonnegative; a negative entry is a contract
    violation, not a large residual.
    """
    cs = problem.constraints
    x = np.asarray(x, dtype=float)
    lam = np.asarray(ineq_duals, dtype=float)
    nu = np.asarray(eq_duals, dtype=float)
    if x.shape != (problem.n_vars,):
        raise ValidationError("x has the wrong length")
    if lam.shape != (cs.ineq_matrix.shape[0],) or nu.shape != (cs.eq_matrix.shape[0],):
        raise ValidationError("dual vector lengths do not match the system")
    if lam.size and lam.min() < 0:
        raise ValidationError("inequality duals must be nonnegative")

    ineq_slack = cs.ineq_matrix @ x - cs.ineq_bound
    eq_gap = cs.eq_matrix @ x - cs.eq_bound
    primal = max(
        float(np.maximum(ineq_slack, 0.0).max(initial=0.0)),
        float(np.abs(eq_gap).max(initial=0.0)),
    )
    stationarity = (
        problem.quad_matrix @ x
        + problem.lin_vector
        + cs.ineq_matrix.T @ lam
        + cs.eq_matrix.T @ nu
    )
    dual = float(np.abs(stationarity).max(initial=0.0))
    comp = float(abs(lam @ ineq_slack)) if lam.size else 0.0
    return KktResiduals(primal, dual, comp)


_EQ_RHO_SCALE = 1e3
_MIN_RHO = 1e-6
_MAX_RHO = 1e6


def solve_qp(
    problem: QpProblem,
    tol_primal: float = 1e-8,
    tol_dual: float = 1e-8,
    max_iter: int = 200_000,
    rho: float = 0.1,
    sigma: float = 1e-6,
    over_relaxation: float = 1.6,
    trace: IO[str] | None = None,
) -> SolverReport:
    """Run ADMM until both residual tolerances hold, then polish.

    Deterministic for fixed inputs: no randomness, fixed initialization at
    the origin, and a fixed residual-check cadence.  ``trace`` optionally
    receives CSV rows (iteration, objective, primal, dual) at every check.
    """
    if tol_primal <= 0 or tol_dual <= 0:
        raise ValidationError("tolerances must be positive")
    if not 0 < over_relaxation < 2:
        raise ValidationError("over_relaxation must lie in (0, 2)")
    P = problem.quad_matrix
    q = problem.lin_vector
    cs = problem.constraints
    n = problem.n_vars
    m_i = cs.ineq_matrix.shape[0]
    m_e = cs.eq_matrix.shape[0]
    m = m_i + m_e

    if m == 0:
        x, *_ = np.linalg.lstsq(P, -q, rcond=None)
        dual = float(np.abs(P @ x + q).max(initial=0.0))
        status = SolverStatus.OPTIMAL if dual <= tol_dual else SolverStatus.MAX_ITERATIONS
        return SolverReport(
            x, status, 0.0, dual, 0, problem.objective(x),
            np.zeros(0), np.zeros(0),
        )

    A = sp.vstack([cs.ineq_matrix, cs.eq_matrix], format="csr")
    l = np.concatenate([np.full(m_i, -np.inf), cs.eq_bound])
    u = np.concatenate([cs.ineq_bound, cs.eq_bound])
    rho_scale = np.concatenate([np.ones(m_i), np.full(m_e, _EQ_RHO_SCALE)])

    if trace is not None:
        trace.write("iteration,objective,primal_residual,dual_residual\n")

    def factor(rho_now: float):
        rho_vec = rho_now * rho_scale
        M = P + sigma * np.eye(n) + (A.T.multiply(rho_vec) @ A).toarray()
        try:
            return scipy.linalg.cho_factor(M), rho_vec, True
        except np.linalg.LinAlgError:
            return scipy.linalg.lu_factor(M), rho_vec, False

    fac, rho_vec, is_chol = factor(rho)
    solve = (
        (lambda rhs: scipy.linalg.cho_solve(fac, rhs))
        if is_chol
        else (lambda rhs: scipy.linalg.lu_solve(fac, rhs))
    )

    x = np.zeros(n)
    z = np.zeros(m)
    y = np.zeros(m)
    alpha = over_relaxation
    check_interval = 25
    y_prev_check = y.copy()
    status = SolverStatus.MAX_ITERATIONS
    iterations = max_iter

    for it in range(1, max_iter + 1):
        rhs = sigma * x - q + A.T @ (rho_vec * z - y)
        x_t = solve(rhs)
        z_t = A @ x_t
        x = alpha * x_t + (1.0 - alpha) * x
        z_hat = alpha * z_t + (1.0 - alpha) * z
        z = np.clip(z_hat + y / rho_vec, l, u)
        y = y + rho_vec * (z_hat - z)

        if it % check_interval:
            continue

        ax = A @ x
        r_prim = float(np.abs(ax - z).max(initial=0.0))
        r_dual = float(np.abs(P @ x + q + A.T @ y).max(initial=0.0))
        if trace is not None:
            trace.write(f"{it},{problem.objective(x):.17g},{r_prim:.17g},{r_dual:.17g}\n")
        if r_prim <= tol_primal and r_dual <= tol_dual:
            status = SolverStatus.OPTIMAL
            iterations = it
            break

        # Degenerate duals can leave a slowly decaying tail; once the primal
        # is tight, try finishing through the active-set polish instead.
        if (
            it % 100 == 0
            and r_prim <= tol_primal
            and r_dual <= max(1e3 * tol_dual, 1e-6)
        ):
            x_p, lam_p, nu_p = _polish(problem, A, u, m_i, x, y, sigma)
            pr = _kkt_quality(problem, A, u, m_i, x_p, lam_p, nu_p)
            if pr <= min(tol_primal, tol_dual):
                x = x_p
                y = np.concatenate([lam_p, nu_p])
                status = SolverStatus.OPTIMAL
                iterations = it
                break

        delta_y = y - y_prev_check
        y_prev_check = y.copy()
        if _is_primal_infeasible(A, l, u, m_i, delta_y):
            status = SolverStatus.INFEASIBLE
            iterations = it
            break

        # Rebalance the step weight when the residuals drift apart.
        if it % 100 == 0:
            prim_ref = max(
                float(np.abs(ax).max(initial=0.0)),
                float(np.abs(z).max(initial=0.0)),
                1e-12,
            )
            dual_ref = max(
                float(np.abs(P @ x).max(initial=0.0)),
                float(np.abs(A.T @ y).max(initial=0.0)),
                float(np.abs(q).max(initial=0.0)),
                1e-12,
            )
            ratio = np.sqrt((r_prim / prim_ref) / max(r_dual / dual_ref, 1e-16))
            if ratio > 5.0 or ratio < 0.2:
                rho = float(np.clip(rho * ratio, _MIN_RHO, _MAX_RHO))
                fac, rho_vec, is_chol = factor(rho)
                solve = (
                    (lambda rhs: scipy.linalg.cho_solve(fac, rhs))
                    if is_chol
                    else (lambda rhs: scipy.linalg.lu_solve(fac, rhs))
                )

    lam = np.maximum(y[:m_i], 0.0)
    nu = y[m_i:]
    if status is not SolverStatus.INFEASIBLE:
        x, lam, nu = _polish(problem, A, u, m_i, x, y, sigma)

    ineq_slack = cs.ineq_matrix @ x - cs.ineq_bound
    eq_gap = cs.eq_matrix @ x - cs.eq_bound
    primal = max(
        float(np.maximum(ineq_slack, 0.0).max(initial=0.0)),
        float(np.abs(eq_gap).max(initial=0.0)),
    )
    dual = float(
        np.abs(
            P @ x + q + cs.ineq_matrix.T @ lam + cs.eq_matrix.T @ nu
        ).max(initial=0.0)
    )
    if status is not SolverStatus.INFEASIBLE:
        status = (
            SolverStatus.OPTIMAL
            if primal <= tol_primal and dual <= tol_dual
            else SolverStatus.MAX_ITERATIONS
        )
    return SolverReport(
        solution=x,
        status=status,
        primal_residual=primal,
        dual_residual=dual,
        iterations=iterations,
        objective=problem.objective(x),
        ineq_duals=lam,
        eq_duals=nu,
    )


def _is_primal_infeasible(A, l, u, m_i, delta_y, tol: float = 1e-10) -> bool:
    """Farkas-style certificate check on the dual update direction."""
    norm = float(np.abs(delta_y).max(initial=0.0))
    if norm <= tol:
        return False
    d = delta_y / norm
    # Rows without a lower bound admit no negative certificate component.
    if m_i and d[:m_i].min(initial=0.0) < -1e-12:
        return False
    if float(np.abs(A.T @ d).max(initial=0.0)) > 1e-8:
        return False
    pos = np.maximum(d, 0.0)
    neg = np.minimum(d, 0.0)
    support = float(u @ pos + l[m_i:] @ neg[m_i:])
    return support < -1e-8


def _polish(problem, A, u, m_i, x, y, sigma):
    """Re-solve on the detected active set for machine-precision residuals."""
    P = problem.quad_matrix
    q = problem.lin_vector
    m = A.shape[0]
    act_tol = 1e-7
    ax = A @ x
    active = np.zeros(m, dtype=bool)
    active[m_i:] = True
    active[:m_i] = (y[:m_i] > act_tol) | (u[:m_i] - ax[:m_i] < act_tol)
    lam_full = np.maximum(y[:m_i], 0.0)
    nu_full = y[m_i:]
    best = _kkt_quality(problem, A, u, m_i, x, lam_full, nu_full)

    for _ in range(4):
        idx = np.flatnonzero(active)
        Aact = A[idx].toarray()
        k = len(idx)
        kkt = np.zeros((problem.n_vars + k, problem.n_vars + k))
        kkt[: problem.n_vars, : problem.n_vars] = P
        kkt[: problem.n_vars, problem.n_vars :] = Aact.T
        kkt[problem.n_vars :, : problem.n_vars] = Aact
        kkt[problem.n_vars :, problem.n_vars :] = -sigma * np.eye(k)
        rhs = np.concatenate([-q, u[idx]])
        try:
            sol = np.linalg.solve(kkt, rhs)
        except np.linalg.LinAlgError:
            sol, *_ = np.linalg.lstsq(kkt, rhs, rcond=None)
        # One step of iterative refinement against the unregularized system.
        kkt[problem.n_vars :, problem.n_vars :] = 0.0
        resid = rhs - kkt @ sol
        try:
            kkt[problem.n_vars :, problem.n_vars :] = -sigma * np.eye(k)
            sol = sol + np.linalg.solve(kkt, resid)
        except np.linalg.LinAlgError:
            pass
        x_new = sol[: problem.n_vars]
        duals = sol[problem.n_vars :]
        lam_new = np.zeros(m_i)
        ineq_members = idx < m_i
        lam_new[idx[ineq_members]] = duals[ineq_members]
        nu_new = np.zeros(m - m_i)
        nu_new[idx[~ineq_members] - m_i] = duals[~ineq_members]
        if lam_new.size and lam_new.min(initial=0.0) < -1e-9:
            # Wrong guess: drop the rows whose multipliers came out negative.
            drop = np.flatnonzero(lam_new < -1e-9)
            if not active[drop].any():
                break
            active[drop] = False
            continue
        lam_new = np.maximum(lam_new, 0.0)
        quality = _kkt_quality(problem, A, u, m_i, x_new, lam_new, nu_new)
        if quality <= best:
            return x_new, lam_new, nu_new
        # Polish made things worse; widen the active set once, then give up.
        grown = active | ((u - A @ x) < 10 * act_tol) | (y > act_tol / 10)
        grown[m_i:] = True
        if grown.sum() == active.sum():
            break
        active = grown
    return x, lam_full, nu_full


def _kkt_quality(problem, A, u, m_i, x, lam, nu):
    cs = problem.constraints
    ineq_slack = cs.ineq_matrix @ x - cs.ineq_bound
    eq_gap = cs.eq_matrix @ x - cs.eq_bound
    primal = max(
        float(np.maximum(ineq_slack, 0.0).max(initial=0.0)),
        float(np.abs(eq_gap).max(initial=0.0)),
    )
    dual = float(
        np.abs(
            problem.quad_matrix @ x
            + problem.lin_vector
            + cs.ineq_matrix.T @ lam
            + cs.eq_matrix.T @ nu
        ).max(initial=0.0)
    )
    return max(primal, dual)
