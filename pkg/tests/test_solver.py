import io

import numpy as np
import pytest
import scipy.sparse as sp

from ksqi.errors import ValidationError
from ksqi.grid import ConstraintSystem
from ksqi.solver import QpProblem, SolverStatus, kkt_residuals, solve_qp


def system(G, h, B, c, n):
    G = np.asarray(G, dtype=float).reshape(len(h), n)
    B = np.asarray(B, dtype=float).reshape(len(c), n)
    return ConstraintSystem(
        sp.csr_matrix(G),
        np.asarray(h, dtype=float),
        sp.csr_matrix(B),
        np.asarray(c, dtype=float),
        tuple(f"g{r}" for r in range(len(h))),
        tuple(f"b{r}" for r in range(len(c))),
    )


def least_squares_problem(target, G=None, h=None, B=None, c=None):
    """minimize ||x - target||^2 under the given rows."""
    n = len(target)
    G = np.zeros((0, n)) if G is None else G
    h = [] if h is None else h
    B = np.zeros((0, n)) if B is None else B
    c = [] if c is None else c
    return QpProblem(2 * np.eye(n), -2 * np.asarray(target, dtype=float), system(G, h, B, c, n))


def pav_increasing(y):
    """Pool-adjacent-violators for the nondecreasing least-squares fit."""
    blocks = [[v] for v in y]
    means = [float(v) for v in y]
    i = 0
    while i < len(blocks) - 1:
        if means[i] > means[i + 1] + 1e-15:
            merged = blocks[i] + blocks[i + 1]
            blocks[i : i + 2] = [merged]
            means[i : i + 2] = [sum(merged) / len(merged)]
            i = max(i - 1, 0)
        else:
            i += 1
    out = []
    for block, mean in zip(blocks, means):
        out.extend([mean] * len(block))
    return np.asarray(out)


def test_active_bound():
    p = least_squares_problem([1.0], G=[[1.0]], h=[0.0])
    rep = solve_qp(p)
    assert rep.status is SolverStatus.OPTIMAL
    assert rep.solution[0] == pytest.approx(0.0, abs=1e-8)
    assert rep.ineq_duals[0] == pytest.approx(2.0, abs=1e-7)


def test_projection_onto_line():
    p = least_squares_problem([1.0, 2.0], B=[[1.0, -1.0]], c=[0.0])
    rep = solve_qp(p)
    assert rep.status is SolverStatus.OPTIMAL
    assert rep.solution == pytest.approx([1.5, 1.5], abs=1e-8)


def test_isotonic_matches_pav():
    # Monotone nondecreasing fit of (1, 3, 2); PAV pools the last two.
    y = [1.0, 3.0, 2.0]
    G = [[1.0, -1.0, 0.0], [0.0, 1.0, -1.0]]
    p = least_squares_problem(y, G=G, h=[0.0, 0.0])
    rep = solve_qp(p, tol_primal=1e-10, tol_dual=1e-10)
    assert rep.status is SolverStatus.OPTIMAL
    assert rep.solution == pytest.approx([1.0, 2.5, 2.5], abs=1e-8)
    assert rep.solution == pytest.approx(pav_increasing(y), abs=1e-8)


@pytest.mark.parametrize("seed", range(6))
def test_isotonic_random_instances_match_pav(seed):
    rng = np.random.default_rng(seed)
    n = int(rng.integers(3, 9))
    y = rng.normal(0, 2, size=n)
    G = np.zeros((n - 1, n))
    for r in range(n - 1):
        G[r, r] = 1.0
        G[r, r + 1] = -1.0
    p = least_squares_problem(y, G=G, h=np.zeros(n - 1))
    rep = solve_qp(p, tol_primal=1e-10, tol_dual=1e-10)
    assert rep.status is SolverStatus.OPTIMAL
    assert np.abs(rep.solution - pav_increasing(y)).max() < 1e-6


def test_kkt_residuals_hand_solution():
    p = least_squares_problem([1.0], G=[[1.0]], h=[0.0])
    res = kkt_residuals(p, np.array([0.0]), np.array([2.0]), np.zeros(0))
    assert res == (0.0, 0.0, 0.0)


def test_kkt_feasible_but_suboptimal():
    p = least_squares_problem([1.0], G=[[1.0]], h=[0.0])
    res = kkt_residuals(p, np.array([-1.0]), np.array([0.0]), np.zeros(0))
    assert res.primal == 0.0
    assert res.dual > 0.0


def test_kkt_infeasible_point():
    p = least_squares_problem([1.0], G=[[1.0]], h=[0.0])
    res = kkt_residuals(p, np.array([0.5]), np.array([0.0]), np.zeros(0))
    assert res.primal == pytest.approx(0.5)


def test_kkt_rejects_negative_dual():
    p = least_squares_problem([1.0], G=[[1.0]], h=[0.0])
    with pytest.raises(ValidationError, match="nonnegative"):
        kkt_residuals(p, np.array([0.0]), np.array([-1.0]), np.zeros(0))


def test_quad_matrix_must_be_symmetric():
    cs = system(np.zeros((0, 2)), [], np.zeros((0, 2)), [], 2)
    with pytest.raises(ValidationError, match="symmetric"):
        QpProblem(np.array([[1.0, 0.5], [0.0, 1.0]]), np.zeros(2), cs)


def test_objective_never_beats_feasible_zero():
    # Training-problem shape: zero is feasible, so the optimum cannot be worse.
    rng = np.random.default_rng(5)
    for _ in range(5):
        n = 6
        W = rng.normal(size=(4, n))
        quad = 2 * (W.T @ W / 4 + 1e-3 * np.eye(n))
        lin = rng.normal(size=n)
        G = np.vstack([np.eye(n), -np.eye(n)])
        h = np.ones(2 * n)
        p = QpProblem(quad, lin, system(G, h, np.zeros((0, n)), [], n))
        rep = solve_qp(p)
        assert rep.status is SolverStatus.OPTIMAL
        assert rep.objective <= p.objective(np.zeros(n)) + 1e-9


def test_over_relaxation_does_not_change_solution():
    rng = np.random.default_rng(11)
    n = 5
    Q = rng.normal(size=(n, n))
    quad = Q @ Q.T + np.eye(n)
    quad = (quad + quad.T) / 2
    lin = rng.normal(size=n)
    G = np.vstack([np.eye(n), -np.eye(n)])
    h = np.ones(2 * n) * 0.7
    p = QpProblem(quad, lin, system(G, h, np.zeros((0, n)), [], n))
    a = solve_qp(p, tol_primal=1e-9, tol_dual=1e-9, over_relaxation=1.6)
    b = solve_qp(p, tol_primal=1e-9, tol_dual=1e-9, over_relaxation=1.0)
    assert a.status is SolverStatus.OPTIMAL and b.status is SolverStatus.OPTIMAL
    assert np.abs(a.solution - b.solution).max() < 1e-8


def test_objective_scaling_leaves_argmin():
    rng = np.random.default_rng(12)
    n = 4
    quad = np.diag(rng.uniform(1, 3, n)) * 2
    lin = rng.normal(size=n)
    G = np.eye(n)
    h = np.full(n, 0.1)
    base = QpProblem(quad, lin, system(G, h, np.zeros((0, n)), [], n))
    ref = solve_qp(base, tol_primal=1e-10, tol_dual=1e-10)
    for scale in (0.5, 10.0, 250.0):
        scaled = QpProblem(scale * quad, scale * lin, base.constraints)
        rep = solve_qp(scaled, tol_primal=1e-10, tol_dual=1e-10)
        assert rep.status is SolverStatus.OPTIMAL
        assert np.abs(rep.solution - ref.solution).max() < 1e-7


def test_detects_primal_infeasibility():
    # x <= -1 and -x <= -1 cannot hold together
    p = least_squares_problem([0.0], G=[[1.0], [-1.0]], h=[-1.0, -1.0])
    rep = solve_qp(p, max_iter=50_000)
    assert rep.status is SolverStatus.INFEASIBLE


def test_max_iterations_carries_best_iterate():
    # Tolerances below float noise cannot be met; the report must still
    # carry the best iterate and its residuals.
    p = least_squares_problem([1.0, 2.0], B=[[1.0, -1.0]], c=[0.0])
    rep = solve_qp(p, tol_primal=1e-300, tol_dual=1e-300, max_iter=200)
    assert rep.status is SolverStatus.MAX_ITERATIONS
    assert rep.solution == pytest.approx([1.5, 1.5], abs=1e-6)
    assert np.isfinite(rep.primal_residual) and np.isfinite(rep.dual_residual)


def test_unconstrained_problem():
    cs = system(np.zeros((0, 2)), [], np.zeros((0, 2)), [], 2)
    p = QpProblem(2 * np.eye(2), np.array([-2.0, -4.0]), cs)
    rep = solve_qp(p)
    assert rep.status is SolverStatus.OPTIMAL
    assert rep.solution == pytest.approx([1.0, 2.0])


def test_trace_stream_records_progress():
    buf = io.StringIO()
    p = least_squares_problem([1.0, 2.0], B=[[1.0, -1.0]], c=[0.0])
    solve_qp(p, trace=buf)
    lines = buf.getvalue().splitlines()
    assert lines[0] == "iteration,objective,primal_residual,dual_residual"
    assert len(lines) >= 2


def test_training_qp_beats_sampled_feasible_grids():
    # 3x3 grid training problem: any feasible grid bounds the optimum from
    # above, so the solver must not exceed the best of 100k sampled ones.
    from synthetic import full_coverage_training_set
    from ksqi.grid import GridSpec
    from ksqi.training import assemble_rebuffering_objective

    spec = GridSpec(2, 100.0, 10.0)
    ts = full_coverage_training_set(spec, noise_sigma=2.0, seed=31)
    problem = assemble_rebuffering_objective(ts, spec, 0.1)
    rep = solve_qp(problem, tol_primal=1e-10, tol_dual=1e-10)
    assert rep.status is SolverStatus.OPTIMAL

    rng = np.random.default_rng(8)
    taus = np.array([spec.rebuffer_at(j + 1) for j in range(3)])
    ps = np.array([spec.quality_at(i + 1) for i in range(3)])
    a = rng.uniform(0, 1.5, size=100_000)
    b = rng.uniform(0, 1.5, size=100_000)
    # feasible family: -tau * (a + b p / (2P)) sampled on the grid
    grids = -(taus[None, None, :] * (a[:, None, None] + b[:, None, None] * ps[None, :, None] / 200.0))
    vecs = grids.reshape(len(a), -1)
    values = 0.5 * np.einsum("ij,jk,ik->i", vecs, problem.quad_matrix, vecs) + vecs @ problem.lin_vector
    assert rep.objective <= float(values.min()) + 1e-6


def test_sampled_lower_bound_on_box_instances():
    rng = np.random.default_rng(21)
    for _ in range(5):
        n = int(rng.integers(2, 10))
        Q = rng.normal(size=(n, n))
        quad = Q @ Q.T + 0.5 * np.eye(n)
        quad = (quad + quad.T) / 2
        lin = 3 * rng.normal(size=n)
        lo = rng.uniform(-2, 0, n)
        hi = rng.uniform(0.1, 2, n)
        G = np.vstack([np.eye(n), -np.eye(n)])
        h = np.concatenate([hi, -lo])
        p = QpProblem(quad, lin, system(G, h, np.zeros((0, n)), [], n))
        rep = solve_qp(p, tol_primal=1e-10, tol_dual=1e-10)
        assert rep.status is SolverStatus.OPTIMAL
        samples = rng.uniform(lo, hi, size=(100_000, n))
        values = 0.5 * np.einsum("ij,jk,ik->i", samples, quad, samples) + samples @ lin
        assert rep.objective <= values.min() + 1e-6
