"""Global ranking scores from pairwise-comparison preference matrices.

Win probabilities r_ij are aggregated into latent quality scores mu by
maximizing   sum_ij r_ij log Phi(mu_i - mu_j)   over the zero-sum
hyperplane (Phi = standard normal CDF), the Thurstonian maximum-likelihood
scaling for multiple options.  The likelihood is concave on that subspace,
so projected gradient ascent with a backtracking line search suffices.

Empirical probabilities of exactly 0 or 1 make the likelihood unbounded;
they are clipped to [1/(2n), 1 - 1/(2n)] using the pair's trial count n
before optimizing, and the clipping is reported in the result.
"""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass

import numpy as np
import scipy.stats

from .errors import SolverFailure, ValidationError


@dataclass(frozen=True)
class PairwiseMatrix:
    """Empirical win probabilities plus trial counts between K options."""

    probabilities: np.ndarray
    counts: np.ndarray
    labels: tuple[str, ...] = ()

    def __post_init__(self):
        r = np.asarray(self.probabilities, dtype=float)
        n = np.asarray(self.counts, dtype=int)
        if r.ndim != 2 or r.shape[0] != r.shape[1]:
            raise ValidationError("probability matrix must be square")
        if n.shape != r.shape:
            raise ValidationError("counts must match the probability matrix shape")
        k = r.shape[0]
        labels = tuple(self.labels) if self.labels else tuple(
            f"model_{i}" for i in range(k)
        )
        if len(labels) != k:
            raise ValidationError("label count must match the matrix size")
        observed = n > 0
        np.fill_diagonal(observed, False)
        if ((r < 0) | (r > 1))[observed].any():
            raise ValidationError("probabilities must lie in [0, 1]")
        if not np.array_equal(n, n.T):
            raise ValidationError("trial counts must be symmetric")
        both = observed & observed.T
        if np.abs((r + r.T - 1.0))[both].max(initial=0.0) > 1e-9:
            raise ValidationError("r_ij + r_ji must equal 1 where both observed")
        object.__setattr__(self, "probabilities", r)
        object.__setattr__(self, "counts", n)
        object.__setattr__(self, "labels", labels)

    @property
    def size(self) -> int:
        return self.probabilities.shape[0]

    @classmethod
    def from_records(cls, records, labels=None) -> "PairwiseMatrix":
        """Build from (label_i, label_j, wins_i, trials) records."""
        if labels is None:
            seen: list[str] = []
            for a, b, _, _ in records:
                for name in (a, b):
                    if name not in seen:
                        seen.append(name)
            labels = seen
        index = {name: k for k, name in enumerate(labels)}
        k = len(labels)
        r = np.full((k, k), 0.5)
        n = np.zeros((k, k), dtype=int)
        for a, b, wins, trials in records:
            if a not in index or b not in index:
                raise ValidationError(f"unknown model in record ({a}, {b})")
            if trials <= 0 or wins < 0 or wins > trials:
                raise ValidationError(
                    f"record ({a}, {b}) needs 0 <= wins <= trials, trials > 0"
                )
            i, j = index[a], index[b]
            r[i, j] = wins / trials
            r[j, i] = 1.0 - wins / trials
            n[i, j] = n[j, i] = trials
        return cls(r, n, tuple(labels))


@dataclass(frozen=True)
class RankingResult:
    mu: np.ndarray
    log_likelihood: float
    labels: tuple[str, ...] = ()
    clipped_pairs: int = 0

    def order(self) -> list[int]:
        """Indices sorted from best to worst score."""
        return list(np.argsort(-self.mu, kind="stable"))


def _components(observed: np.ndarray) -> list[list[int]]:
    k = observed.shape[0]
    seen = [False] * k
    comps = []
    for start in range(k):
        if seen[start]:
            continue
        stack, comp = [start], []
        seen[start] = True
        while stack:
            v = stack.pop()
            comp.append(v)
            for w in range(k):
                if not seen[w] and (observed[v, w] or observed[w, v]):
                    seen[w] = True
                    stack.append(w)
        comps.append(sorted(comp))
    return comps


def mle_ranking(pm: PairwiseMatrix, tol: float = 1e-9, max_iter: int = 50_000) -> RankingResult:
    """Maximize the normal-CDF log-likelihood over the zero-sum subspace."""
    k = pm.size
    observed = pm.counts > 0
    np.fill_diagonal(observed, False)
    comps = _components(observed)
    if len(comps) > 1 and k > 1:
        raise ValidationError(
            f"comparison graph is disconnected; components: {comps}"
        )

    r = pm.probabilities.copy()
    clipped = 0
    for i in range(k):
        for j in range(k):
            if i != j and observed[i, j]:
                bound = 1.0 / (2.0 * pm.counts[i, j])
                clamped = min(max(r[i, j], bound), 1.0 - bound)
                if clamped != r[i, j]:
                    clipped += 1
                    r[i, j] = clamped

    mask = observed.astype(float)

    def loglik(mu):
        diff = mu[:, None] - mu[None, :]
        return float(np.sum(mask * r * scipy.stats.norm.logcdf(diff)))

    def hazard(diff):
        # pdf(x) / cdf(x), kept in the log domain for stability
        return np.exp(scipy.stats.norm.logpdf(diff) - scipy.stats.norm.logcdf(diff))

    def projected_gradient(mu):
        weighted = mask * r * hazard(mu[:, None] - mu[None, :])
        g = weighted.sum(axis=1) - weighted.sum(axis=0)
        return g - g.mean()

    def ascent_direction(mu, g):
        # Newton step on the zero-sum subspace; the likelihood is concave,
        # so the negated Hessian plus a ridge is positive definite there.
        diff = mu[:, None] - mu[None, :]
        hz = hazard(diff)
        curv = mask * r * hz * (diff + hz)  # -d2/dx2 log cdf, pairwise
        w = curv + curv.T
        H = np.diag(w.sum(axis=1)) - w
        scale = max(float(np.trace(H)) / k, 1e-12)
        M = H + scale * 1e-10 * np.eye(k) + scale * np.ones((k, k)) / k
        try:
            p = np.linalg.solve(M, g)
        except np.linalg.LinAlgError:
            return g
        p = p - p.mean()
        return p if float(p @ g) > 0 else g

    mu = np.zeros(k)
    value = loglik(mu)
    for _ in range(max_iter):
        g = projected_gradient(mu)
        if float(np.abs(g).max(initial=0.0)) <= tol:
            break
        improved = False
        for direction in (ascent_direction(mu, g), g):
            slope = float(direction @ g)
            if slope <= 0:
                continue
            step = 1.0
            while step > 1e-16:
                candidate = mu + step * direction
                candidate -= candidate.mean()
                cand_value = loglik(candidate)
                # Accepted steps never decrease the concave objective.
                if cand_value >= value + 1e-4 * step * slope:
                    mu, value, improved = candidate, cand_value, True
                    break
                step *= 0.5
            if improved:
                break
        if not improved:
            break
    else:
        raise SolverFailure(
            f"ranking optimization did not reach gradient tolerance {tol:g}"
        )
    g = projected_gradient(mu)
    if float(np.abs(g).max(initial=0.0)) > tol:
        raise SolverFailure(
            f"ranking optimization stalled at gradient norm {np.abs(g).max():.3g}"
        )
    mu = mu - mu.mean()
    return RankingResult(mu, loglik(mu), pm.labels, clipped)


def preference_probability(rr: RankingResult) -> np.ndarray:
    """Model-implied win probabilities Phi(mu_i - mu_j)."""
    diff = rr.mu[:, None] - rr.mu[None, :]
    return scipy.stats.norm.cdf(diff)


# ---------------------------------------------------------------------------
# CSV interfaces
# ---------------------------------------------------------------------------


def read_comparison_csv(text: str) -> PairwiseMatrix:
    """Parse ``model_i,model_j,wins_i,trials`` rows (header optional)."""
    records = []
    reader = csv.reader(io.StringIO(text))
    for row in reader:
        if not row or not any(cell.strip() for cell in row):
            continue
        if row[0].strip().lower() in ("model_i", "model"):
            continue
        if len(row) != 4:
            raise ValidationError(f"expected 4 columns, got {row!r}")
        a, b, wins, trials = (cell.strip() for cell in row)
        records.append((a, b, int(wins), int(trials)))
    if not records:
        raise ValidationError("no comparison records found")
    return PairwiseMatrix.from_records(records)


def ranking_to_csv(rr: RankingResult) -> str:
    buf = io.StringIO()
    buf.write("rank,model,mu\n")
    for rank, idx in enumerate(rr.order(), start=1):
        buf.write(f"{rank},{rr.labels[idx]},{rr.mu[idx]:.10f}\n")
    return buf.getvalue()
