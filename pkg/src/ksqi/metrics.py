"""Evaluation criteria: correlation metrics, the standard nonlinear mapping,
MOS rescaling, and the variance-ratio significance matrix.

PLCC measures prediction accuracy after a four-parameter monotone logistic
is regressed from objective scores onto MOS (the usual benchmarking
protocol); SRCC and KRCC measure monotonicity on the raw scores.  Model
pairs are compared by a two-sided F-test on the variance of their
post-mapping residuals, which assumes enough samples (>= 50) for the
residuals to be treated as Gaussian.
"""

from __future__ import annotations

import io
from dataclasses import dataclass

import numpy as np
import scipy.optimize
import scipy.stats

from .errors import UndefinedCorrelationError, ValidationError
from .session import Dataset, with_mos

BETTER = "better"
WORSE = "worse"
INDISTINGUISHABLE = "-"

_SYMBOL = {BETTER: "1", WORSE: "0", INDISTINGUISHABLE: "-"}


def _pair(x, y) -> tuple[np.ndarray, np.ndarray]:
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    if x.shape != y.shape or x.ndim != 1:
        raise ValidationError("inputs must be 1-D vectors of equal length")
    if len(x) < 3:
        raise ValidationError("correlations need at least 3 points")
    return x, y


def plcc(x, y) -> float:
    """Pearson linear correlation coefficient."""
    x, y = _pair(x, y)
    xc = x - x.mean()
    yc = y - y.mean()
    denom = np.sqrt((xc @ xc) * (yc @ yc))
    if denom == 0:
        raise UndefinedCorrelationError("PLCC undefined for constant input")
    return float(xc @ yc / denom)


def srcc(x, y) -> float:
    """Spearman rank-order correlation; ties get average ranks."""
    x, y = _pair(x, y)
    rx = scipy.stats.rankdata(x, method="average")
    ry = scipy.stats.rankdata(y, method="average")
    try:
        return plcc(rx, ry)
    except UndefinedCorrelationError:
        raise UndefinedCorrelationError("SRCC undefined for constant input") from None


def krcc(x, y) -> float:
    """Kendall rank correlation, tie-adjusted (tau-b)."""
    x, y = _pair(x, y)
    tau = scipy.stats.kendalltau(x, y, variant="b").statistic
    if not np.isfinite(tau):
        raise UndefinedCorrelationError("KRCC undefined for constant input")
    return float(tau)


# ---------------------------------------------------------------------------
# Nonlinear mapping onto the subjective scale
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class VqegFit:
    mapped: np.ndarray
    params: tuple[float, float, float, float] | None
    linear_fallback: bool


def _logistic4(x, b1, b2, b3, b4):
    t = np.clip((x - b3) / b4, -500.0, 500.0)
    return b2 + (b1 - b2) / (1.0 + np.exp(-t))


def vqeg_map(objective, mos, seed: int = 0) -> VqegFit:
    """Regress a 4-parameter monotone logistic from objective scores to MOS.

    The curve may be orientation-flipping (negative slope parameter), so
    anti-correlated scores still map onto the subjective scale.  When the
    nonlinear fit fails, a linear map is fitted instead and flagged.
    """
    objective = np.asarray(objective, dtype=float)
    mos = np.asarray(mos, dtype=float)
    if objective.shape != mos.shape or objective.ndim != 1:
        raise ValidationError("inputs must be 1-D vectors of equal length")
    if len(objective) < 5:
        raise ValidationError("the nonlinear mapping needs at least 5 points")

    spread = float(objective.max() - objective.min())
    mos_hi, mos_lo = float(mos.max()), float(mos.min())
    orient = 1.0
    if np.std(objective) > 0 and np.std(mos) > 0:
        orient = float(np.sign(np.corrcoef(objective, mos)[0, 1]) or 1.0)

    def residuals(params):
        return _logistic4(objective, *params) - mos

    rng = np.random.default_rng(seed)
    b3_0 = float(np.median(objective))
    b4_0 = orient * max(spread / 8.0, 1e-6)
    starts = [
        (mos_hi, mos_lo, b3_0, b4_0),
        (mos_hi, mos_lo, b3_0, 4.0 * b4_0),
        (mos_hi, mos_lo, b3_0, -b4_0),
    ]
    for _ in range(3):
        starts.append(
            (
                mos_hi + rng.normal(0, 1 + abs(mos_hi) * 0.1),
                mos_lo + rng.normal(0, 1 + abs(mos_lo) * 0.1),
                b3_0 + rng.normal(0, max(spread, 1e-6) / 4),
                b4_0 * rng.uniform(0.25, 4.0),
            )
        )

    best = None
    for x0 in starts:
        try:
            result = scipy.optimize.least_squares(residuals, x0, method="lm", max_nfev=2000)
        except Exception:
            continue
        if not np.all(np.isfinite(result.x)) or not np.isfinite(result.cost):
            continue
        if best is None or result.cost < best.cost:
            best = result
    if best is not None:
        params = tuple(float(v) for v in best.x)
        return VqegFit(_logistic4(objective, *params), params, False)

    design = np.column_stack([objective, np.ones_like(objective)])
    coef, *_ = np.linalg.lstsq(design, mos, rcond=None)
    return VqegFit(design @ coef, None, True)


def rescale_mos(ds: Dataset, target: tuple[float, float] = (0.0, 100.0)) -> Dataset:
    """Map every MOS affinely from the dataset's declared scale to ``target``."""
    low, high = ds.mos_scale
    if high == low:
        raise ValidationError(f"degenerate mos_scale {ds.mos_scale} in '{ds.name}'")
    t_low, t_high = target
    gain = (t_high - t_low) / (high - low)
    sessions = tuple(
        s if s.mos is None else with_mos(s, t_low + (s.mos - low) * gain)
        for s in ds.sessions
    )
    return Dataset(name=ds.name, sessions=sessions, mos_scale=(t_low, t_high))


# ---------------------------------------------------------------------------
# Significance testing
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class SignificanceResult:
    labels: tuple[str, ...]
    decisions: tuple[tuple[str, ...], ...]

    def symbol_table(self) -> list[list[str]]:
        return [[_SYMBOL[cell] for cell in row] for row in self.decisions]

    def to_csv(self) -> str:
        buf = io.StringIO()
        buf.write("," + ",".join(self.labels) + "\n")
        for label, row in zip(self.labels, self.symbol_table()):
            buf.write(label + "," + ",".join(row) + "\n")
        return buf.getvalue()


def significance_matrix(residuals, confidence: float = 0.95) -> SignificanceResult:
    """Pairwise two-sided F-tests on residual variances.

    ``residuals`` maps model names to residual vectors (all of length
    >= 50, per the Gaussian approximation this test leans on).  Cell (i, j)
    says whether model i's residual variance is significantly lower
    (``better``), higher (``worse``), or indistinguishable at the given
    confidence.
    """
    if isinstance(residuals, dict):
        items = list(residuals.items())
    else:
        items = list(residuals)
    if not 0 < confidence < 1:
        raise ValidationError("confidence must lie in (0, 1)")
    labels = tuple(name for name, _ in items)
    vectors = [np.asarray(v, dtype=float) for _, v in items]
    for name, v in zip(labels, vectors):
        if v.ndim != 1 or len(v) < 50:
            raise ValidationError(
                f"residual vector for '{name}' has {len(v)} samples; the "
                "variance-ratio test needs at least 50 for its Gaussian assumption"
            )
    variances = [float(np.var(v, ddof=1)) for v in vectors]
    dofs = [len(v) - 1 for v in vectors]
    alpha = 1.0 - confidence

    k = len(labels)
    cells = [[INDISTINGUISHABLE] * k for _ in range(k)]
    for i in range(k):
        for j in range(i + 1, k):
            ratio = variances[i] / variances[j] if variances[j] > 0 else np.inf
            lo = scipy.stats.f.ppf(alpha / 2, dofs[i], dofs[j])
            hi = scipy.stats.f.ppf(1 - alpha / 2, dofs[i], dofs[j])
            if variances[i] == variances[j]:
                decision = INDISTINGUISHABLE
            elif ratio < lo:
                decision = BETTER
            elif ratio > hi:
                decision = WORSE
            else:
                decision = INDISTINGUISHABLE
            cells[i][j] = decision
            cells[j][i] = {BETTER: WORSE, WORSE: BETTER, INDISTINGUISHABLE: INDISTINGUISHABLE}[decision]
    return SignificanceResult(labels, tuple(tuple(row) for row in cells))


# ---------------------------------------------------------------------------
# Benchmark report assembly
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class DatasetEval:
    """One model evaluated on one dataset."""

    n: int
    plcc: float
    srcc: float
    krcc: float
    residuals: np.ndarray
    vqeg_fallback: bool


def evaluate_scores(objective, mos, seed: int = 0) -> DatasetEval:
    """Standard per-dataset evaluation: map, correlate, keep residuals."""
    objective = np.asarray(objective, dtype=float)
    mos = np.asarray(mos, dtype=float)
    fit = vqeg_map(objective, mos, seed)
    return DatasetEval(
        n=len(mos),
        plcc=plcc(fit.mapped, mos),
        srcc=srcc(objective, mos),
        krcc=krcc(objective, mos),
        residuals=mos - fit.mapped,
        vqeg_fallback=fit.linear_fallback,
    )


@dataclass(frozen=True)
class EvaluationReport:
    models: tuple[str, ...]
    datasets: tuple[str, ...]
    results: dict

    METRICS = ("plcc", "srcc", "krcc")

    def metric_rows(self, metric: str) -> list[tuple[str, list[float], float, float]]:
        """Per model: per-dataset values, plain average, count-weighted average."""
        if metric not in self.METRICS:
            raise ValidationError(f"unknown metric {metric!r}")
        rows = []
        for model in self.models:
            values, weights = [], []
            for ds in self.datasets:
                cell = self.results[(model, ds)]
                values.append(getattr(cell, metric))
                weights.append(cell.n)
            avg = float(np.mean(values))
            weighted = float(np.average(values, weights=weights))
            rows.append((model, values, avg, weighted))
        return rows

    def to_csv(self, metric: str) -> str:
        buf = io.StringIO()
        buf.write("model," + ",".join(self.datasets) + ",average,weighted_average\n")
        for model, values, avg, weighted in self.metric_rows(metric):
            cells = ",".join(f"{v:.6f}" for v in values)
            buf.write(f"{model},{cells},{avg:.6f},{weighted:.6f}\n")
        return buf.getvalue()

    def pooled_residuals(self, model: str) -> np.ndarray:
        return np.concatenate(
            [self.results[(model, ds)].residuals for ds in self.datasets]
        )

    def significance(self, confidence: float = 0.95) -> SignificanceResult:
        return significance_matrix(
            {m: self.pooled_residuals(m) for m in self.models}, confidence
        )


def build_report(scores, mos_by_dataset, seed: int = 0) -> EvaluationReport:
    """Assemble the full report.

    ``scores`` maps (model, dataset) to objective score vectors and
    ``mos_by_dataset`` maps dataset names to the shared MOS vectors.
    """
    models = tuple(dict.fromkeys(model for model, _ in scores))
    datasets = tuple(dict.fromkeys(ds for _, ds in scores))
    results = {}
    for (model, ds), objective in scores.items():
        results[(model, ds)] = evaluate_scores(objective, mos_by_dataset[ds], seed)
    for model in models:
        for ds in datasets:
            if (model, ds) not in results:
                raise ValidationError(f"missing scores for model {model!r} on {ds!r}")
    return EvaluationReport(models, datasets, results)
