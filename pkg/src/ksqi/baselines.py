"""Classic parametric QoE models as configurable functional forms.

Each baseline combines up to three additive terms:

    presentation : none, linear in mean bitrate / QP / VQA score, linear
                   in mean log-bitrate, or an unweighted VQA pass-through
    rebuffering  : linear, logarithmic, or exponential in the total stall
                   time (startup delay included), or a quality-weighted
                   stall sum (penalty scales with the pre-stall quality)
    switching    : none, or (log-)magnitude of track changes on the same
                   signal the presentation term uses

Coefficients are refitted on whatever labelled dataset the caller
supplies; the original papers' constants target other subjective scales
and do not transfer.  Linear-in-parameter forms are solved in closed
form; the exponential stall shape ``alpha * exp(-beta * tau) + gamma`` is
fitted by seeded multi-start nonlinear least squares.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field

import numpy as np
import scipy.linalg
import scipy.optimize

from .errors import (
    MissingFeatureError,
    ParseError,
    RankDeficientError,
    ValidationError,
)
from .session import Dataset, FeatureSummary, Session, session_features

PRESENTATION_TERMS = ("none", "linear_bitrate", "log_bitrate", "linear_qp", "linear_vqa", "vqa_identity")
REBUFFER_TERMS = ("linear", "logarithmic", "exponential", "vqa_weighted")
SWITCHING_TERMS = ("none", "linear", "logarithmic")

REGISTRY_FORMAT_VERSION = 1


@dataclass(frozen=True)
class BaselineSpec:
    name: str
    presentation: str = "none"
    rebuffer: str = "linear"
    switching: str = "none"

    def __post_init__(self):
        if self.presentation not in PRESENTATION_TERMS:
            raise ValidationError(f"unknown presentation term {self.presentation!r}")
        if self.rebuffer not in REBUFFER_TERMS:
            raise ValidationError(f"unknown rebuffer term {self.rebuffer!r}")
        if self.switching not in SWITCHING_TERMS:
            raise ValidationError(f"unknown switching term {self.switching!r}")


DEFAULT_BASELINES = {
    "mok2011": BaselineSpec("mok2011", "none", "linear", "none"),
    "ftw": BaselineSpec("ftw", "none", "exponential", "none"),
    "liu2012": BaselineSpec("liu2012", "linear_bitrate", "linear", "none"),
    "xue2014": BaselineSpec("xue2014", "linear_qp", "logarithmic", "none"),
    "yin2015": BaselineSpec("yin2015", "linear_bitrate", "linear", "linear"),
    "spiteri2016": BaselineSpec("spiteri2016", "log_bitrate", "linear", "logarithmic"),
    "bentaleb2016": BaselineSpec("bentaleb2016", "linear_vqa", "linear", "none"),
    "sqi": BaselineSpec("sqi", "vqa_identity", "vqa_weighted", "none"),
}


def _chunk_signal(spec: BaselineSpec, s: Session) -> list[float]:
    """Per-chunk signal the presentation and switching terms operate on."""
    if spec.presentation in ("linear_bitrate", "log_bitrate"):
        values = [c.bitrate_kbps for c in s.chunks]
        if any(v is None for v in values):
            raise MissingFeatureError(
                f"baseline '{spec.name}' needs per-chunk bitrate_kbps"
            )
    elif spec.presentation == "linear_qp":
        values = [c.qp for c in s.chunks]
        if any(v is None for v in values):
            raise MissingFeatureError(f"baseline '{spec.name}' needs per-chunk qp")
    else:
        values = [c.presentation_quality for c in s.chunks]
    return [float(v) for v in values]


def _total_stall(s: Session, feats: FeatureSummary) -> float:
    return feats.total_rebuffer_seconds + s.initial_buffering


def quality_weighted_stall(s: Session) -> float:
    """Mean per-chunk stall seconds weighted by the pre-stall quality.

    Startup delay is excluded: there is no presentation quality before the
    first frame for the weighting to reference.
    """
    total = 0.0
    for c, chunk in enumerate(s.chunks):
        if chunk.rebuffering_before > 0:
            p_before = s.chunks[c - 1].presentation_quality if c else chunk.presentation_quality
            total += p_before * chunk.rebuffering_before
    return total / len(s.chunks)


def _presentation_feature(spec: BaselineSpec, s: Session, feats: FeatureSummary):
    if spec.presentation in ("none", "vqa_identity"):
        return None
    if spec.presentation == "linear_vqa":
        return feats.mean_quality
    signal = _chunk_signal(spec, s)
    if spec.presentation == "log_bitrate":
        if min(signal) <= 0:
            raise ValidationError("log bitrate needs positive bitrates")
        return float(np.mean(np.log(signal)))
    return float(np.mean(signal))


def _rebuffer_feature(spec: BaselineSpec, s: Session, feats: FeatureSummary) -> float:
    if spec.rebuffer == "vqa_weighted":
        return quality_weighted_stall(s)
    tau = _total_stall(s, feats)
    if spec.rebuffer == "logarithmic":
        return math.log1p(tau)
    return tau  # linear and exponential both consume the raw total


def _switching_feature(spec: BaselineSpec, s: Session):
    if spec.switching == "none":
        return None
    signal = _chunk_signal(spec, s)
    if spec.switching == "logarithmic":
        if min(signal) <= 0:
            raise ValidationError("logarithmic switching needs a positive signal")
        signal = [math.log(v) for v in signal]
    return float(
        sum(abs(signal[t] - signal[t - 1]) for t in range(1, len(signal)))
    )


@dataclass(frozen=True)
class FittedBaseline:
    spec: BaselineSpec
    coefficients: dict[str, float]
    fit_report: dict = field(default_factory=dict)

    def __post_init__(self):
        expected = set(_coefficient_names(self.spec))
        got = set(self.coefficients)
        if got != expected:
            raise ValidationError(
                f"baseline '{self.spec.name}' expects coefficients "
                f"{sorted(expected)}, got {sorted(got)}"
            )


def _coefficient_names(spec: BaselineSpec) -> list[str]:
    names = []
    if spec.rebuffer == "exponential":
        names += ["alpha", "beta", "gamma"]
    else:
        names += ["rebuffer"]
        if spec.presentation != "vqa_identity":
            names.append("intercept")
    if spec.presentation not in ("none", "vqa_identity"):
        names.append("presentation")
    if spec.switching != "none":
        names.append("switching")
    return names


def predict_baseline(
    f: FittedBaseline, s: Session, features: FeatureSummary | None = None
) -> float:
    """Evaluate the fitted functional form on a session."""
    feats = features if features is not None else session_features(s)
    coef = f.coefficients
    spec = f.spec
    score = 0.0
    if spec.presentation == "vqa_identity":
        score += feats.mean_quality
    elif spec.presentation != "none":
        score += coef["presentation"] * _presentation_feature(spec, s, feats)
    tau = _rebuffer_feature(spec, s, feats)
    if spec.rebuffer == "exponential":
        score += coef["alpha"] * math.exp(-coef["beta"] * tau) + coef["gamma"]
    else:
        score += coef["rebuffer"] * tau + coef.get("intercept", 0.0)
    if spec.switching != "none":
        score += coef["switching"] * _switching_feature(spec, s)
    return score


def sqi_baseline(s: Session, coefficient: float = -1.0) -> float:
    """Quality pass-through with a stall penalty scaled by pre-stall quality."""
    feats = session_features(s)
    return feats.mean_quality + coefficient * quality_weighted_stall(s)


def fit_baseline(spec: BaselineSpec, ds: Dataset, seed: int = 0) -> FittedBaseline:
    """Least-squares fit of the baseline's coefficients against session MOS."""
    if not ds.sessions:
        raise ValidationError(f"dataset '{ds.name}' is empty")
    mos = []
    rows = []
    for k, s in enumerate(ds.sessions):
        if s.mos is None:
            raise ValidationError(f"session {k} in dataset '{ds.name}' has no MOS label")
        feats = session_features(s)
        mos.append(s.mos)
        rows.append(
            {
                "presentation": _presentation_feature(spec, s, feats),
                "rebuffer": _rebuffer_feature(spec, s, feats),
                "switching": _switching_feature(spec, s),
                "mean_quality": feats.mean_quality,
            }
        )
    target = np.asarray(mos, dtype=float)

    if spec.rebuffer == "exponential":
        return _fit_exponential(spec, rows, target, seed)

    if spec.presentation == "vqa_identity":
        target = target - np.asarray([r["mean_quality"] for r in rows])
        columns = ["rebuffer"]
    else:
        columns = ["intercept", "rebuffer"]
        if spec.presentation != "none":
            columns.append("presentation")
    if spec.switching != "none":
        columns.append("switching")

    design = np.column_stack(
        [
            np.ones(len(rows)) if name == "intercept" else [r[name] for r in rows]
            for name in columns
        ]
    )
    _check_rank(design, columns, spec.name)
    coef, *_ = np.linalg.lstsq(design, target, rcond=None)
    residuals = design @ coef - target
    named = {name: float(v) for name, v in zip(columns, coef)}
    return FittedBaseline(
        spec,
        named,
        fit_report={"mse": float(residuals @ residuals / len(target)), "n": len(target), "seed": seed},
    )


def _check_rank(design: np.ndarray, columns: list[str], name: str):
    if np.linalg.matrix_rank(design) < design.shape[1]:
        _, r, piv = scipy.linalg.qr(design, mode="economic", pivoting=True)
        diag = np.abs(np.diag(r))
        cutoff = diag.max() * max(design.shape) * np.finfo(float).eps if diag.size else 0.0
        bad = [columns[piv[i]] for i in range(len(columns)) if i >= len(diag) or diag[i] <= cutoff]
        raise RankDeficientError(
            f"design matrix for baseline '{name}' is rank deficient "
            f"(offending columns: {bad})",
            columns=bad,
        )


def _fit_exponential(spec: BaselineSpec, rows, target, seed: int) -> FittedBaseline:
    tau = np.asarray([r["rebuffer"] for r in rows], dtype=float)
    pres = (
        np.asarray([r["presentation"] for r in rows], dtype=float)
        if spec.presentation not in ("none", "vqa_identity")
        else None
    )
    switch = (
        np.asarray([r["switching"] for r in rows], dtype=float)
        if spec.switching != "none"
        else None
    )
    offset = (
        np.asarray([r["mean_quality"] for r in rows], dtype=float)
        if spec.presentation == "vqa_identity"
        else 0.0
    )
    y = target - offset

    names = ["alpha", "beta", "gamma"]
    extras = []
    if pres is not None:
        names.append("presentation")
        extras.append(pres)
    if switch is not None:
        names.append("switching")
        extras.append(switch)

    def residuals(params):
        alpha, beta, gamma = params[:3]
        pred = alpha * np.exp(-np.clip(beta * tau, -500, 500)) + gamma
        for coef, column in zip(params[3:], extras):
            pred = pred + coef * column
        return pred - y

    rng = np.random.default_rng(seed)
    span = float(y.max() - y.min()) or 1.0
    base = [span, 0.2, float(y.min())] + [0.0] * len(extras)
    starts = [base]
    for beta0 in (0.02, 0.08, 0.5, 1.5):
        starts.append([span, beta0, float(y.min())] + [0.0] * len(extras))
    for _ in range(4):
        starts.append(
            [span * rng.uniform(0.2, 2.0), rng.uniform(0.01, 2.0), float(y.min()) + span * rng.uniform(-0.5, 0.5)]
            + [0.0] * len(extras)
        )

    best = None
    for x0 in starts:
        try:
            res = scipy.optimize.least_squares(residuals, x0, method="lm", max_nfev=5000)
        except Exception:
            continue
        if not np.all(np.isfinite(res.x)):
            continue
        if best is None or res.cost < best.cost:
            best = res
    if best is None:
        raise ValidationError(f"exponential fit failed for baseline '{spec.name}'")
    named = {name: float(v) for name, v in zip(names, best.x)}
    mse = float(2.0 * best.cost / len(y))
    return FittedBaseline(spec, named, fit_report={"mse": mse, "n": len(y), "seed": seed})


# ---------------------------------------------------------------------------
# Registry documents
# ---------------------------------------------------------------------------


def serialize_registry(baselines) -> str:
    doc = {
        "format_version": REGISTRY_FORMAT_VERSION,
        "baselines": [
            {
                "name": fb.spec.name,
                "presentation": fb.spec.presentation,
                "rebuffer": fb.spec.rebuffer,
                "switching": fb.spec.switching,
                "coefficients": fb.coefficients,
                "fit_report": fb.fit_report,
            }
            for fb in baselines
        ],
    }
    return json.dumps(doc, sort_keys=True, indent=2)


def deserialize_registry(text: str) -> list[FittedBaseline]:
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ParseError(f"registry is not valid JSON: {exc}") from exc
    if not isinstance(doc, dict) or doc.get("format_version") != REGISTRY_FORMAT_VERSION:
        raise ValidationError("unsupported baseline registry format")
    out = []
    for entry in doc.get("baselines", []):
        spec = BaselineSpec(
            name=entry["name"],
            presentation=entry["presentation"],
            rebuffer=entry["rebuffer"],
            switching=entry["switching"],
        )
        out.append(
            FittedBaseline(
                spec,
                {k: float(v) for k, v in entry["coefficients"].items()},
                entry.get("fit_report", {}),
            )
        )
    return out
