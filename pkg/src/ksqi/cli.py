"""Command-line entry point.

Subcommands: train, predict, evaluate, fit-baselines, synthesize, rank.
Every command is reproducible for fixed inputs and --seed, never mutates
its inputs, and writes only to the configured output paths.  Exit codes:
0 success, 2 input/validation problems, 3 computation failures.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np

from . import baselines as bl
from . import metrics, prediction, ranking, synthesis, training
from .errors import (
    FeasibilityError,
    KsqiError,
    MissingFeatureError,
    ParseError,
    RankDeficientError,
    SolverFailure,
    TraceExhaustedError,
    UndefinedCorrelationError,
    ValidationError,
)
from .grid import A_CONSTRAINTS, S_CONSTRAINTS, GridSpec
from .session import Dataset, parse_dataset, parse_session_log, serialize_session, session_to_doc

_VALIDATION_ERRORS = (
    ValidationError,
    ParseError,
    MissingFeatureError,
    RankDeficientError,
    UndefinedCorrelationError,
    FileNotFoundError,
    IsADirectoryError,
)
_COMPUTATION_ERRORS = (SolverFailure, FeasibilityError, TraceExhaustedError)


def _read(path: str) -> str:
    return Path(path).read_text(encoding="utf-8")


def _write(path: str, text: str):
    out = Path(path)
    out.parent.mkdir(parents=True, exist_ok=True)
    out.write_text(text, encoding="utf-8")


def _dump(doc) -> str:
    return json.dumps(doc, sort_keys=True, indent=2)


def _load_datasets(paths, quality_max: float) -> list[Dataset]:
    return [
        metrics.rescale_mos(parse_dataset(_read(p)), (0.0, quality_max))
        for p in paths
    ]


def _merge_datasets(datasets) -> Dataset:
    sessions = tuple(s for ds in datasets for s in ds.sessions)
    name = "+".join(ds.name for ds in datasets)
    return Dataset(name=name, sessions=sessions, mos_scale=datasets[0].mos_scale)


def _parse_constraints(text: str | None):
    if text is None:
        return None
    names = tuple(part.strip() for part in text.split(",") if part.strip())
    return names


def _parse_floats(text: str) -> list[float]:
    return [float(part) for part in text.split(",") if part.strip()]


# ---------------------------------------------------------------------------
# train
# ---------------------------------------------------------------------------


def cmd_train(args) -> int:
    spec = GridSpec(args.n_steps, args.quality_max, args.rebuffer_max)
    datasets = _load_datasets(args.dataset, spec.quality_max)
    merged = _merge_datasets(datasets)
    ts, skipped = training.split_training_set(merged)
    constraints = _parse_constraints(args.constraints)

    report: dict = {
        "datasets": [ds.name for ds in datasets],
        "sessions": len(merged.sessions),
        "skipped_mixed_sessions": skipped,
        "seed": args.seed,
        "grid": {
            "n_steps": spec.n_steps,
            "quality_max": spec.quality_max,
            "rebuffer_max": spec.rebuffer_max,
        },
        "mos_rescaled_to": [0.0, spec.quality_max],
    }

    if args.lambda_sweep:
        lambdas = _parse_floats(args.lambda_sweep)
        points = training.lambda_sweep(ts, spec, lambdas)
        try:
            _, val_losses = training.cross_validate_lambda(
                ts, spec, lambdas, seed=args.seed
            )
        except ValidationError:
            val_losses = [float("nan")] * len(lambdas)
        lines = ["lambda,validation_mse,s_fidelity,s_smoothness,a_fidelity,a_smoothness"]
        for point, loss in zip(points, val_losses):
            lines.append(
                f"{point.lam:g},{loss:.10g},{point.s_fidelity:.10g},"
                f"{point.s_smoothness:.10g},{point.a_fidelity:.10g},{point.a_smoothness:.10g}"
            )
        _write(args.sweep_output, "\n".join(lines) + "\n")
        report["lambda_sweep"] = {"output": args.sweep_output, "lambdas": lambdas}

    solver_opts = {
        "tol_primal": args.tol_primal,
        "tol_dual": args.tol_dual,
        "max_iter": args.max_iter,
    }
    lam = args.lam
    if args.cross_validate:
        candidates = _parse_floats(args.cross_validate)
        lam, losses = training.cross_validate_lambda(
            ts, spec, candidates, split_fraction=args.split_fraction, seed=args.seed,
            **solver_opts,
        )
        report["cross_validation"] = {
            "candidates": candidates,
            "validation_mse": losses,
            "selected": lam,
        }

    model = training.train_ksqi(ts, spec, lam, constraints, **solver_opts)
    model.provenance["datasets"] = [ds.name for ds in datasets]
    model.provenance["seed"] = args.seed
    model.provenance["mos_rescaled_to"] = [0.0, spec.quality_max]
    _write(args.output, training.serialize_model(model))
    report["lambda"] = lam
    report["constraints"] = list(model.constraints)
    report["provenance"] = model.provenance
    report["model"] = args.output
    report["model_digest"] = prediction.model_digest(model)
    if args.report:
        _write(args.report, _dump(report))
    print(f"trained model written to {args.output} (lambda={lam:g})")
    return 0


# ---------------------------------------------------------------------------
# predict
# ---------------------------------------------------------------------------


def _load_sessions_for_prediction(path: str):
    text = _read(path)
    doc = json.loads(text)
    if isinstance(doc, dict) and "sessions" in doc:
        ds = parse_dataset(text)
        return list(ds.sessions)
    return [parse_session_log(text)]


def cmd_predict(args) -> int:
    model = training.deserialize_model(_read(args.model))
    digest = prediction.model_digest(model)
    first_adapt = not args.no_first_chunk_adaptation
    sessions = _load_sessions_for_prediction(args.input)
    docs = []
    for s in sessions:
        trace = prediction.session_qoe(model, s, first_chunk_adaptation=first_adapt)
        docs.append(prediction.trace_to_doc(trace, digest, first_adapt))
    payload = _dump({"predictions": docs})
    if args.output:
        _write(args.output, payload)
    else:
        print(payload)
    return 0


# ---------------------------------------------------------------------------
# evaluate
# ---------------------------------------------------------------------------


def cmd_evaluate(args) -> int:
    model = training.deserialize_model(_read(args.model))
    fitted = bl.deserialize_registry(_read(args.registry)) if args.registry else []
    datasets = _load_datasets(args.dataset, model.spec.quality_max)

    scores: dict = {}
    mos_by_dataset: dict = {}
    for ds in datasets:
        mos = [s.mos for s in ds.sessions]
        if any(v is None for v in mos):
            raise ValidationError(f"dataset '{ds.name}' has sessions without MOS labels")
        mos_by_dataset[ds.name] = np.asarray(mos, dtype=float)
        scores[("ksqi", ds.name)] = np.asarray(
            [prediction.session_qoe(model, s).final_score for s in ds.sessions]
        )
        for fb in fitted:
            scores[(fb.spec.name, ds.name)] = np.asarray(
                [bl.predict_baseline(fb, s) for s in ds.sessions]
            )

    report = metrics.build_report(scores, mos_by_dataset, seed=args.seed)
    out_dir = Path(args.output_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    for metric in report.METRICS:
        _write(str(out_dir / f"{metric}.csv"), report.to_csv(metric))

    summary: dict = {
        "models": list(report.models),
        "datasets": list(report.datasets),
        "seed": args.seed,
        "confidence": args.confidence,
    }
    pooled_n = min(len(report.pooled_residuals(m)) for m in report.models)
    if pooled_n >= 50:
        significance = report.significance(args.confidence)
        _write(str(out_dir / "significance.csv"), significance.to_csv())
        summary["significance"] = "significance.csv"
    else:
        summary["significance"] = (
            f"skipped: pooled residual count {pooled_n} < 50 breaks the "
            "Gaussian assumption of the variance-ratio test"
        )
    _write(str(out_dir / "summary.json"), _dump(summary))
    print(f"evaluation written to {out_dir}")
    return 0


# ---------------------------------------------------------------------------
# fit-baselines
# ---------------------------------------------------------------------------


def cmd_fit_baselines(args) -> int:
    datasets = _load_datasets(args.dataset, args.quality_max)
    merged = _merge_datasets(datasets)
    names = (
        [n.strip() for n in args.baselines.split(",") if n.strip()]
        if args.baselines
        else list(bl.DEFAULT_BASELINES)
    )
    fitted = []
    for name in names:
        if name not in bl.DEFAULT_BASELINES:
            raise ValidationError(
                f"unknown baseline '{name}'; available: {sorted(bl.DEFAULT_BASELINES)}"
            )
        fitted.append(bl.fit_baseline(bl.DEFAULT_BASELINES[name], merged, seed=args.seed))
    _write(args.output, bl.serialize_registry(fitted))
    print(f"fitted {len(fitted)} baselines on '{merged.name}' -> {args.output}")
    return 0


# ---------------------------------------------------------------------------
# synthesize
# ---------------------------------------------------------------------------


def cmd_synthesize(args) -> int:
    ladder = synthesis.parse_ladder(_read(args.ladder))
    trace = synthesis.parse_trace(_read(args.trace))
    cfg = synthesis.PlayerConfig(
        buffer_capacity=args.buffer_capacity,
        startup_threshold=args.startup_threshold,
        buffer_quantum=args.buffer_quantum,
    )
    if args.model:
        scorer = synthesis.KsqiScorer(training.deserialize_model(_read(args.model)))
    else:
        scorer = synthesis.LinearScorer(
            signal=args.linear_signal,
            signal_weight=args.linear_signal_weight,
            stall_weight=args.linear_stall_weight,
            switch_weight=args.linear_switch_weight,
        )
    choices, session, score = synthesis.dp_optimal_session(ladder, trace, cfg, scorer)
    _write(args.output, serialize_session(session))
    result = {
        "choices": list(choices),
        "score": score,
        "session": session_to_doc(session),
        "player": {
            "buffer_capacity": cfg.buffer_capacity,
            "startup_threshold": cfg.resolved_startup(ladder.segment_duration),
            "buffer_quantum": cfg.buffer_quantum,
        },
    }
    _write(args.choices_output, _dump(result))
    print(f"optimal score {score:.6f}; choices {list(choices)}")
    return 0


# ---------------------------------------------------------------------------
# rank
# ---------------------------------------------------------------------------


def cmd_rank(args) -> int:
    pm = ranking.read_comparison_csv(_read(args.comparisons))
    result = ranking.mle_ranking(pm, tol=args.tol)
    csv_text = ranking.ranking_to_csv(result)
    if args.output:
        _write(args.output, csv_text)
    else:
        print(csv_text, end="")
    return 0


# ---------------------------------------------------------------------------
# Parser
# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="ksqi",
        description="Knowledge-driven streaming QoE toolkit",
    )
    parser.add_argument(
        "--json-errors",
        action="store_true",
        help="emit machine-readable errors on stderr",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    train = sub.add_parser("train", help="fit the QoE surfaces from labelled sessions")
    train.add_argument("--dataset", action="append", required=True, help="dataset JSON file (repeatable)")
    train.add_argument("--output", required=True, help="model JSON output path")
    train.add_argument("--report", help="training report JSON output path")
    train.add_argument("--n-steps", type=int, default=10)
    train.add_argument("--quality-max", type=float, default=100.0)
    train.add_argument("--rebuffer-max", type=float, default=10.0)
    train.add_argument("--lambda", dest="lam", type=float, default=1.0, help="fidelity/smoothness trade-off")
    train.add_argument("--constraints", help=f"comma list from {','.join(S_CONSTRAINTS + A_CONSTRAINTS)} (default: all)")
    train.add_argument("--cross-validate", help="comma list of lambda candidates")
    train.add_argument("--split-fraction", type=float, default=0.8)
    train.add_argument("--lambda-sweep", help="comma list of lambdas to sweep")
    train.add_argument("--sweep-output", default="lambda_sweep.csv")
    train.add_argument("--tol-primal", type=float, default=1e-8)
    train.add_argument("--tol-dual", type=float, default=1e-8)
    train.add_argument("--max-iter", type=int, default=200_000)
    train.add_argument("--seed", type=int, default=0)
    train.set_defaults(func=cmd_train)

    predict = sub.add_parser("predict", help="score sessions with a trained model")
    predict.add_argument("--model", required=True)
    predict.add_argument("--input", required=True, help="session log or dataset JSON")
    predict.add_argument("--output", help="write predictions JSON here (default: stdout)")
    predict.add_argument(
        "--no-first-chunk-adaptation",
        action="store_true",
        help="drop the first-chunk adaptation term against the 80-point expectation",
    )
    predict.add_argument("--seed", type=int, default=0)
    predict.set_defaults(func=cmd_predict)

    evaluate = sub.add_parser("evaluate", help="correlation tables and significance matrix")
    evaluate.add_argument("--model", required=True)
    evaluate.add_argument("--registry", help="fitted baseline registry JSON")
    evaluate.add_argument("--dataset", action="append", required=True)
    evaluate.add_argument("--output-dir", required=True)
    evaluate.add_argument("--confidence", type=float, default=0.95)
    evaluate.add_argument("--seed", type=int, default=0)
    evaluate.set_defaults(func=cmd_evaluate)

    fit = sub.add_parser("fit-baselines", help="fit the parametric baseline zoo")
    fit.add_argument("--dataset", action="append", required=True)
    fit.add_argument("--output", required=True, help="registry JSON output path")
    fit.add_argument("--baselines", help="comma list of baseline names (default: all)")
    fit.add_argument("--quality-max", type=float, default=100.0)
    fit.add_argument("--seed", type=int, default=0)
    fit.set_defaults(func=cmd_fit_baselines)

    synth = sub.add_parser("synthesize", help="offline-optimal session for a QoE model")
    synth.add_argument("--ladder", required=True, help="bitrate ladder JSON")
    synth.add_argument("--trace", required=True, help="two-column throughput trace")
    synth.add_argument("--model", help="trained model JSON (default: linear scorer)")
    synth.add_argument("--output", required=True, help="session log output path")
    synth.add_argument("--choices-output", default="choices.json")
    synth.add_argument("--buffer-capacity", type=float, default=60.0)
    synth.add_argument("--startup-threshold", type=float, default=None)
    synth.add_argument("--buffer-quantum", type=float, default=0.1)
    synth.add_argument("--linear-signal", choices=["quality", "bitrate"], default="quality")
    synth.add_argument("--linear-signal-weight", type=float, default=1.0)
    synth.add_argument("--linear-stall-weight", type=float, default=1.0)
    synth.add_argument("--linear-switch-weight", type=float, default=1.0)
    synth.add_argument("--seed", type=int, default=0)
    synth.set_defaults(func=cmd_synthesize)

    rank = sub.add_parser("rank", help="global ranking from pairwise comparisons")
    rank.add_argument("--comparisons", required=True, help="CSV of model_i,model_j,wins_i,trials")
    rank.add_argument("--output", help="ranking CSV output (default: stdout)")
    rank.add_argument("--tol", type=float, default=1e-9)
    rank.add_argument("--seed", type=int, default=0)
    rank.set_defaults(func=cmd_rank)

    return parser


def _emit_error(args, kind: str, exc: Exception):
    if getattr(args, "json_errors", False):
        payload = {"error": kind, "type": type(exc).__name__, "message": str(exc)}
        print(json.dumps(payload, sort_keys=True), file=sys.stderr)
    else:
        print(f"error ({kind}): {exc}", file=sys.stderr)


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except _VALIDATION_ERRORS as exc:
        _emit_error(args, "validation", exc)
        return 2
    except _COMPUTATION_ERRORS as exc:
        _emit_error(args, "computation", exc)
        return 3
    except KsqiError as exc:
        _emit_error(args, "computation", exc)
        return 3


if __name__ == "__main__":
    sys.exit(main())
