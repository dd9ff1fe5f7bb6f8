"""Knowledge-driven streaming QoE toolkit.

Trains non-parametric rebuffering and adaptation QoE surfaces by
quadratic programming over perceptually motivated convex constraint
sets, predicts session-level QoE, fits classic parametric baselines,
computes benchmark correlation/significance reports, synthesizes
offline-optimal streaming sessions over throughput traces, and
aggregates pairwise comparisons into global rankings.
"""

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
from .metrics import krcc, plcc, rescale_mos, significance_matrix, srcc, vqeg_map
from .prediction import (
    PredictionTrace,
    adaptation_delta,
    chunk_qoe,
    rebuffering_penalty,
    session_qoe,
)
from .ranking import PairwiseMatrix, RankingResult, mle_ranking, preference_probability
from .session import (
    Chunk,
    Dataset,
    FeatureSummary,
    Session,
    parse_dataset,
    parse_session_log,
    serialize_session,
    session_features,
    validate_session,
)
from .solver import KktResiduals, QpProblem, SolverReport, SolverStatus, kkt_residuals, solve_qp
from .synthesis import (
    BitrateLadder,
    KsqiScorer,
    LinearScorer,
    NetworkTrace,
    PlayerConfig,
    Representation,
    brute_force_optimal,
    dp_optimal_session,
    simulate_download,
)
from .training import (
    KsqiModel,
    TrainingSet,
    cross_validate_lambda,
    deserialize_model,
    serialize_model,
    split_training_set,
    train_ksqi,
)

__version__ = "0.1.0"
