import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from ksqi.errors import UndefinedCorrelationError, ValidationError
from ksqi.metrics import (
    BETTER,
    INDISTINGUISHABLE,
    WORSE,
    build_report,
    evaluate_scores,
    krcc,
    plcc,
    rescale_mos,
    significance_matrix,
    srcc,
    vqeg_map,
)
from ksqi.session import Chunk, Dataset, Session


def test_monotone_linear_fixture():
    assert plcc([1, 2, 3], [2, 4, 6]) == pytest.approx(1.0)
    assert srcc([1, 2, 3], [2, 4, 6]) == pytest.approx(1.0)
    assert krcc([1, 2, 3], [2, 4, 6]) == pytest.approx(1.0)


def test_reversal_fixture():
    assert plcc([1, 2, 3], [3, 2, 1]) == pytest.approx(-1.0)
    assert srcc([1, 2, 3], [3, 2, 1]) == pytest.approx(-1.0)
    assert krcc([1, 2, 3], [3, 2, 1]) == pytest.approx(-1.0)


def test_krcc_four_point_fixture():
    # 6 pairs, one discordant: (5 - 1) / 6
    assert krcc([1, 2, 3, 4], [1, 3, 2, 4]) == pytest.approx(2.0 / 3.0)


def test_constant_inputs_are_undefined():
    with pytest.raises(UndefinedCorrelationError):
        plcc([1, 1, 1], [1, 2, 3])
    with pytest.raises(UndefinedCorrelationError):
        srcc([2, 2, 2], [1, 2, 3])
    with pytest.raises(UndefinedCorrelationError):
        krcc([1, 2, 3], [5, 5, 5])


def test_length_preconditions():
    with pytest.raises(ValidationError):
        plcc([1, 2], [1, 2])
    with pytest.raises(ValidationError):
        srcc([1, 2, 3], [1, 2])


# integer-valued floats keep distinctness under the affine maps below
vectors = st.lists(
    st.integers(-1000, 1000).map(float), min_size=4, max_size=20
).filter(lambda v: len(set(v)) > 1)


@given(vectors, st.floats(0.1, 10), st.floats(-5, 5))
@settings(max_examples=50, deadline=None)
def test_affine_invariance(x, gain, shift):
    y = list(np.linspace(0, 1, len(x)))
    x2 = [gain * v + shift for v in x]
    assert plcc(x2, y) == pytest.approx(plcc(x, y), abs=1e-9)
    assert srcc(x2, y) == pytest.approx(srcc(x, y), abs=1e-9)
    assert krcc(x2, y) == pytest.approx(krcc(x, y), abs=1e-9)


@given(vectors)
@settings(max_examples=50, deadline=None)
def test_rank_metrics_invariant_under_monotone_transform(x):
    y = list(np.linspace(0, 1, len(x)))
    x2 = [np.exp(v / 50) for v in x]  # strictly increasing transform
    assert srcc(x2, y) == pytest.approx(srcc(x, y), abs=1e-9)
    assert krcc(x2, y) == pytest.approx(krcc(x, y), abs=1e-9)


def test_srcc_equals_plcc_of_ranks_without_ties():
    rng = np.random.default_rng(0)
    x = rng.permutation(30).astype(float)
    y = rng.normal(size=30)
    from scipy.stats import rankdata

    assert srcc(x, y) == pytest.approx(plcc(rankdata(x), rankdata(y)), abs=1e-12)


# --- nonlinear mapping ------------------------------------------------------


def test_vqeg_identity():
    rng = np.random.default_rng(1)
    mos = rng.uniform(5, 95, 60)
    fit = vqeg_map(mos, mos)
    assert not fit.linear_fallback
    assert plcc(fit.mapped, mos) > 0.99999


def test_vqeg_flips_orientation():
    rng = np.random.default_rng(2)
    mos = rng.uniform(5, 95, 60)
    fit = vqeg_map(-mos, mos)
    assert plcc(fit.mapped, mos) > 0.99999


def test_vqeg_needs_five_points():
    with pytest.raises(ValidationError):
        vqeg_map([1, 2, 3, 4], [1, 2, 3, 4])


def test_vqeg_constant_objective_maps_to_mean():
    mos = np.linspace(0, 10, 20)
    fit = vqeg_map(np.full(20, 3.0), mos)
    assert fit.mapped == pytest.approx(np.full(20, np.mean(mos)))


def test_vqeg_linear_fallback_when_fit_fails(monkeypatch):
    import scipy.optimize

    def boom(*args, **kwargs):
        raise RuntimeError("no convergence")

    monkeypatch.setattr(scipy.optimize, "least_squares", boom)
    rng = np.random.default_rng(8)
    mos = rng.uniform(0, 100, 30)
    fit = vqeg_map(2 * mos + 1, mos)
    assert fit.linear_fallback
    assert fit.params is None
    assert plcc(fit.mapped, mos) == pytest.approx(1.0)


# --- MOS rescaling ------------------------------------------------------------


def _scored_dataset(scale, values):
    sessions = tuple(Session((Chunk(50.0),), 0.0, v) for v in values)
    return Dataset("d", sessions, scale)


def test_rescale_fixtures():
    ds = _scored_dataset((1.0, 5.0), [3.0, 5.0, 1.0])
    out = rescale_mos(ds)
    assert [s.mos for s in out.sessions] == [50.0, 100.0, 0.0]
    assert out.mos_scale == (0.0, 100.0)


def test_rescale_identity():
    ds = _scored_dataset((0.0, 100.0), [12.5])
    assert rescale_mos(ds).sessions[0].mos == 12.5


def test_rescale_degenerate_scale():
    with pytest.raises(ValidationError, match="degenerate"):
        rescale_mos(_scored_dataset((2.0, 2.0), [2.0]))


# --- significance --------------------------------------------------------------


def test_identical_residuals_indistinguishable():
    rng = np.random.default_rng(3)
    r = rng.normal(size=120)
    sig = significance_matrix({"a": r, "b": r.copy()})
    assert sig.decisions == ((INDISTINGUISHABLE, INDISTINGUISHABLE),) * 2


def test_variance_ratio_fixture():
    rng = np.random.default_rng(4)
    low = rng.normal(0, 1.0, 200)
    high = rng.normal(0, 5.0, 200)
    sig = significance_matrix({"low": low, "high": high})
    assert sig.decisions[0][1] == BETTER
    assert sig.decisions[1][0] == WORSE
    assert sig.symbol_table()[0] == ["-", "1"]
    assert sig.symbol_table()[1] == ["0", "-"]


def test_antisymmetry_random_models():
    rng = np.random.default_rng(5)
    residuals = {f"m{k}": rng.normal(0, rng.uniform(0.5, 3), 80) for k in range(5)}
    sig = significance_matrix(residuals)
    k = len(sig.labels)
    flip = {BETTER: WORSE, WORSE: BETTER, INDISTINGUISHABLE: INDISTINGUISHABLE}
    for i in range(k):
        assert sig.decisions[i][i] == INDISTINGUISHABLE
        for j in range(k):
            assert sig.decisions[i][j] == flip[sig.decisions[j][i]]


def test_small_samples_refused():
    with pytest.raises(ValidationError, match="50"):
        significance_matrix({"a": np.ones(49), "b": np.ones(60)})


# --- report assembly --------------------------------------------------------------


def test_report_averages_and_weights():
    rng = np.random.default_rng(6)
    mos = {
        "d1": rng.uniform(0, 100, 60),
        "d2": rng.uniform(0, 100, 120),
    }
    scores = {}
    for model, noise in (("good", 2.0), ("bad", 40.0)):
        for ds, m in mos.items():
            scores[(model, ds)] = m + rng.normal(0, noise, len(m))
    report = build_report(scores, mos, seed=0)
    rows = {r[0]: r for r in report.metric_rows("plcc")}
    _, values, avg, weighted = rows["good"]
    assert avg == pytest.approx(np.mean(values))
    assert weighted == pytest.approx((values[0] * 60 + values[1] * 120) / 180)
    assert rows["good"][2] > rows["bad"][2]
    csv_text = report.to_csv("plcc")
    assert csv_text.splitlines()[0] == "model,d1,d2,average,weighted_average"
    sig = report.significance()
    assert sig.decisions[0][1] == BETTER


def test_evaluate_scores_keeps_residuals():
    rng = np.random.default_rng(7)
    mos = rng.uniform(0, 100, 80)
    pred = mos + rng.normal(0, 5, 80)
    cell = evaluate_scores(pred, mos, seed=0)
    assert cell.n == 80
    assert len(cell.residuals) == 80
    assert 0.9 < cell.plcc <= 1.0
