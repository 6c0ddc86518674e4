import math
import warnings

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from mrhom.estimation import FisherConfig, fisher_information
from mrhom.fit import (
    BeatCurveModel,
    BeatFitParams,
    BoundaryMaximumError,
    DegenerateCurvatureError,
    DegenerateFitWarning,
    FitError,
    NonStationaryError,
    ProbabilityModel,
    VisibilityClampWarning,
    beat_curve,
    estimate_displacement,
    fit_beat_curve,
    guess_beat_params,
    least_squares_seed,
    log_likelihood,
    mle_estimate,
    mle_uncertainty,
    quarter_period_window,
)
from mrhom.model import Branch, Channel, DetectorArray, SourceParams, probability_table
from mrhom.montecarlo import SimulationConfig, sample_counts

REFERENCE = SourceParams(0.035, 0.3)
ARRAY = DetectorArray.uniform(8, 9.8, 1.7)
TRUE = np.array([40.0, 0.3, 1.7, 9.8])
GRID40 = np.linspace(0.0, 2.0, 40)


def exact_counts(dx, n, model=None):
    model = model or ProbabilityModel(REFERENCE, ARRAY)
    table = probability_table("AB", dx, REFERENCE, ARRAY)
    assert list(table.channels) == list(model.channels)
    return n * np.asarray(table.probabilities)


def sampled_counts(dx, n, seed, model):
    cA, cB = sample_counts(dx, n, SimulationConfig(REFERENCE, ARRAY), seed=seed)
    return np.array([(cA if c.branch is Branch.A else cB).counts[c.i, c.j] for c in model.channels], float)


# -- beat-curve fitting -------------------------------------------------------

def test_jacobian_matches_finite_differences():
    x = np.linspace(0.01, 2, 50)
    _, J = beat_curve(x, TRUE, -1, jacobian=True)
    for k in range(4):
        h = 1e-6 * max(1.0, abs(TRUE[k]))
        tp, tm = TRUE.copy(), TRUE.copy()
        tp[k] += h
        tm[k] -= h
        fd = (beat_curve(x, tp, -1) - beat_curve(x, tm, -1)) / (2 * h)
        assert np.allclose(J[:, k], fd, rtol=1e-6, atol=1e-7)


@pytest.mark.parametrize("branch", [Branch.A, Branch.B])
def test_noiseless_recovery(branch):
    y = beat_curve(GRID40, TRUE, branch.sign)
    p = fit_beat_curve(GRID40, y, np.ones_like(y), branch)
    assert np.allclose(p.theta, TRUE, rtol=1e-6)
    assert p.residual_norm < 1e-6 and not p.degenerate


def test_noiseless_recovery_unweighted():
    y = beat_curve(GRID40, TRUE, -1)
    p = fit_beat_curve(GRID40, y, None, Branch.A, weighted=False)
    assert np.allclose(p.theta, TRUE, rtol=1e-6)


def test_flat_data_is_degenerate():
    y = beat_curve(GRID40, [40.0, 0.0, 1.7, 9.8], -1)
    with pytest.warns(DegenerateFitWarning):
        p = fit_beat_curve(GRID40, y, np.full_like(y, 0.5), Branch.A,
                           initial_guess=[40, 0.0, 1.7, 9.8])
    assert p.amplitude == pytest.approx(np.mean(y), rel=1e-9)
    assert p.visibility == pytest.approx(0.0, abs=1e-9)
    assert p.degenerate


def test_fit_preconditions():
    y = beat_curve(GRID40, TRUE, -1)
    with pytest.raises(FitError):
        fit_beat_curve(GRID40[:7], y[:7], np.ones(7))
    with pytest.raises(FitError):
        fit_beat_curve(GRID40, y, np.zeros_like(y))
    with pytest.raises(FitError):
        fit_beat_curve(GRID40, y, None)
    with pytest.raises(ValueError):
        fit_beat_curve(GRID40, y, np.ones_like(y), fixed={"phase": 0.0})


def test_visibility_is_clamped_with_warning():
    y = beat_curve(GRID40, [40.0, 1.4, 1.7, 9.8], -1)
    with pytest.warns(VisibilityClampWarning):
        p = fit_beat_curve(GRID40, y, np.ones_like(y), Branch.A)
    assert p.visibility == 1.0


def test_fixed_parameters_stay_fixed():
    y = beat_curve(GRID40, [40.0, 0.3, 1.7, 0.0], 1)
    p = fit_beat_curve(GRID40, y, np.ones_like(y), Branch.B, fixed={"delta_k": 0.0})
    assert p.delta_k == 0.0 and p.fixed == ("delta_k",)
    assert p.covariance[3].tolist() == [0.0] * 4
    assert np.allclose(p.theta[:3], [40.0, 0.3, 1.7], rtol=1e-6)


def test_guess_lands_near_truth():
    y = beat_curve(GRID40, [40.0, 0.3, 1.7, 19.6], -1)
    g = guess_beat_params(GRID40, y, None, Branch.A)
    assert g[3] == pytest.approx(19.6, rel=0.05)


def test_coverage_of_standard_errors():
    """Poisson noise around the curve, ten repeats per point: 3-SE intervals cover."""
    rng = np.random.default_rng(2024)
    x = np.arange(0.0, 2.0001, 0.02)
    n_trials, hits = 100, np.zeros(3)
    for trial in range(n_trials):
        reps = rng.poisson(beat_curve(x, TRUE, -1), size=(10, x.size))
        mean, err = reps.mean(0), reps.std(0, ddof=1) / math.sqrt(10)
        err = np.maximum(err, 1e-3)
        p = fit_beat_curve(x, mean, err, Branch.A, seed=trial)
        se = p.stderr
        for k, name in enumerate(("visibility", "delta", "delta_k")):
            hits[k] += abs(getattr(p, name) - TRUE[k + 1]) <= 3 * se[name]
    assert np.all(hits >= 0.95 * n_trials), hits


def test_params_object():
    p = fit_beat_curve(GRID40, beat_curve(GRID40, TRUE, -1), np.ones(40), Branch.A,
                       channel=Channel(Branch.A, 2, 3))
    assert np.allclose(p(GRID40), beat_curve(GRID40, TRUE, -1))
    m, d1, d2 = p.derivatives(0.37)
    h = 1e-5
    assert m == pytest.approx(p(0.37), rel=1e-12)
    assert d1 == pytest.approx((p(0.37 + h) - p(0.37 - h)) / (2 * h), rel=1e-6)
    assert d2 == pytest.approx((p(0.37 + h) - 2 * p(0.37) + p(0.37 - h)) / h ** 2, rel=1e-4)
    row = p.as_row()
    assert row["branch"] == "A" and row["i"] == 2 and "delta_k_err" in row


# -- log-likelihood -------------------------------------------------------------

def one_channel(amplitude=40.0, visibility=0.3, delta=1.7, delta_k=9.8, branch=Branch.A):
    return BeatFitParams(amplitude, visibility, delta, delta_k, branch, channel=Channel(branch, 0, 1))


def test_log_likelihood_trivial_cases():
    fits = [one_channel(), one_channel(branch=Branch.B)]
    model = BeatCurveModel(fits, renormalize=False)
    assert log_likelihood(0.3, [0, 0], model) == 0.0
    single = BeatCurveModel([fits[0]], renormalize=False)
    assert log_likelihood(0.3, [1], single) == pytest.approx(math.log(float(fits[0](0.3))), rel=1e-14)
    with pytest.raises(ValueError):
        log_likelihood(0.3, [1, 2, 3], model)


def test_log_likelihood_rejects_nonpositive_model():
    model = BeatCurveModel([one_channel(visibility=1.0, delta=1e-9, delta_k=0.0)], renormalize=False)
    with pytest.raises(ValueError):
        log_likelihood(0.0, [3], model)
    assert log_likelihood(0.0, [0], model) == 0.0


def test_mle_at_point_eight_on_sampled_data():
    model = ProbabilityModel(REFERENCE, ARRAY)
    c = sampled_counts(0.8, 10 ** 8, 5, model)
    window = quarter_period_window(0.8, model.fastest_beat())
    x = mle_estimate(c, model, window, n_grid=512)
    step = (window[1] - window[0]) / 511
    assert abs(x - 0.8) <= step


def test_mle_consistent_at_large_n():
    model = ProbabilityModel(REFERENCE, ARRAY)
    c = sampled_counts(0.5, 10 ** 6, 11, model)
    sd = 1 / math.sqrt(10 ** 6 * fisher_information(0.5, FisherConfig.for_array(REFERENCE, ARRAY)))
    assert abs(mle_estimate(c, model, (0.2, 0.9)) - 0.5) < 4 * sd


@pytest.mark.parametrize("dx", [0.13, 0.5, 0.8, 1.6])
def test_exact_counts_give_exact_maximizer(dx):
    model = ProbabilityModel(REFERENCE, ARRAY)
    c = exact_counts(dx, 1e6, model)
    x = mle_estimate(c, model, quarter_period_window(dx, model.fastest_beat()))
    assert x == pytest.approx(dx, abs=1e-6)


def test_window_excluding_truth_is_rejected():
    model = ProbabilityModel(REFERENCE, ARRAY)
    c = exact_counts(0.5, 1e6, model)
    with pytest.raises(BoundaryMaximumError):
        mle_estimate(c, model, (0.505, 0.515))
    with pytest.raises(ValueError):
        mle_estimate(c, model, (0.6, 0.6))


def test_stationarity_at_maximizer():
    model = ProbabilityModel(REFERENCE, ARRAY)
    c = sampled_counts(0.5, 10 ** 5, 3, model)
    window = quarter_period_window(0.5, model.fastest_beat())
    x = mle_estimate(c, model, window)
    slope = lambda t: float(c @ model.log_terms(t)[1])
    typical = max(abs(slope(t)) for t in np.linspace(*window, 101))
    assert abs(slope(x)) < 1e-6 * typical


@pytest.mark.parametrize("renormalize", [True, False])
@pytest.mark.parametrize("dx", [0.05, 0.5, 1.3])
def test_log_terms_match_finite_differences(dx, renormalize):
    model = ProbabilityModel(REFERENCE, ARRAY, renormalize=renormalize)
    c = exact_counts(0.5, 1e5, model)
    h = 1e-5
    logm, g1, g2 = model.log_terms(dx)
    lp, lm = model.log_terms(dx + h)[0], model.log_terms(dx - h)[0]
    assert np.allclose(g1, (lp - lm) / (2 * h), rtol=1e-5, atol=1e-8 * np.max(np.abs(g1)))
    L = lambda t: float(c @ model.log_terms(t)[0])
    fd2 = (L(dx + 1e-4) - 2 * L(dx) + L(dx - 1e-4)) / 1e-8
    assert float(c @ g2) == pytest.approx(fd2, rel=1e-5)


def test_fitted_model_log_terms_match_finite_differences():
    fits = [one_channel(delta_k=9.8 * k, branch=b) for k in (1, 2, 3) for b in (Branch.A, Branch.B)]
    model = BeatCurveModel(fits)
    h = 1e-5
    logm, g1, _ = model.log_terms(0.41)
    fd = (model.log_terms(0.41 + h)[0] - model.log_terms(0.41 - h)[0]) / (2 * h)
    assert np.allclose(g1, fd, rtol=1e-5)


@settings(max_examples=20, deadline=None)
@given(dx=st.floats(0.05, 1.8))
def test_parity(dx):
    model = ProbabilityModel(REFERENCE, ARRAY)
    cp, cm = exact_counts(dx, 1e5, model), exact_counts(-dx, 1e5, model)
    assert np.allclose(cp, cm, rtol=1e-12)
    for t in np.linspace(dx - 0.02, dx + 0.02, 9):
        assert log_likelihood(t, cp, model) == pytest.approx(log_likelihood(-t, cm, model), rel=1e-12)


# -- uncertainty propagation ------------------------------------------------------

def test_homogeneity_of_propagation():
    model = ProbabilityModel(REFERENCE, ARRAY)
    c = sampled_counts(0.5, 10 ** 5, 7, model) / 10
    e = np.sqrt(c) / math.sqrt(10)
    x = mle_estimate(c, model, quarter_period_window(0.5, model.fastest_beat()))
    err1, s1 = mle_uncertainty(c, e, model, x)
    err2, s2 = mle_uncertainty(2 * c, math.sqrt(2) * e, model, x)
    assert np.allclose(s2, s1 / 2, rtol=1e-12)
    assert err2 == pytest.approx(err1 / math.sqrt(2), rel=1e-12)


def test_flat_model_has_no_curvature():
    model = BeatCurveModel([one_channel(visibility=0.0)], renormalize=False)
    with pytest.raises(DegenerateCurvatureError):
        mle_uncertainty([50.0], [2.0], model, 0.3)


def test_non_stationary_point_rejected():
    model = ProbabilityModel(REFERENCE, ARRAY)
    c = exact_counts(0.5, 1e5, model)
    with pytest.raises(NonStationaryError):
        mle_uncertainty(c, np.sqrt(c), model, 0.51)


def test_estimate_displacement_result():
    model = ProbabilityModel(REFERENCE, ARRAY)
    c = sampled_counts(0.5, 10 ** 5, 9, model) / 10
    e = np.sqrt(c) / math.sqrt(10)
    window = quarter_period_window(0.5, model.fastest_beat())
    r = estimate_displacement(c, e, model, window, n_repeats=10)
    assert window[0] < r.dx_ml < window[1] and r.dx_err > 0
    assert r.n_total == pytest.approx(10 * c.sum())
    assert r.sqrtN_dx_err == pytest.approx(math.sqrt(r.n_total) * r.dx_err)
    assert r.per_channel_sensitivities.shape == c.shape
    assert r.log_likelihood_at_max == pytest.approx(log_likelihood(r.dx_ml, c, model))


def test_least_squares_seed_finds_region():
    model = ProbabilityModel(REFERENCE, ARRAY)
    c = exact_counts(0.5, 1e5, model)
    assert least_squares_seed(c, np.sqrt(c), model, (0.0, 2.0)) == pytest.approx(0.5, abs=2e-3)
    with pytest.raises(ValueError):
        quarter_period_window(0.5, 0.0)


def test_consistency_as_n_grows():
    """Bias vanishes and N var F approaches one through N = 1e3, 1e4, 1e5."""
    model = ProbabilityModel(REFERENCE, ARRAY)
    F = fisher_information(0.5, FisherConfig.for_array(REFERENCE, ARRAY))
    window = quarter_period_window(0.5, model.fastest_beat())
    ratios = {}
    for n in (10 ** 3, 10 ** 4, 10 ** 5):
        est = []
        for s in range(200 if n == 10 ** 5 else 100):
            try:
                est.append(mle_estimate(sampled_counts(0.5, n, 1000 * n + s, model), model, window))
            except BoundaryMaximumError:
                continue
        est = np.array(est)
        sd = 1 / math.sqrt(n * F)
        assert abs(est.mean() - 0.5) < 4 * sd / math.sqrt(est.size)
        ratios[n] = est.var(ddof=1) * n * F
    assert abs(ratios[10 ** 5] - 1) < 0.15, ratios


def test_fit_scan_marks_aliased_beats_unusable(monkeypatch):
    import mrhom.report as report
    from mrhom.montecarlo import ScanDataset

    x = np.arange(0, 2.0001, 0.02)
    ch = Channel(Branch.A, 0, 1)
    ds = ScanDataset(x, (ch,), beat_curve(x, TRUE, -1)[:, None], np.ones((x.size, 1)), 10, 100, 8)
    assert report.fit_scan(ds)[0].usable
    # a beat 2 pi / step faster matches the same samples exactly
    alias = [40.0, 0.3, 1.7, 9.8 + 2 * math.pi / 0.02]
    assert np.allclose(beat_curve(x, alias, -1), beat_curve(x, TRUE, -1))
    monkeypatch.setattr(report, "fit_beat_curve", lambda *a, **k: BeatFitParams(*alias, Branch.A, channel=ch))
    f = report.fit_scan(ds)[0]
    assert f.status.startswith("aliased") and not f.usable
