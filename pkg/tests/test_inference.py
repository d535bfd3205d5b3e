import warnings

import numpy as np
import pytest

from staggered import estimands as est
from staggered.estimator import cohort_stats, resolve_preset_beta, variance_components
from staggered.exceptions import ValidationError
from staggered.inference import (
    Plan,
    RefinementWarning,
    balance_test,
    confidence_interval,
    count_ge,
    draw_permutations,
    event_study,
    frt,
    infer,
    neyman_se,
    refined_se,
    sup_t_critical_value,
)
from staggered.montecarlo import calibrated_null, enumerate_assignments, enumerate_moments
from staggered.panel import NEVER, from_wide

from conftest import staggered_panel, toy_population


def test_ci_standard_normal():
    lo, hi = confidence_interval(0.0, 1.0, 0.05)
    assert np.isclose(lo, -1.959964, atol=1e-6) and np.isclose(hi, 1.959964, atol=1e-6)


def test_ci_alpha_032():
    lo, hi = confidence_interval(2.0, 1.0, 0.32)
    assert np.isclose(lo, 1.006, atol=5e-4) and np.isclose(hi, 2.994, atol=5e-4)


def test_ci_zero_se():
    assert confidence_interval(1.5, 0.0) == (1.5, 1.5)


def test_neyman_se_without_adjustment_contrasts():
    p = staggered_panel(0)
    s = cohort_stats(p)
    w = est.build_estimand("simple", p)
    zero = est.AdjustmentSpec("zero", ({},), p.cohorts, p.n_periods)
    vc = variance_components(s, w, zero)
    assert np.isclose(neyman_se(s, w, zero, np.array([[0.7]]))[0] ** 2, vc.V_theta0[0, 0])


def test_refined_never_exceeds_neyman():
    for seed in range(20):
        p = staggered_panel(seed)
        s = cohort_stats(p)
        w = est.build_estimand("simple", p)
        adj = est.build_adjustment("cs_scalar", w, p)
        b = resolve_preset_beta("plugin", adj, variance_components(s, w, adj))
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", RefinementWarning)
            assert refined_se(s, w, adj, b)[0] <= neyman_se(s, w, adj, b)[0] + 1e-15


def test_refined_equals_neyman_when_pre_periods_uncorrelated():
    # period 1 is orthogonal to period 2 within every cohort sample
    y1 = np.array([1.0, -1.0, 1.0, -1.0])
    y2 = np.array([1.0, 1.0, -1.0, -1.0])
    Y = np.vstack([np.column_stack([y1, y2 + 3]), np.column_stack([y1, y2])])
    p = from_wide(Y, [2.0] * 4 + [NEVER] * 4)
    s = cohort_stats(p)
    w = est.build_estimand("simple", p)
    adj = est.build_adjustment("cs_scalar", w, p)
    b = np.array([[0.4]])
    assert np.isclose(refined_se(s, w, adj, b)[0], neyman_se(s, w, adj, b)[0], rtol=0, atol=1e-15)


def test_refined_falls_back_when_first_period_cohort():
    rng = np.random.default_rng(0)
    p = from_wide(rng.normal(size=(8, 3)), [1.0] * 4 + [NEVER] * 4)
    s = cohort_stats(p)
    w = est.build_estimand("simple", p)
    adj = est.AdjustmentSpec("none", (), p.cohorts, p.n_periods)
    with pytest.warns(RefinementWarning):
        r = refined_se(s, w, adj, np.zeros((0, 1)))
    assert np.isclose(r[0], neyman_se(s, w, adj, np.zeros((0, 1)))[0])


def _enum_se(po, w, adj, stat_fn):
    """Mean over all assignments of a squared standard error."""
    out = []
    for a in enumerate_assignments(po.sizes):
        q = po.realize(a)
        s = cohort_stats(q)
        b = resolve_preset_beta("plugin", adj, variance_components(s, w, adj))
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", RefinementWarning)
            out.append(stat_fn(s, w, adj, b)[0] ** 2)
    return float(np.mean(out))


def test_neyman_conservative_under_homogeneous_effects():
    po = toy_population(2, {2.0: 4, NEVER: 4}, 2, effect_sd=0.0)
    p = po.template_panel()
    w = est.build_estimand("simple", p)
    adj = est.build_adjustment("cs_scalar", w, p)
    true_var = po.variance(w, adj, po.beta_star(w, adj))[0, 0]
    # the squared se is unbiased for the fixed-beta variance and beta-hat only adds noise
    assert _enum_se(po, w, adj, neyman_se) >= true_var * 0.95


def test_refined_tracks_variance_when_effects_load_on_pre_period():
    po = toy_population(3, {2.0: 4, NEVER: 4}, 2, effect_sd=0.05, linear=1.5)
    p = po.template_panel()
    w = est.build_estimand("simple", p)
    adj = est.build_adjustment("cs_scalar", w, p)
    en = enumerate_moments(po, w, adj)
    true_var = en.variance(po.beta_star(w, adj))[0, 0]
    ney = _enum_se(po, w, adj, neyman_se)
    ref = _enum_se(po, w, adj, refined_se)
    assert abs(ref - true_var) < abs(ney - true_var)


def test_count_ge_ties():
    draws = np.array([[1.0], [-2.0], [2.0 * (1 + 1e-12)], [0.5]])
    assert count_ge(draws, np.array([2.0]))[0] == 2


def test_p_value_when_observed_is_largest():
    rng = np.random.default_rng(0)
    G = np.array([2.0] * 30 + [NEVER] * 30)
    Y = rng.normal(size=(60, 2))
    Y[G == 2.0, 1] += 25.0
    p = from_wide(Y, G)
    w = est.build_estimand("simple", p)
    adj = est.build_adjustment("cs_scalar", w, p)
    r = frt(p, w, adj, draws=199, seed=1, threads=1)
    assert np.isclose(r.p_value[0], 1 / 200)


def test_frt_identical_across_thread_counts():
    p = staggered_panel(4)
    w = est.build_estimand("simple", p)
    adj = est.build_adjustment("cs_scalar", w, p)
    a = frt(p, w, adj, draws=300, seed=11, threads=1)
    b = frt(p, w, adj, draws=300, seed=11, threads=4)
    assert np.array_equal(a.t_draws, b.t_draws)
    assert np.array_equal(a.p_value, b.p_value)


def test_frt_scale_invariance():
    p = staggered_panel(9)
    w = est.build_estimand("simple", p)
    adj = est.build_adjustment("cs_scalar", w, p)
    a = frt(p, w, adj, draws=200, seed=2, threads=1)
    b = frt(p.with_outcomes(-4.0 * p.outcomes), w, adj, draws=200, seed=2, threads=1)
    assert np.array_equal(a.p_value, b.p_value)


def test_permutations_stay_within_strata():
    rng = np.random.default_rng(0)
    strata = np.array([0, 0, 0, 1, 1, 1, 1])
    perms = draw_permutations(rng, 7, 50, strata)
    assert np.all(np.isin(perms[:, :3], [0, 1, 2]))
    assert np.all(np.isin(perms[:, 3:], [3, 4, 5, 6]))


def test_stratified_pooling():
    a = staggered_panel(1, {2.0: 10, NEVER: 10}, T=3)
    b = staggered_panel(2, {2.0: 15, NEVER: 15}, T=3)
    Y = np.vstack([a.outcomes, b.outcomes])
    G = np.r_[a.first_treated, b.first_treated]
    st = np.array(["a"] * 20 + ["b"] * 30, dtype=object)
    p = from_wide(Y, G, stratum_id=st)
    r = infer(p, Plan(), frt_draws=50, seed=0, threads=1)
    ra, rb = infer(a, Plan()), infer(b, Plan())
    assert np.isclose(r.theta_hat[0], 0.4 * ra.theta_hat[0] + 0.6 * rb.theta_hat[0])
    assert np.isclose(r.se_refined[0] ** 2, 0.16 * ra.se_refined[0] ** 2 + 0.36 * rb.se_refined[0] ** 2)
    assert 0 < r.frt_p[0] <= 1


def test_infer_report_fields():
    r = infer(staggered_panel(0), Plan(), frt_draws=20, seed=5)
    d = r.to_dict()
    for key in ["estimand", "preset", "theta_hat", "se_neyman", "se_refined", "ci", "frt_p", "B", "seed",
                "diagnostics"]:
        assert key in d
    assert d["se_refined"] <= d["se_neyman"]
    assert d["ci"][0] < d["theta_hat"] < d["ci"][1]


def test_presets_need_cs_scalar():
    with pytest.raises(ValidationError):
        Plan(preset="cs", adjustment="all_pairs")


def test_balance_zero_contrasts():
    Y = np.array([[1.0, 2.0, 0.0], [3.0, 0.0, 1.0]] * 3)
    p = from_wide(Y, [2.0, 2.0, 3.0, 3.0, NEVER, NEVER])
    w = est.build_estimand("simple", p)
    adj = est.build_adjustment("cs_scalar", w, p)
    r = balance_test(p, adj, draws=50, seed=0)
    assert np.allclose(r.t, 0.0)
    assert np.allclose(r.p_frt, 1.0) and np.isclose(r.joint_p, 1.0)


def test_balance_detects_shifted_cohort():
    rng = np.random.default_rng(0)
    G = np.array([2.0] * 100 + [NEVER] * 100)
    Y = rng.normal(size=(200, 2))
    Y[G == 2.0, 0] += 1.0
    p = from_wide(Y, G)
    w = est.build_estimand("simple", p)
    adj = est.build_adjustment("cs_scalar", w, p)
    r = balance_test(p, adj, draws=200, seed=0)
    assert r.p_t[0] < 0.01
    assert r.labels == ("tau(1,2,never)",)


def test_balance_exact_size_under_enumeration():
    po = toy_population(5, {2.0: 3, 3.0: 3, NEVER: 3}, 3)
    base = po.template_panel()
    null = calibrated_null(base)
    w = est.build_estimand("simple", base)
    adj = est.build_adjustment("cs_scalar", w, base)
    from staggered.inference import _adjustment_as_estimand, _studentize
    from staggered.estimator import Design
    ew = _adjustment_as_estimand(adj)
    none = est.AdjustmentSpec("none", (), base.cohorts, base.n_periods)
    d = Design(base, ew, none, np.zeros((0, 1)), refine=False)
    A = enumerate_assignments(null.sizes)
    r = d.evaluate(d.indices_from_assignments(A))
    t = np.abs(_studentize(r.theta[:, 0], np.sqrt(r.var_neyman[:, 0])))
    p = np.array([np.mean(t >= ti * (1 - 1e-9)) for ti in t])
    assert np.mean(p <= 0.05) <= 0.05


def test_sup_t_critical_value():
    z = sup_t_critical_value(np.eye(1))
    assert np.isclose(z, 1.959963984540054)
    c = sup_t_critical_value(np.eye(3), draws=50_000, seed=1)
    # independent components: (1 - 0.05) ** (1 / 3) quantile of |Z|
    assert np.isclose(c, 2.387, atol=0.03)
    assert sup_t_critical_value(np.ones((3, 3)), seed=1) == pytest.approx(1.959963984540054)


def test_event_study_rows_and_band():
    p = staggered_panel(3, {2.0: 20, 3.0: 20, 4.0: 20, NEVER: 20}, T=5)
    es = event_study(p, lags=[0, 1, 2], leads=[1], frt_draws=0)
    df = es.to_frame()
    assert list(df.event_time) == [-1, 0, 1, 2]
    assert np.all(df.band_lo <= df.ci_lo + 1e-12) and np.all(df.ci_lo <= df.ci_hi)
    assert np.all(df.ci_hi <= df.band_hi + 1e-12)


def test_event_study_lag0_matches_simple_on_two_periods(two_period_panel):
    es = event_study(two_period_panel, lags=[0])
    r = infer(two_period_panel, Plan())
    assert np.isclose(es.theta_hat[0], r.theta_hat[0])
    assert np.isclose(es.se_refined[0], r.se_refined[0])


def test_event_study_omits_unidentified_lag():
    p = staggered_panel(0, {2.0: 10, 3.0: 10, NEVER: 10}, T=3)
    with pytest.warns(UserWarning, match="lag 4"):
        es = event_study(p, lags=[0, 4])
    assert es.event_time == [0]


def test_placebo_lead_is_mean_zero_under_enumeration():
    po = toy_population(7, {3.0: 3, NEVER: 3}, 3)
    p = po.template_panel()
    shifted = est.shift_for_placebo(p, 1)
    w = est.build_estimand("event_study", shifted, lag=0)
    adj = est.build_adjustment("cs_scalar", w, shifted)
    w, adj = est.unshift(w, adj, p, 1)
    en = enumerate_moments(po, w, adj)
    for b in [0.0, 1.0, 0.37]:
        assert abs(en.mean(b)[0]) < 1e-12
