import numpy as np
import pytest

from staggered import estimands as est
from staggered.exceptions import ValidationError
from staggered.montecarlo import (
    MCConfig,
    PopulationSpec,
    PotentialOutcomes,
    assignment_from_permutation,
    calibrated_hetero,
    calibrated_null,
    count_assignments,
    enumerate_assignments,
    enumerate_moments,
    gen_two_period,
    load_config,
    parse_config,
    run_mc,
)
from staggered.panel import NEVER

from conftest import staggered_panel, toy_population


def test_count_and_enumerate_n6():
    sizes = {2.0: 3, NEVER: 3}
    assert count_assignments(sizes) == 20
    A = enumerate_assignments(sizes)
    assert A.shape == (20, 6)
    assert len({tuple(r) for r in A}) == 20
    assert np.all((A == 2.0).sum(axis=1) == 3)


def test_enumeration_limit():
    with pytest.raises(ValidationError, match="limit"):
        enumerate_assignments({2.0: 10, NEVER: 10}, limit=1000)


def test_assignment_from_permutation():
    template = np.array([2.0, 2.0, NEVER])
    G = assignment_from_permutation(template, np.array([2, 0, 1]))
    assert np.array_equal(G, [2.0, NEVER, 2.0])


def test_potential_outcomes_reject_anticipation():
    Y = {2.0: np.array([[1.0, 2.0]]), NEVER: np.array([[0.0, 2.0]])}
    po = PotentialOutcomes(Y, {2.0: 0, NEVER: 1})
    assert po.no_anticipation_gap() == 1.0


def test_population_beta_star_high_rho():
    vals = []
    for seed in range(5):
        po = gen_two_period(1000, 1000, 0.99, 0.5, seed=seed)
        p = po.template_panel()
        w = est.build_estimand("simple", p)
        vals.append(po.beta_star(w, est.build_adjustment("cs_scalar", w, p))[0, 0])
    assert np.all(np.abs(np.array(vals) - 1.24) < 0.1)


def test_population_rho_one_gives_unit_beta():
    po = gen_two_period(50, 50, 1.0, 0.0, seed=1)
    p = po.template_panel()
    w = est.build_estimand("simple", p)
    assert np.isclose(po.beta_star(w, est.build_adjustment("cs_scalar", w, p))[0, 0], 1.0)


def test_gamma_zero_is_sharp_null():
    po = gen_two_period(20, 30, 0.5, 0.0, seed=2)
    assert np.array_equal(po.Y[2.0], po.Y[NEVER])


def test_effects_average_zero():
    po = gen_two_period(40, 60, 0.3, 0.7, seed=0)
    p = po.template_panel()
    assert np.isclose(po.true_theta(est.build_estimand("simple", p))[0], 0.0, atol=1e-14)


def test_calibrated_populations():
    p = staggered_panel(0)
    null = calibrated_null(p)
    assert all(np.array_equal(null.Y[g], p.outcomes) for g in p.cohorts)
    het = calibrated_hetero(p, seed=1)
    assert het.no_anticipation_gap() == 0.0
    assert np.array_equal(het.Y[NEVER], p.outcomes)
    assert not np.array_equal(het.Y[2.0], p.outcomes)


def test_parse_config():
    spec, cfg = parse_config({"rho": "0.9", "gamma": "0.5", "reps": "10", "seed": "7",
                              "estimators": "plugin, did"})
    assert spec.rho == 0.9 and cfg.reps == 10 and cfg.seed == 7
    assert cfg.estimators == ("plugin", "did")
    with pytest.raises(ValidationError):
        parse_config({"bogus": "1"})
    with pytest.raises(ValidationError):
        parse_config({"reps": "ten"})


def test_load_config(tmp_path):
    f = tmp_path / "mc.cfg"
    f.write_text("# two-period design\nn_treated = 40\nn_never = 60  # comment\nrho = 0.5\n")
    spec, cfg = load_config(f)
    assert spec.n_treated == 40 and spec.n_never == 60


def test_population_spec_validation():
    with pytest.raises(ValidationError):
        PopulationSpec(rho=1.5)
    with pytest.raises(ValidationError):
        PopulationSpec(kind="calibrated_null")


def test_run_mc_table_and_determinism():
    spec = PopulationSpec(n_treated=100, n_never=100, rho=0.8, gamma=0.3, seed=1)
    cfg = MCConfig(reps=50, seed=3)
    a = run_mc(spec, cfg)
    b = run_mc(spec, cfg)
    assert list(a.table.estimator) == ["plugin", "did", "dim"]
    assert a.to_csv() == b.to_csv()
    assert np.isclose(a.table.sd_ratio[0], 1.0)


def test_run_mc_thread_invariance():
    spec = PopulationSpec(n_treated=30, n_never=30, rho=0.5, gamma=0.0, seed=2)
    one = run_mc(spec, MCConfig(reps=6, seed=1, frt_draws=40, threads=1))
    many = run_mc(spec, MCConfig(reps=6, seed=1, frt_draws=40, threads=3))
    assert one.to_csv() == many.to_csv()
    for name in one.frt_p:
        assert np.array_equal(one.frt_p[name], many.frt_p[name])


def test_run_mc_matches_enumeration_mean():
    po = toy_population(4, {2.0: 3, NEVER: 3}, 2)
    p = po.template_panel()
    w = est.build_estimand("simple", p)
    adj = est.build_adjustment("cs_scalar", w, p)
    en = enumerate_moments(po, w, adj)
    res = run_mc(PopulationSpec(n_treated=3, n_never=3), MCConfig(reps=4000, seed=0, estimators=("did",)), po=po)
    sd = np.sqrt(en.variance(1.0)[0, 0])
    assert abs(res.estimates["did"].mean() - en.mean(1.0)[0]) < 4 * sd / np.sqrt(4000)


@pytest.mark.slow
def test_plugin_dominates_in_large_samples():
    for rho, gamma in [(0.99, 0.0), (0.5, 0.5), (0.0, 0.0)]:
        spec = PopulationSpec(n_treated=1000, n_never=1000, rho=rho, gamma=gamma, seed=11)
        t = run_mc(spec, MCConfig(reps=500, seed=5)).table.set_index("estimator")
        assert t.sd["plugin"] <= 1.02 * min(t.sd["did"], t.sd["dim"])
