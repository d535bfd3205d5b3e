import warnings

import numpy as np
from hypothesis import given, settings, strategies as st

from staggered import estimands as est
from staggered.estimator import beta_star, cohort_stats, estimate, point_estimates, variance_components
from staggered.inference import RefinementWarning, neyman_se, refined_se
from staggered.panel import NEVER, from_wide

panels = st.builds(
    lambda seed, n2, n3, ninf, T: (seed, {2.0: n2, 3.0: n3, NEVER: ninf}, T),
    st.integers(0, 2 ** 31), st.integers(2, 8), st.integers(2, 8), st.integers(2, 8), st.integers(3, 5),
)


def _make(seed, sizes, T):
    rng = np.random.default_rng(seed)
    G = np.concatenate([[g] * n for g, n in sizes.items()])
    return from_wide(rng.normal(size=(len(G), T)) * rng.uniform(0.1, 10), G)


@settings(max_examples=60, deadline=None)
@given(panels, st.sampled_from(["simple", "calendar", "cohort"]))
def test_weights_sum_to_one(args, kind):
    w = est.build_estimand(kind, _make(*args))
    assert np.isclose(sum(w.a[0].values()), 1.0)


@settings(max_examples=60, deadline=None)
@given(panels, st.floats(-5, 5))
def test_refined_at_most_neyman(args, b):
    p = _make(*args)
    s = cohort_stats(p)
    w = est.build_estimand("simple", p)
    adj = est.build_adjustment("cs_scalar", w, p)
    beta = np.array([[b]])
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", RefinementWarning)
        assert refined_se(s, w, adj, beta)[0] <= neyman_se(s, w, adj, beta)[0] * (1 + 1e-12)


@settings(max_examples=60, deadline=None)
@given(panels, st.floats(0.01, 100), st.floats(-100, 100))
def test_plugin_scale_and_shift(args, scale, shift):
    p = _make(*args)
    w = est.build_estimand("simple", p)
    adj = est.build_adjustment("cs_scalar", w, p)

    def fit(q):
        s = cohort_stats(q)
        th, x = point_estimates(s, w, adj)
        return estimate(th, x, beta_star(variance_components(s, w, adj))).scalar()

    ref = fit(p)
    got = fit(p.with_outcomes(p.outcomes * scale + shift))
    assert np.isclose(got, scale * ref, rtol=1e-8, atol=1e-9 * scale * (1 + abs(shift)))
