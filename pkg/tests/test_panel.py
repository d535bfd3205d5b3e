import io

import numpy as np
import pandas as pd
import pytest

from staggered.exceptions import ValidationError
from staggered.panel import (
    NEVER,
    PanelWarning,
    aggregate_time,
    collapse_clusters,
    exclude_units,
    from_wide,
    identified_pairs,
    load_panel,
    validate,
)


def _csv(rows, header="unit,period,first_treated,outcome"):
    return io.StringIO(header + "\n" + "\n".join(rows) + "\n")


def test_smallest_panel():
    with pytest.warns(PanelWarning):
        p = load_panel(_csv(["a,1,2,1.0", "a,2,2,2.0", "b,1,,0.5", "b,2,,0.7"]))
    assert p.n_units == 2 and p.n_periods == 2
    assert p.cohorts == (2.0, NEVER)
    assert p.cohort_sizes == {2.0: 1, NEVER: 1}
    assert np.isclose(p.outcomes[0, 1], 2.0)


def test_unbalanced_is_fatal():
    with pytest.raises(ValidationError, match="unbalanced"):
        load_panel(_csv(["a,1,2,1.0", "b,1,,0.5", "b,2,,0.7"]))


def test_duplicate_row_is_fatal():
    with pytest.raises(ValidationError, match="duplicate"):
        load_panel(_csv(["a,1,2,1", "a,1,2,1", "a,2,2,2", "b,1,,0", "b,2,,0"]))


def test_missing_outcome_is_fatal():
    with pytest.raises(ValidationError, match="missing"):
        load_panel(_csv(["a,1,2,", "a,2,2,2", "b,1,,0", "b,2,,0"]))


def test_first_treated_must_be_constant():
    with pytest.raises(ValidationError, match="varies"):
        load_panel(_csv(["a,1,2,1", "a,2,3,2", "b,1,,0", "b,2,,0"]))


def test_missing_columns():
    with pytest.raises(ValidationError, match="missing required columns"):
        load_panel(io.StringIO("unit,period,outcome\na,1,1\n"))


@pytest.mark.parametrize("token", ["", "Inf", "never", "NEVER", "inf"])
def test_never_tokens(token):
    rows = [f"a,1,2,1", "a,2,2,2", "c,1,2,1", "c,2,2,2", f"b,1,{token},0", f"b,2,{token},0",
            f"d,1,{token},0", f"d,2,{token},1"]
    p = load_panel(_csv(rows))
    assert p.cohort_sizes == {2.0: 2, NEVER: 2}


def test_arbitrary_period_labels_are_reindexed():
    rows = []
    for u, g in [("a", "201502"), ("b", "201502"), ("c", ""), ("d", "")]:
        for k, per in enumerate(["201501", "201502", "201503"]):
            rows.append(f"{u},{per},{g},{k + ord(u)}")
    p = load_panel(_csv(rows))
    assert p.periods == (201501, 201502, 201503)
    assert p.cohorts == (2.0, NEVER)
    assert p.period_label(2) == 201502
    assert p.period_index(201503) == 3


def test_label_after_last_period_means_never():
    rows = ["a,1,5,1", "a,2,5,2", "b,1,2,1", "b,2,2,3", "c,1,2,0", "c,2,2,1", "d,1,,0", "d,2,,2"]
    p = load_panel(_csv(rows))
    assert p.cohort_sizes == {2.0: 2, NEVER: 2}


def test_rows_order_does_not_matter():
    rows = ["b,2,,0.7", "a,1,2,1.0", "b,1,,0.5", "a,2,2,2.0", "c,1,2,3", "c,2,2,4", "d,2,,1", "d,1,,1"]
    p1 = load_panel(_csv(rows))
    p2 = load_panel(_csv(sorted(rows)))
    assert p1.unit_ids == p2.unit_ids
    assert np.array_equal(p1.outcomes, p2.outcomes)


def test_dataframe_source_and_exclusions():
    df = pd.DataFrame({
        "unit": list("aabbccdd"),
        "period": [1, 2] * 4,
        "first_treated": [2, 2, 2, 2, np.nan, np.nan, np.nan, np.nan],
        "outcome": np.arange(8.0),
    })
    p = load_panel(df)
    assert p.cohort_sizes == {2.0: 2, NEVER: 2}
    q = exclude_units(p, ["a"])
    assert q.n_units == 3
    with pytest.warns(PanelWarning):
        r = load_panel(df, exclude_units=["a"])
    assert r.unit_ids == ("b", "c", "d")


def test_identified_set_with_never():
    assert identified_pairs((2.0, 3.0, NEVER), 3) == [(2, 2), (3, 2), (3, 3)]


def test_identified_set_without_never():
    assert identified_pairs((2.0, 3.0), 3) == [(2, 2)]


def test_validate_warns_single_unit_cohort():
    p = from_wide(np.zeros((3, 2)), [2.0, NEVER, NEVER])
    rep = validate(p)
    assert rep.ok
    assert any("covariance S_g undefined; cohort unusable for plug-in adjustment" in w for w in rep.warnings)


def test_validate_needs_two_cohorts():
    p = from_wide(np.zeros((3, 2)), [2.0, 2.0, 2.0])
    assert not validate(p).ok


def test_cluster_spanning_cohorts_is_error():
    p = from_wide(np.zeros((4, 2)), [2.0, 2.0, NEVER, NEVER], cluster_id=np.array(["x", "x", "x", "y"]))
    assert not validate(p).ok


def test_collapse_singletons_is_identity():
    Y = np.arange(8.0).reshape(4, 2)
    p = from_wide(Y, [2.0, 2.0, NEVER, NEVER], cluster_id=np.array(["a", "b", "c", "d"]))
    c = collapse_clusters(p)
    assert np.allclose(c.outcomes, Y)


def test_collapse_two_clusters_hand_values():
    # N=4, F=2; cluster A = {u1, u2} with Y_t = (1, 3), cluster B = {u3, u4} with Y_t = (2, 2)
    Y = np.array([[1.0], [3.0], [2.0], [2.0]])
    p = from_wide(Y, [1.0, 1.0, NEVER, NEVER], cluster_id=np.array(["A", "A", "B", "B"]))
    c = collapse_clusters(p)
    assert np.allclose(c.outcomes[:, 0], [2.0, 2.0])
    assert np.isclose(c.outcomes.mean(), p.outcomes.mean())


def test_collapse_preserves_period_means():
    rng = np.random.default_rng(3)
    Y = rng.normal(size=(9, 3))
    p = from_wide(Y, [2.0] * 3 + [3.0] * 3 + [NEVER] * 3,
                  cluster_id=np.array(list("aabccdeff")))
    c = collapse_clusters(p)
    assert np.allclose(c.outcomes.mean(axis=0), Y.mean(axis=0))


def test_aggregate_time_identity_and_mean():
    Y = np.array([[1.0, 3.0], [2.0, 2.0]])
    p = from_wide(Y, [2.0, NEVER])
    assert np.array_equal(aggregate_time(p, 1).outcomes, Y)
    q = aggregate_time(p, 2)
    assert q.n_periods == 1
    assert np.isclose(q.outcomes[0, 0], 2.0)


def test_aggregate_time_monthly_to_yearly():
    rng = np.random.default_rng(0)
    G = np.r_[np.arange(2, 49, dtype=float).repeat(3), [NEVER] * 10]
    p = from_wide(rng.normal(size=(len(G), 72)), G)
    q = aggregate_time(p, 12)
    assert q.n_periods == 6
    assert len([g for g in q.cohorts if g != NEVER]) <= 6


def test_aggregate_time_commutes_with_cohort_means():
    rng = np.random.default_rng(1)
    G = np.array([3.0, 3.0, 5.0, 5.0, NEVER, NEVER])
    p = from_wide(rng.normal(size=(6, 6)), G)
    q = aggregate_time(p, 2)
    for g, gq in [(3.0, 2.0), (5.0, 3.0)]:
        m = p.outcomes[p.first_treated == g].mean(axis=0).reshape(3, 2).mean(axis=1)
        assert np.allclose(q.outcomes[q.first_treated == gq].mean(axis=0), m)


def test_aggregate_time_requires_divisible_block():
    p = from_wide(np.zeros((2, 5)), [2.0, NEVER])
    with pytest.raises(ValidationError):
        aggregate_time(p, 2)


def test_panel_arrays_are_read_only():
    p = from_wide(np.zeros((2, 2)), [2.0, NEVER])
    with pytest.raises(ValueError):
        p.outcomes[0, 0] = 1.0
