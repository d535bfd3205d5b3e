"""Balanced panel data with a staggered, absorbing treatment.

Periods are re-indexed internally to ``1..T``; the original labels are kept in
``PanelData.periods`` for reporting. The first-treatment period of each unit is
stored as a float so that never-treated units can carry ``NEVER`` (``inf``) and
compare naturally with period indices (``g > t`` holds for every ``t``).
"""

from __future__ import annotations

import io
import os
import warnings
from dataclasses import dataclass, field, replace
from typing import Iterable, Optional, Union

import numpy as np
import pandas as pd

from .exceptions import ValidationError

NEVER = float("inf")

NEVER_TOKENS = frozenset({"", "inf", "+inf", "infinity", "never", "nan", "na"})

REQUIRED_COLUMNS = ("unit", "period", "first_treated", "outcome")


class PanelWarning(UserWarning):
    """Non-fatal finding about a panel (small cohorts, first-period cohorts...)."""


def _readonly(a):
    a = np.array(a, copy=True)
    a.flags.writeable = False
    return a


@dataclass(frozen=True, eq=False)
class PanelData:
    """Immutable balanced panel.

    Parameters
    ----------
    unit_ids : sequence
        Opaque unit identifiers, length N.
    periods : sequence of int
        Strictly increasing period labels, length T. Internally period ``t``
        (1-based) refers to ``periods[t - 1]``.
    outcomes : array of shape (N, T)
        ``outcomes[i, t - 1]`` is the observed outcome of unit ``i`` in period ``t``.
    first_treated : array of shape (N,)
        Internal index of the first treated period, or ``NEVER``.
    cluster_id, stratum_id : array of shape (N,), optional
        Assignment cluster and randomization stratum labels.
    """

    unit_ids: tuple
    periods: tuple
    outcomes: np.ndarray
    first_treated: np.ndarray
    cluster_id: Optional[np.ndarray] = None
    stratum_id: Optional[np.ndarray] = None
    _cohorts: tuple = field(init=False, repr=False)
    _sizes: dict = field(init=False, repr=False)

    def __post_init__(self):
        y = np.asarray(self.outcomes, dtype=float)
        if y.ndim != 2:
            raise ValidationError("outcomes must be a 2-d (units x periods) array")
        n, t = y.shape
        if not np.all(np.isfinite(y)):
            raise ValidationError("outcomes contain missing or non-finite values")
        g = np.asarray(self.first_treated, dtype=float)
        if g.shape != (n,):
            raise ValidationError("first_treated must have one entry per unit")
        finite = np.isfinite(g)
        if np.any(np.isnan(g)) or np.any(g[finite] != np.round(g[finite])) or np.any(g == -np.inf):
            raise ValidationError("first_treated must hold integer period indices or NEVER")
        if len(self.unit_ids) != n:
            raise ValidationError("unit_ids length does not match outcomes")
        periods = tuple(int(p) for p in self.periods)
        if len(periods) != t:
            raise ValidationError("periods length does not match outcomes")
        if any(b <= a for a, b in zip(periods, periods[1:])):
            raise ValidationError("period labels must be strictly increasing")
        object.__setattr__(self, "unit_ids", tuple(self.unit_ids))
        object.__setattr__(self, "periods", periods)
        object.__setattr__(self, "outcomes", _readonly(y))
        object.__setattr__(self, "first_treated", _readonly(g))
        for name in ("cluster_id", "stratum_id"):
            v = getattr(self, name)
            if v is not None:
                v = np.asarray(v, dtype=object)
                if v.shape != (n,):
                    raise ValidationError(f"{name} must have one entry per unit")
                object.__setattr__(self, name, _readonly(v))
        cohorts, counts = np.unique(g, return_counts=True)
        object.__setattr__(self, "_cohorts", tuple(float(c) for c in cohorts))
        object.__setattr__(self, "_sizes", {float(c): int(k) for c, k in zip(cohorts, counts)})

    @property
    def n_units(self) -> int:
        return self.outcomes.shape[0]

    @property
    def n_periods(self) -> int:
        return self.outcomes.shape[1]

    @property
    def cohorts(self) -> tuple:
        """Sorted distinct first-treatment values (``NEVER`` last when present)."""
        return self._cohorts

    @property
    def cohort_sizes(self) -> dict:
        return dict(self._sizes)

    @property
    def has_never(self) -> bool:
        return NEVER in self._sizes

    def cohort_members(self, g) -> np.ndarray:
        return np.flatnonzero(self.first_treated == g)

    def period_label(self, t):
        """Original label of internal period ``t`` (1-based)."""
        return self.periods[int(t) - 1]

    def cohort_label(self, g):
        if g == NEVER:
            return "never"
        g = int(g)
        if 1 <= g <= self.n_periods:
            return self.period_label(g)
        return f"index {g}"

    def period_index(self, label) -> int:
        """Internal index (1-based) of an original period label."""
        try:
            return self.periods.index(int(label)) + 1
        except (ValueError, TypeError):
            raise ValidationError(f"{label!r} is not a period label of the panel")

    def subset(self, rows) -> "PanelData":
        """Panel restricted to the given unit positions (order preserved)."""
        rows = np.asarray(rows)
        if rows.dtype == bool:
            rows = np.flatnonzero(rows)
        return PanelData(
            unit_ids=[self.unit_ids[i] for i in rows],
            periods=self.periods,
            outcomes=self.outcomes[rows],
            first_treated=self.first_treated[rows],
            cluster_id=None if self.cluster_id is None else self.cluster_id[rows],
            stratum_id=None if self.stratum_id is None else self.stratum_id[rows],
        )

    def with_first_treated(self, first_treated) -> "PanelData":
        return replace(self, first_treated=np.asarray(first_treated, dtype=float))

    def with_outcomes(self, outcomes) -> "PanelData":
        return replace(self, outcomes=np.asarray(outcomes, dtype=float))

    def to_frame(self) -> pd.DataFrame:
        """Long-format frame with the loader's column names."""
        n, t = self.outcomes.shape
        ft = []
        for g in self.first_treated:
            ft.append("never" if g == NEVER else self.cohort_label(g))
        data = {
            "unit": np.repeat(np.asarray(self.unit_ids, dtype=object), t),
            "period": np.tile(np.asarray(self.periods), n),
            "first_treated": np.repeat(np.asarray(ft, dtype=object), t),
            "outcome": self.outcomes.reshape(-1),
        }
        if self.cluster_id is not None:
            data["cluster"] = np.repeat(self.cluster_id, t)
        if self.stratum_id is not None:
            data["stratum"] = np.repeat(self.stratum_id, t)
        return pd.DataFrame(data)


@dataclass
class ValidationReport:
    errors: list
    warnings: list
    identified_set: list

    @property
    def ok(self) -> bool:
        return not self.errors


def identified_pairs(cohorts, n_periods: int) -> list:
    """(t, g) pairs whose ATE(t, g) is identified.

    With a never-treated cohort every ``g <= t <= T`` is identified; otherwise
    only periods before the last cohort starts treatment.
    """
    cohorts = sorted(cohorts)
    last = cohorts[-1] if cohorts else NEVER
    pairs = []
    for g in cohorts:
        if g == NEVER or g < 1:
            continue
        for t in range(int(g), n_periods + 1):
            if t < last:
                pairs.append((t, int(g)))
    return sorted(pairs)


def validate(panel: PanelData) -> ValidationReport:
    """Structural checks of the design assumptions that a single draw can reveal.

    Random timing and no anticipation cannot be verified from one assignment;
    see ``inference.balance_test`` and placebo event studies for partial checks.
    """
    errors, warns = [], []
    sizes = panel.cohort_sizes
    if len(sizes) < 2:
        errors.append("need at least two treatment-timing cohorts")
    if panel.n_periods < 1 or panel.n_units < 1:
        errors.append("panel is empty")
    for g, n_g in sizes.items():
        if g != NEVER and g > panel.n_periods:
            errors.append(f"cohort {g:g} lies after the last period")
        if n_g < 2:
            warns.append(
                f"cohort {panel.cohort_label(g)} has N_g = {n_g}: covariance S_g undefined; "
                "cohort unusable for plug-in adjustment"
            )
        if g == 1:
            warns.append("cohort treated in the first period contributes no pre-treatment comparisons")
        if g != NEVER and g < 1:
            warns.append(f"cohort at index {g:g} starts before the sample and is ineligible for estimands")
    if panel.cluster_id is not None:
        frame = pd.DataFrame({"c": panel.cluster_id, "g": panel.first_treated})
        spread = frame.groupby("c", sort=True)["g"].nunique()
        bad = list(spread.index[spread > 1])
        if bad:
            errors.append(f"clusters span several cohorts: {bad[:10]}")
    return ValidationReport(
        errors=errors,
        warnings=warns,
        identified_set=identified_pairs(panel.cohorts, panel.n_periods),
    )


def _parse_first_treated(value, period_set, max_period):
    token = str(value).strip()
    if token.lower() in NEVER_TOKENS:
        return NEVER
    try:
        num = float(token)
    except ValueError:
        raise ValidationError(f"first_treated value {token!r} is not a period label or never-treated marker")
    if num == float("inf"):
        return NEVER
    if num != int(num):
        raise ValidationError(f"first_treated value {token!r} is not an integer period label")
    label = int(num)
    if label in period_set:
        return label
    if label > max_period:
        # treated after the sample ends: indistinguishable from never treated
        return NEVER
    raise ValidationError(f"first_treated value {label} is not in the period range")


def load_panel(
    source: Union[str, os.PathLike, io.IOBase, pd.DataFrame],
    *,
    cluster_col: Optional[str] = "cluster",
    stratum_col: Optional[str] = "stratum",
    exclude_units: Optional[Iterable] = None,
    strict: bool = True,
) -> PanelData:
    """Read a long-format panel.

    The stream needs columns ``unit, period, first_treated, outcome``; the
    optional cluster and stratum columns are used when present (or required
    when named explicitly and absent from the default names).

    Raises
    ------
    ValidationError
        On duplicate (unit, period) rows, an unbalanced panel, missing
        outcomes, a unit whose ``first_treated`` varies over time, or a
        ``first_treated`` label outside the period range.
    """
    if isinstance(source, pd.DataFrame):
        df = source.copy()
        for col in ("unit", "first_treated"):
            if col in df:
                df[col] = df[col].astype(str).where(df[col].notna(), "")
    else:
        df = pd.read_csv(source, dtype=str, keep_default_na=False, encoding="utf-8")
    df.columns = [str(c).strip() for c in df.columns]
    missing = [c for c in REQUIRED_COLUMNS if c not in df.columns]
    if missing:
        raise ValidationError(f"missing required columns: {missing}")
    for name, default in ((cluster_col, "cluster"), (stratum_col, "stratum")):
        if name is not None and name not in df.columns and name != default:
            raise ValidationError(f"column {name!r} not found")
    cluster_col = cluster_col if cluster_col in df.columns else None
    stratum_col = stratum_col if stratum_col in df.columns else None

    df["unit"] = df["unit"].astype(str).str.strip()
    if exclude_units is not None:
        drop = {str(u).strip() for u in exclude_units}
        df = df[~df["unit"].isin(drop)]
    try:
        df["period"] = pd.to_numeric(df["period"], errors="raise").astype(float)
    except (ValueError, TypeError):
        raise ValidationError("period labels must be integers")
    if np.any(df["period"] != np.round(df["period"])):
        raise ValidationError("period labels must be integers")
    df["period"] = df["period"].astype(np.int64)
    outcome = pd.to_numeric(df["outcome"].replace("", np.nan), errors="coerce")
    if outcome.isna().any():
        raise ValidationError("missing or non-numeric outcome values")
    df["outcome"] = outcome.astype(float)

    dup = df.duplicated(["unit", "period"])
    if dup.any():
        first = df.loc[dup, ["unit", "period"]].iloc[0].tolist()
        raise ValidationError(f"duplicate (unit, period) row: {first}")
    units = np.sort(df["unit"].unique())
    periods = np.sort(df["period"].unique())
    if len(df) != len(units) * len(periods):
        raise ValidationError(
            f"unbalanced panel: {len(df)} rows for {len(units)} units x {len(periods)} periods"
        )
    wide = df.pivot(index="unit", columns="period", values="outcome").loc[units, periods]

    unit_level = df.groupby("unit", sort=True)
    if (unit_level["first_treated"].nunique() > 1).any():
        raise ValidationError("first_treated varies within a unit; treatment must be absorbing")
    period_set = set(int(p) for p in periods)
    index_of = {int(p): k + 1 for k, p in enumerate(periods)}
    raw_g = unit_level["first_treated"].first().loc[units]
    g = []
    for v in raw_g:
        label = _parse_first_treated(v, period_set, int(periods[-1]))
        g.append(NEVER if label == NEVER else float(index_of[label]))

    extras = {}
    for key, col in (("cluster_id", cluster_col), ("stratum_id", stratum_col)):
        if col is None:
            continue
        if (unit_level[col].nunique() > 1).any():
            raise ValidationError(f"{col} varies within a unit")
        extras[key] = unit_level[col].first().loc[units].to_numpy(dtype=object)

    panel = PanelData(
        unit_ids=tuple(units),
        periods=tuple(int(p) for p in periods),
        outcomes=wide.to_numpy(dtype=float),
        first_treated=np.asarray(g, dtype=float),
        **extras,
    )
    report = validate(panel)
    if strict and report.errors:
        raise ValidationError("; ".join(report.errors))
    for w in report.warnings:
        warnings.warn(w, PanelWarning, stacklevel=2)
    return panel


def read_unit_list(path) -> list:
    """One unit identifier per line; blank lines and ``#`` comments ignored."""
    with open(path, encoding="utf-8") as fh:
        return [ln.strip() for ln in fh if ln.strip() and not ln.lstrip().startswith("#")]


def collapse_clusters(panel: PanelData) -> PanelData:
    """Cluster-level panel with outcomes ``(F / N) * sum_{i in f} Y_it``.

    Average contrasts over the F cluster rows equal unit-level average
    contrasts, so every estimand keeps its meaning.
    """
    if panel.cluster_id is None:
        raise ValidationError("panel has no cluster identifiers")
    frame = pd.DataFrame({"c": panel.cluster_id, "g": panel.first_treated})
    if (frame.groupby("c")["g"].nunique() > 1).any():
        raise ValidationError("a cluster spans two cohorts; assignment is not clustered")
    labels, inverse = np.unique(panel.cluster_id.astype(str), return_inverse=True)
    n, f = panel.n_units, len(labels)
    sums = np.zeros((f, panel.n_periods))
    np.add.at(sums, inverse, panel.outcomes)
    first = np.full(f, -1)
    for i, c in enumerate(inverse):
        if first[c] < 0:
            first[c] = i
    stratum = None
    if panel.stratum_id is not None:
        sframe = pd.DataFrame({"c": inverse, "s": panel.stratum_id})
        if (sframe.groupby("c")["s"].nunique() > 1).any():
            raise ValidationError("a cluster spans two strata")
        stratum = panel.stratum_id[first]
    return PanelData(
        unit_ids=tuple(labels),
        periods=panel.periods,
        outcomes=sums * (f / n),
        first_treated=panel.first_treated[first],
        stratum_id=stratum,
    )


def aggregate_time(panel: PanelData, block: int) -> PanelData:
    """Average outcomes over consecutive blocks of ``block`` periods.

    A unit first treated inside block ``k`` is assigned first-treatment block
    ``k``; cohorts falling in the same block merge.
    """
    block = int(block)
    if block < 1:
        raise ValidationError("block must be a positive integer")
    n, t = panel.outcomes.shape
    if t % block:
        raise ValidationError(f"number of periods {t} is not divisible by block {block}")
    y = panel.outcomes.reshape(n, t // block, block).mean(axis=2)
    g = panel.first_treated.copy()
    finite = np.isfinite(g)
    g[finite] = np.floor((g[finite] - 1) / block) + 1
    return PanelData(
        unit_ids=panel.unit_ids,
        periods=panel.periods[::block],
        outcomes=y,
        first_treated=g,
        cluster_id=panel.cluster_id,
        stratum_id=panel.stratum_id,
    )


def exclude_units(panel: PanelData, unit_ids: Iterable) -> PanelData:
    drop = {str(u) for u in unit_ids}
    keep = [i for i, u in enumerate(panel.unit_ids) if str(u) not in drop]
    return panel.subset(keep)


def from_wide(outcomes, first_treated, periods=None, unit_ids=None, **kwargs) -> PanelData:
    """Build a panel from an (N, T) array with first-treatment period indices."""
    y = np.asarray(outcomes, dtype=float)
    n, t = y.shape
    if periods is None:
        periods = tuple(range(1, t + 1))
    if unit_ids is None:
        unit_ids = tuple(range(n))
    return PanelData(unit_ids=unit_ids, periods=periods, outcomes=y,
                     first_treated=np.asarray(first_treated, dtype=float), **kwargs)
