"""Target-parameter and adjustment weight systems.

An estimand is a set of weights ``a[(t, g, g')]`` on cohort contrasts
``tau_{t, g g'} = mean_t(g) - mean_t(g')``. Compiling the weights yields one
``K x T`` row block ``A_theta[g]`` per cohort so that the sample analog is
``theta0 = sum_g A_theta[g] @ Ybar_g``. Adjustment vectors are built the same
way from pre-treatment contrasts (both cohorts untreated at ``t``), giving
``A_zero[g]`` blocks of shape ``M x T``.

Periods and cohorts are internal 1-based indices; ``NEVER`` is ``inf``.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field
from functools import cached_property
from typing import Iterable, Optional, Sequence

import numpy as np
import pandas as pd
import scipy.linalg

from .exceptions import UnidentifiedError, ValidationError
from .panel import NEVER, NEVER_TOKENS, PanelData

ESTIMAND_KINDS = ("simple", "calendar", "cohort", "event_study", "att_tg", "time", "group")
COMPARISONS = ("auto", "never", "not_yet", "last")
ADJUSTMENT_KINDS = ("cs_scalar", "all_pairs", "none")


class AdjustmentWarning(UserWarning):
    """Adjustment vector is large relative to the sample."""


def _compile(terms: Sequence[dict], cohorts, n_periods: int) -> dict:
    rows = {g: np.zeros((len(terms), n_periods)) for g in cohorts}
    for k, comp in enumerate(terms):
        for (t, g, gp), w in comp.items():
            rows[g][k, t - 1] += w
            rows[gp][k, t - 1] -= w
    for r in rows.values():
        r.flags.writeable = False
    return rows


def _fmt_cohort(g):
    return "inf" if g == NEVER else str(int(g))


@dataclass(frozen=True, eq=False)
class EstimandWeights:
    """Weights ``a[(t, g, g')]`` for one or more estimand components.

    Attributes
    ----------
    name : str
        Estimand kind, e.g. ``"simple"`` or ``"event_study"``.
    a : tuple of dict
        One sparse weight map per component.
    labels : tuple of str
        Component labels (``"ES_0"``, ``"ES_1"``... for event studies).
    dropped_mass : tuple of float
        Nominal weight that fell on unidentified pairs and was renormalized
        away (zero whenever a never-treated cohort exists).
    A_theta : dict
        Cohort -> ``K x T`` row block.
    """

    name: str
    a: tuple
    labels: tuple
    cohorts: tuple
    n_periods: int
    comparison: str = "never"
    dropped_mass: tuple = ()
    A_theta: dict = field(init=False, repr=False)

    def __post_init__(self):
        object.__setattr__(self, "a", tuple(dict(c) for c in self.a))
        if not self.dropped_mass:
            object.__setattr__(self, "dropped_mass", (0.0,) * len(self.a))
        for comp in self.a:
            for (t, g, gp) in comp:
                if g not in self.cohorts or gp not in self.cohorts:
                    raise ValidationError(f"weight on ({t}, {g}, {gp}) references a cohort not in the panel")
                if not 1 <= t <= self.n_periods:
                    raise ValidationError(f"weight on period {t} outside 1..{self.n_periods}")
        object.__setattr__(self, "A_theta", _compile(self.a, self.cohorts, self.n_periods))

    @property
    def n_components(self) -> int:
        return len(self.a)

    def evaluate(self, means: dict) -> np.ndarray:
        """Apply the weights to per-cohort mean vectors (population or sample)."""
        out = np.zeros(self.n_components)
        for k, comp in enumerate(self.a):
            for (t, g, gp), w in comp.items():
                out[k] += w * (means[g][t - 1] - means[gp][t - 1])
        return out

    def g_min(self, k: int = 0):
        """Earliest cohort whose row block is nonzero for component ``k``."""
        active = [g for g in self.cohorts if np.any(self.A_theta[g][k] != 0)]
        return min(active) if active else None

    def component(self, k: int) -> "EstimandWeights":
        return EstimandWeights(self.name, (self.a[k],), (self.labels[k],), self.cohorts,
                               self.n_periods, self.comparison, (self.dropped_mass[k],))

    def to_frame(self) -> pd.DataFrame:
        rows = []
        for k, comp in enumerate(self.a):
            for (t, g, gp), w in sorted(comp.items()):
                rows.append((self.labels[k], t, g, gp, w))
        return pd.DataFrame(rows, columns=["component", "t", "g", "g_prime", "weight"])


@dataclass(frozen=True, eq=False)
class AdjustmentSpec:
    """Pre-treatment contrasts ``X_j = sum b^j[(t, g, g')] tau_{t, g g'}``.

    ``preset_beta`` (``M x K``) holds the coefficient that reproduces the
    matching published estimator when it exists (``cs_scalar``); ``basis``
    lists rows that are structurally linearly independent, which is where the
    plug-in coefficient is estimated.
    """

    name: str
    b: tuple
    cohorts: tuple
    n_periods: int
    preset_beta: Optional[np.ndarray] = None
    A_zero: dict = field(init=False, repr=False)

    def __post_init__(self):
        object.__setattr__(self, "b", tuple(dict(r) for r in self.b))
        for j, row in enumerate(self.b):
            for (t, g, gp) in row:
                if not (g > t and gp > t):
                    raise ValidationError(
                        f"adjustment row {j} uses tau_({t},{_fmt_cohort(g)},{_fmt_cohort(gp)}); "
                        "both cohorts must be untreated at t"
                    )
                if g not in self.cohorts or gp not in self.cohorts:
                    raise ValidationError(f"adjustment row {j} references a cohort not in the panel")
        if self.preset_beta is not None:
            pb = np.asarray(self.preset_beta, dtype=float)
            if pb.ndim != 2 or pb.shape[0] != len(self.b):
                raise ValidationError("preset_beta must have one row per adjustment component")
            pb.flags.writeable = False
            object.__setattr__(self, "preset_beta", pb)
        object.__setattr__(self, "A_zero", _compile(self.b, self.cohorts, self.n_periods))

    @property
    def dim(self) -> int:
        return len(self.b)

    def stacked(self) -> np.ndarray:
        """``M x (|G| T)`` matrix mapping stacked cohort means to X."""
        if not self.cohorts:
            return np.zeros((self.dim, 0))
        return np.hstack([self.A_zero[g] for g in self.cohorts])

    @cached_property
    def basis(self) -> np.ndarray:
        """Indices of a maximal structurally independent subset of rows.

        Rows that are exact linear combinations of other rows for every
        possible data set (e.g. ``tau_{t,ab} = tau_{t,ac} - tau_{t,bc}``) make
        ``Var(X)`` singular whatever the outcomes; they are chosen out here by
        a pivoted QR of the design alone.
        """
        if self.dim == 0:
            return np.zeros(0, dtype=int)
        B = self.stacked()
        _, r, piv = scipy.linalg.qr(B.T, mode="economic", pivoting=True)
        d = np.abs(np.diag(r))
        tol = max(B.shape) * np.finfo(float).eps * (d[0] if d.size else 0.0)
        rank = int(np.sum(d > tol))
        return np.sort(piv[:rank])

    def evaluate(self, means: dict) -> np.ndarray:
        out = np.zeros(self.dim)
        for j, row in enumerate(self.b):
            for (t, g, gp), w in row.items():
                out[j] += w * (means[g][t - 1] - means[gp][t - 1])
        return out


# ---------------------------------------------------------------- comparisons

def resolve_comparison(panel: PanelData, comparison: str = "auto") -> str:
    if comparison not in COMPARISONS:
        raise ValidationError(f"unknown comparison {comparison!r}; choose from {COMPARISONS}")
    if comparison == "auto":
        return "never" if panel.has_never else "not_yet"
    if comparison == "never" and not panel.has_never:
        raise ValidationError("comparison 'never' requires a never-treated cohort")
    return comparison


def comparison_weights(t: int, sizes: dict, comparison: str) -> Optional[dict]:
    """Weights over comparison cohorts for period ``t``; ``None`` if none is untreated."""
    if comparison == "never":
        return {NEVER: 1.0} if NEVER in sizes else None
    if comparison == "last":
        last = max(sizes)
        return {last: 1.0} if last > t else None
    later = {g: n for g, n in sizes.items() if g > t}
    if not later:
        return None
    total = sum(later.values())
    return {g: n / total for g, n in sorted(later.items())}


def _eligible(panel: PanelData, exclude=()):
    return [g for g in panel.cohorts if g != NEVER and 1 <= g <= panel.n_periods and g not in exclude]


def _assemble(groups, panel, comparison):
    """Restrict nested (outer weight, {(t, g): inner weight}) groups to identified pairs.

    Inner weights are renormalized within each group, empty groups are dropped
    and outer weights renormalized. Returns the term map and the nominal mass
    that fell on unidentified pairs.
    """
    sizes = panel.cohort_sizes
    kept, dropped, missing = [], 0.0, []
    total_outer = sum(w for w, _ in groups)
    for w_outer, inner in groups:
        w_outer /= total_outer
        s_inner = sum(inner.values())
        ok = {}
        for (t, g), w in inner.items():
            cw = comparison_weights(t, sizes, comparison)
            if cw is None:
                dropped += w_outer * w / s_inner
                missing.append((t, g))
            else:
                ok[(t, g)] = (w, cw)
        if ok:
            kept.append((w_outer, ok))
    if not kept:
        raise UnidentifiedError("estimand has no identified (t, g) pairs", missing)
    terms = {}
    outer_total = sum(w for w, _ in kept)
    for w_outer, ok in kept:
        s = sum(w for w, _ in ok.values())
        for (t, g), (w, cw) in ok.items():
            for gp, c in cw.items():
                key = (t, g, gp)
                terms[key] = terms.get(key, 0.0) + (w_outer / outer_total) * (w / s) * c
    return terms, dropped, missing


def _groups(kind, panel, *, lag=None, t=None, g=None, exclude=()):
    T = panel.n_periods
    sizes = panel.cohort_sizes
    cohorts = _eligible(panel, exclude)
    gi = [int(c) for c in cohorts]
    if kind == "simple":
        return [(1.0, {(s, c): sizes[c] for c in cohorts for s in range(int(c), T + 1)})]
    if kind == "event_study":
        if lag is None or int(lag) < 0:
            raise ValidationError("event_study needs a non-negative lag")
        inner = {(c + int(lag), c): sizes[float(c)] for c in gi if c + int(lag) <= T}
        return [(1.0, inner)] if inner else []
    if kind == "time":
        if t is None or not 1 <= int(t) <= T:
            raise ValidationError("time estimand needs a period index in 1..T")
        inner = {(int(t), c): sizes[float(c)] for c in gi if c <= int(t)}
        return [(1.0, inner)] if inner else []
    if kind == "group":
        if g is None or float(g) not in cohorts:
            raise ValidationError(f"group estimand needs an eligible cohort, got {g!r}")
        c = int(g)
        return [(1.0, {(s, c): 1.0 for s in range(c, T + 1)})]
    if kind == "att_tg":
        if t is None or g is None or float(g) not in cohorts or not int(g) <= int(t) <= T:
            raise ValidationError("att_tg needs an eligible cohort g and a period t with g <= t <= T")
        return [(1.0, {(int(t), int(g)): 1.0})]
    if kind == "calendar":
        out = []
        for s in range(1, T + 1):
            inner = {(s, c): sizes[float(c)] for c in gi if c <= s}
            if inner:
                out.append((1.0, inner))
        return out
    if kind == "cohort":
        return [(sizes[float(c)], {(s, c): 1.0 for s in range(c, T + 1)}) for c in gi]
    raise ValidationError(f"unknown estimand kind {kind!r}; choose from {ESTIMAND_KINDS}")


def _label(kind, lag=None, t=None, g=None):
    if kind == "event_study":
        return f"ES_{int(lag)}"
    if kind == "time":
        return f"theta_t{int(t)}"
    if kind == "group":
        return f"theta_g{int(g)}"
    if kind == "att_tg":
        return f"ATE({int(t)},{int(g)})"
    return kind


def build_estimand(
    kind: str,
    panel: PanelData,
    *,
    lag: Optional[int] = None,
    t: Optional[int] = None,
    g=None,
    comparison: str = "auto",
    exclude_cohorts: Iterable = (),
    strict: bool = False,
) -> EstimandWeights:
    """Compile a named aggregate of ``ATE(t, g)``.

    Parameters
    ----------
    kind : str
        ``simple``, ``calendar``, ``cohort``, ``event_study`` (needs ``lag``),
        ``time`` (needs ``t``), ``group`` (needs ``g``) or ``att_tg``.
    panel : PanelData
    comparison : {"auto", "never", "not_yet", "last"}
        Comparison cohort(s) defining ``ATE(t, g)``. ``auto`` uses the
        never-treated cohort when present and the not-yet-treated average
        otherwise.
    strict : bool
        Raise instead of renormalizing when some required pairs are not
        identified. ``att_tg`` is always strict.

    Notes
    -----
    Without a never-treated cohort, pairs with ``t >= max G`` have no valid
    comparison. Such pairs are dropped inside each displayed sum, the weights
    renormalized, and the nominal mass removed is stored in ``dropped_mass``.
    ``calendar`` averages ``theta_t`` over periods where some cohort is treated.
    """
    comparison = resolve_comparison(panel, comparison)
    exclude = {float(c) for c in exclude_cohorts}
    groups = _groups(kind, panel, lag=lag, t=t, g=g, exclude=exclude)
    if not groups:
        raise UnidentifiedError(f"{_label(kind, lag, t, g)}: no cohort contributes")
    terms, dropped, missing = _assemble(groups, panel, comparison)
    if missing and (strict or kind == "att_tg"):
        raise UnidentifiedError(
            f"{_label(kind, lag, t, g)} requires unidentified pairs {sorted(missing)}", missing
        )
    return EstimandWeights(
        name=kind,
        a=(terms,),
        labels=(_label(kind, lag, t, g),),
        cohorts=panel.cohorts,
        n_periods=panel.n_periods,
        comparison=comparison,
        dropped_mass=(dropped,),
    )


def build_event_study(
    panel: PanelData,
    lags: Iterable[int],
    *,
    comparison: str = "auto",
    exclude_cohorts: Iterable = (),
    skip_unidentified: bool = True,
) -> EstimandWeights:
    """Stack several event-study lags into one vector estimand.

    Lags with no identified pair are skipped with a warning (or raise when
    ``skip_unidentified`` is false).
    """
    comps, labels, dropped = [], [], []
    comparison = resolve_comparison(panel, comparison)
    for lag in lags:
        try:
            w = build_estimand("event_study", panel, lag=lag, comparison=comparison,
                               exclude_cohorts=exclude_cohorts)
        except UnidentifiedError as exc:
            if not skip_unidentified:
                raise
            warnings.warn(f"lag {lag} omitted: {exc}", stacklevel=2)
            continue
        comps.append(w.a[0])
        labels.append(w.labels[0])
        dropped.append(w.dropped_mass[0])
    if not comps:
        raise UnidentifiedError("no requested lag is identified")
    return EstimandWeights("event_study", tuple(comps), tuple(labels), panel.cohorts,
                           panel.n_periods, comparison, tuple(dropped))


def combine_estimands(parts: Sequence[EstimandWeights], name: str = "custom") -> EstimandWeights:
    """Stack the components of several estimands built on the same panel."""
    first = parts[0]
    for p in parts[1:]:
        if p.cohorts != first.cohorts or p.n_periods != first.n_periods:
            raise ValidationError("estimands were built on different panels")
    return EstimandWeights(
        name,
        tuple(c for p in parts for c in p.a),
        tuple(lbl for p in parts for lbl in p.labels),
        first.cohorts,
        first.n_periods,
        first.comparison,
        tuple(d for p in parts for d in p.dropped_mass),
    )


def custom_estimand(panel: PanelData, weights: dict, name: str = "custom") -> EstimandWeights:
    """Estimand from an explicit map ``(t, g, g') -> a`` in internal indices.

    Weights on periods before both cohorts are treated are zero under no
    anticipation and are dropped.
    """
    terms = {}
    for (t, g, gp), w in weights.items():
        t, g, gp = int(t), float(g), float(gp)
        if t < min(g, gp) or w == 0:
            continue
        terms[(t, g, gp)] = terms.get((t, g, gp), 0.0) + float(w)
    if not terms:
        raise ValidationError("custom estimand has no nonzero post-treatment weights")
    return EstimandWeights(name, (terms,), (name,), panel.cohorts, panel.n_periods, "custom")


def _read_triples(panel: PanelData, source):
    df = pd.read_csv(source, dtype=str, keep_default_na=False)
    df.columns = [c.strip() for c in df.columns]
    need = {"t", "g", "g_prime", "weight"}
    if not need <= set(df.columns):
        raise ValidationError(f"weight file needs columns {sorted(need)}")
    index_of = {p: k + 1 for k, p in enumerate(panel.periods)}

    def period(v):
        try:
            return index_of[int(float(v))]
        except (KeyError, ValueError):
            raise ValidationError(f"{v!r} is not a period label of the panel")

    def cohort(v):
        return NEVER if str(v).strip().lower() in NEVER_TOKENS else float(period(v))

    rows = []
    for rec in df.to_dict("records"):
        rows.append((rec.get("row", "0"), period(rec["t"]), cohort(rec["g"]),
                     cohort(rec["g_prime"]), float(rec["weight"])))
    return rows


def load_custom_estimand(panel: PanelData, source, name: str = "custom") -> EstimandWeights:
    """Read ``t,g,g_prime,weight`` rows (period labels; ``g_prime`` may be never)."""
    weights = {}
    for _, t, g, gp, w in _read_triples(panel, source):
        weights[(t, g, gp)] = weights.get((t, g, gp), 0.0) + w
    return custom_estimand(panel, weights, name)


def load_custom_adjustment(panel: PanelData, source) -> AdjustmentSpec:
    """Read ``[row,]t,g,g_prime,weight`` rows into an adjustment with one row per ``row`` id."""
    rows = {}
    for j, t, g, gp, w in _read_triples(panel, source):
        r = rows.setdefault(j, {})
        r[(t, g, gp)] = r.get((t, g, gp), 0.0) + w
    return AdjustmentSpec("custom", tuple(rows.values()), panel.cohorts, panel.n_periods)


# ---------------------------------------------------------------- adjustments

def _dedupe(rows):
    """Drop exact duplicate rows; return unique rows and each input's position."""
    unique, where = [], []
    for r in rows:
        key = {k: v for k, v in r.items() if v != 0}
        for j, u in enumerate(unique):
            if u.keys() == key.keys() and all(math.isclose(u[k], key[k], rel_tol=0, abs_tol=1e-15) for k in key):
                where.append(j)
                break
        else:
            unique.append(key)
            where.append(len(unique) - 1)
    return unique, where


def build_adjustment(kind: str, estimand: EstimandWeights, panel: PanelData) -> AdjustmentSpec:
    """Compile the adjustment vector X.

    ``cs_scalar``
        Each estimand term ``a (t, g, g')`` contributes ``a tau_{m-1, g g'}``
        with ``m = min(g, g')``: the pre-period difference that the matching
        published estimator subtracts (never-treated, not-yet-treated or
        last-cohort comparison, following the estimand). One row per
        component; ``preset_beta`` is the identity map.
    ``all_pairs``
        One row ``tau_{t, g g'}`` for every ``t`` and cohort pair
        ``g < g'`` with ``t < g``, ordered by ``t``, ``g``, ``g'``.
    ``none``
        Empty adjustment (difference in means).
    """
    cohorts, T = panel.cohorts, panel.n_periods
    if kind == "none":
        return AdjustmentSpec("none", (), cohorts, T, np.zeros((0, estimand.n_components)))
    if kind == "cs_scalar":
        rows = []
        for comp in estimand.a:
            row = {}
            for (t, g, gp), w in comp.items():
                m = min(g, gp)
                if m <= 1:
                    raise ValidationError(
                        f"cs_scalar needs period g-1 but the estimand uses cohort {_fmt_cohort(m)} "
                        "treated in the first period"
                    )
                key = (int(m) - 1, g, gp)
                row[key] = row.get(key, 0.0) + w
            rows.append(row)
        unique, where = _dedupe(rows)
        beta = np.zeros((len(unique), len(rows)))
        for k, j in enumerate(where):
            beta[j, k] = 1.0
        return AdjustmentSpec("cs_scalar", tuple(unique), cohorts, T, beta)
    if kind == "all_pairs":
        eligible = sorted(c for c in cohorts if c >= 1)
        rows = []
        for t in range(1, T + 1):
            later = [c for c in eligible if c > t]
            for i, g in enumerate(later):
                for gp in later[i + 1:]:
                    rows.append({(t, g, gp): 1.0})
        if not rows:
            raise ValidationError("no pre-treatment cohort pairs are available for all_pairs")
        spec = AdjustmentSpec("all_pairs", tuple(rows), cohorts, T)
        rank = len(spec.basis)
        if rank > math.sqrt(panel.n_units):
            warnings.warn(
                f"all_pairs has M = {spec.dim} contrasts ({rank} linearly independent) against "
                f"N = {panel.n_units} units; adjustment vectors much larger than sqrt(N) tend to overfit",
                AdjustmentWarning,
                stacklevel=2,
            )
        return spec
    raise ValidationError(f"unknown adjustment kind {kind!r}; choose from {ADJUSTMENT_KINDS}")


# ---------------------------------------------------------------- placebo

def shift_for_placebo(panel: PanelData, k: int) -> PanelData:
    """Pretend treatment started ``k`` periods earlier (``G - k``; never stays never).

    Cohorts pushed to index ``< 1`` stay in the panel (their units are still
    part of the randomization) but are ineligible as treated cohorts.
    """
    if int(k) != k or k < 1:
        raise ValidationError("placebo shift k must be a positive integer")
    g = panel.first_treated
    finite = np.isfinite(g)
    if finite.any() and np.all(g[finite] - k < 1):
        raise ValidationError(f"shifting by {k} moves every cohort before the first period")
    if not finite.any():
        raise ValidationError("panel has no treated cohort to shift")
    shifted = np.where(finite, g - k, g)
    return panel.with_first_treated(shifted)


def _shift_key(key, k):
    t, g, gp = key
    return (t, g + k if g != NEVER else g, gp + k if gp != NEVER else gp)


def unshift(weights: EstimandWeights, adjustment: AdjustmentSpec, panel: PanelData, k: int):
    """Map weights built on ``shift_for_placebo(panel, k)`` back to ``panel``'s cohorts.

    The result describes the same contrasts of cohort means, so placebo
    components can share cohort statistics (and a joint covariance) with
    ordinary components.
    """
    a = tuple({_shift_key(key, k): w for key, w in comp.items()} for comp in weights.a)
    b = tuple({_shift_key(key, k): w for key, w in row.items()} for row in adjustment.b)
    ew = EstimandWeights(weights.name, a, weights.labels, panel.cohorts, panel.n_periods,
                         weights.comparison, weights.dropped_mass)
    adj = AdjustmentSpec(adjustment.name, b, panel.cohorts, panel.n_periods, adjustment.preset_beta)
    return ew, adj


def combine_adjustments(parts: Sequence[AdjustmentSpec], component_counts: Sequence[int]) -> AdjustmentSpec:
    """Stack adjustments of stacked estimands; preset coefficients become block diagonal."""
    first = parts[0]
    rows, blocks = [], []
    for p in parts:
        rows.extend(p.b)
    unique, where = _dedupe(rows)
    have_preset = all(p.preset_beta is not None for p in parts)
    beta = None
    if have_preset:
        beta = np.zeros((len(unique), sum(component_counts)))
        r0, c0 = 0, 0
        for p, kc in zip(parts, component_counts):
            for j in range(p.dim):
                beta[where[r0 + j], c0:c0 + kc] += p.preset_beta[j]
            r0 += p.dim
            c0 += kc
    name = first.name if all(p.name == first.name for p in parts) else "custom"
    return AdjustmentSpec(name, tuple(unique), first.cohorts, first.n_periods, beta)
