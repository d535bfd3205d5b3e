"""Standard errors, confidence intervals, randomization tests and balance checks.

Standard errors are reported on the scale of the estimate, ``se = sigma / sqrt(N)``.
The Neyman variance drops the inestimable effect-heterogeneity term and is
therefore conservative; the refined variance subtracts the part of that term
explained by periods before the first cohort touched by the estimand.
"""

from __future__ import annotations

import math
import os
import warnings
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence, Union

import numpy as np
import scipy.stats

from . import estimands as est
from .estimator import (
    PRESETS,
    BatchResult,
    CohortStats,
    Design,
    Estimate,
    SingularCovarianceError,
    _solve_pd,
    cohort_stats,
    estimate,
    point_estimates,
    resolve_preset_beta,
    variance_components,
)
from .exceptions import NumericalError, UnidentifiedError, ValidationError
from .panel import PanelData

BLOCK = 64          # draws per independently seeded RNG block
TIE_RTOL = 1e-9     # |t_perm| within this relative distance of |t_obs| counts as a tie
MAX_REDRAW_SHARE = 0.10


class RefinementWarning(UserWarning):
    """Refined variance unavailable; the Neyman variance is reported instead."""


def default_threads() -> int:
    env = os.environ.get("STAGGERED_THREADS")
    if env:
        try:
            return max(1, int(env))
        except ValueError:
            raise ValidationError("STAGGERED_THREADS must be a positive integer")
    return os.cpu_count() or 1


def z_quantile(alpha: float) -> float:
    if not 0 < alpha < 1:
        raise ValidationError("alpha must lie in (0, 1)")
    return float(scipy.stats.norm.ppf(1 - alpha / 2))


def confidence_interval(theta, se, alpha: float = 0.05):
    """``theta -/+ z_{1-alpha/2} se`` (arrays broadcast)."""
    z = z_quantile(alpha)
    theta = np.asarray(theta, dtype=float)
    se = np.asarray(se, dtype=float)
    lo, hi = theta - z * se, theta + z * se
    if lo.ndim == 0:
        return float(lo), float(hi)
    return lo, hi


# ---------------------------------------------------------------- standard errors

def _neyman_var(stats, weights, adjustment, beta):
    vc = variance_components(stats, weights, adjustment)
    beta = np.asarray(beta, dtype=float).reshape(adjustment.dim, weights.n_components)
    var = np.diag(vc.neyman_cov(beta)).copy()
    scale = np.maximum(np.abs(np.diag(vc.V_theta0)), np.finfo(float).tiny)
    if np.any(var < -1e-12 * scale - 1e-300):
        raise NumericalError(f"negative Neyman variance {var.min():.3g}; inputs are not conformable")
    return np.maximum(var, 0.0)


def neyman_se(stats: CohortStats, weights, adjustment, beta) -> np.ndarray:
    """Conservative standard error(s) of ``theta_beta``, one per component."""
    return np.sqrt(_neyman_var(stats, weights, adjustment, beta))


def refined_se(stats: CohortStats, weights, adjustment, beta, g_min=None, *, info: Optional[dict] = None) -> np.ndarray:
    """Refined standard error(s).

    With ``M`` selecting periods before ``g_min`` and
    ``b_g = (M S_g M')^{-1} M S_g A_theta[g]'``, the refined variance is
    ``sigma*^2 - (sum_{g >= g_min} b_g)' M S_{g_min} M' (sum_{g >= g_min} b_g)``.
    Falls back to the Neyman value, with a ``RefinementWarning``, when
    ``g_min`` is the first period, some ``M S_g M'`` is singular, or the
    subtracted term is at least the Neyman variance.
    """
    var = _neyman_var(stats, weights, adjustment, beta)
    out = var.copy()
    N = stats.n_units
    fallback = []
    for k in range(weights.n_components):
        gm = weights.g_min(k) if g_min is None else g_min
        if gm is not None:
            early = [g for g in stats.cohorts if g < gm and np.any(weights.A_theta[g][k] != 0)]
            if early:
                raise ValidationError(f"estimand puts weight on cohort {early[0]:g} before g_min = {gm:g}")
        if gm is None or gm <= 1:
            warnings.warn(f"{weights.labels[k]}: no period precedes g_min; refined se equals Neyman se",
                          RefinementWarning, stacklevel=2)
            fallback.append(True)
            continue
        pk = int(gm) - 1
        s = np.zeros(pk)
        try:
            for g in stats.cohorts:
                row = weights.A_theta[g][k]
                if g < gm or not np.any(row != 0):
                    continue
                S = stats.cov(g)
                s += _solve_pd(S[:pk, :pk], S[:pk, :] @ row)
        except SingularCovarianceError:
            warnings.warn(f"{weights.labels[k]}: pre-period covariance singular; refined se equals Neyman se",
                          RefinementWarning, stacklevel=2)
            fallback.append(True)
            continue
        quad = s @ stats.cov(gm)[:pk, :pk] @ s
        if var[k] - quad / N <= 0:
            warnings.warn(f"{weights.labels[k]}: refinement exceeds the Neyman variance; refined se equals Neyman se",
                          RefinementWarning, stacklevel=2)
            fallback.append(True)
            continue
        out[k] = var[k] - quad / N
        fallback.append(False)
    if info is not None:
        info["refine_fallback"] = fallback
    return np.sqrt(out)


# ---------------------------------------------------------------- permutations

def _stratum_codes(panel: PanelData):
    if panel.stratum_id is None:
        return None
    _, codes = np.unique(panel.stratum_id.astype(str), return_inverse=True)
    return codes


def draw_permutations(rng: np.random.Generator, n: int, b: int, strata=None) -> np.ndarray:
    """``b`` uniform permutations of ``0..n-1`` (within strata when codes are given)."""
    base = np.tile(np.arange(n), (b, 1))
    if strata is None:
        return rng.permuted(base, axis=1)
    out = base.copy()
    for s in np.unique(strata):
        pos = np.flatnonzero(strata == s)
        out[:, pos] = rng.permuted(base[:, pos], axis=1)
    return out


def _studentize(theta, se):
    with np.errstate(divide="ignore", invalid="ignore"):
        t = np.where(se > 0, theta / np.where(se > 0, se, 1.0), np.where(theta == 0, 0.0, np.sign(theta) * np.inf))
    return t


def count_ge(draws: np.ndarray, observed: np.ndarray, rtol: float = TIE_RTOL) -> np.ndarray:
    """Per column, number of ``|draws| >= |observed|`` with near-ties counted."""
    a = np.abs(draws)
    o = np.abs(observed)
    thresh = np.where(np.isfinite(o), o - rtol * o, o)
    return np.sum(a >= thresh, axis=0)


@dataclass
class _Stratum:
    design: Design
    share: float
    positions: np.ndarray  # unit positions of the stratum within the full panel


def _stack_modes(results):
    """Join per-mode results along the component axis."""
    if not isinstance(results, list):
        return results
    r0 = results[0]
    B = r0.theta.shape[0]
    sizes = [r.theta.shape[1] for r in results]
    cov = np.zeros((B, sum(sizes), sum(sizes)))
    o = 0
    for r, k in zip(results, sizes):
        cov[:, o:o + k, o:o + k] = r.cov
        o += k
    return BatchResult(
        r0.theta0, r0.xhat, r0.beta,
        np.concatenate([r.theta for r in results], axis=1),
        cov,
        np.concatenate([r.var_neyman for r in results], axis=1),
        np.concatenate([r.var_refined for r in results], axis=1),
        np.concatenate([r.refine_fallback for r in results], axis=1),
        np.logical_and.reduce([r.valid for r in results]),
    )


class _Runner:
    """Evaluate an estimator for the observed and permuted assignments, pooled over strata."""

    def __init__(self, strata: Sequence[_Stratum], stat: str = "refined"):
        self.strata = list(strata)
        self.stat = stat

    def _pool(self, results):
        theta = sum(s.share * r.theta for s, r in zip(self.strata, results))
        var_n = sum(s.share ** 2 * r.var_neyman for s, r in zip(self.strata, results))
        var_r = sum(s.share ** 2 * r.var_refined for s, r in zip(self.strata, results))
        cov = sum(s.share ** 2 * r.cov for s, r in zip(self.strata, results))
        valid = np.logical_and.reduce([r.valid for r in results])
        return theta, var_n, var_r, cov, valid

    def t_stat(self, theta, var_n, var_r):
        return _studentize(theta, np.sqrt(var_r if self.stat == "refined" else var_n))

    def observed(self):
        res = [_stack_modes(s.design.evaluate(s.design.observed_indices())) for s in self.strata]
        return self._pool(res), res

    def draw(self, rng, b):
        res = []
        for s in self.strata:
            perms = draw_permutations(rng, s.design.N, b)
            res.append(_stack_modes(s.design.evaluate(s.design.indices_from_permutations(perms))))
        theta, var_n, var_r, _, valid = self._pool(res)
        return self.t_stat(theta, var_n, var_r), valid


def _frt_block(runner: _Runner, seed, block: int, size: int):
    rng = np.random.default_rng([*np.atleast_1d(seed).tolist(), block])
    t_out = None
    need = np.arange(size)
    redraws = 0
    while need.size:
        t, valid = runner.draw(rng, need.size)
        if t_out is None:
            t_out = np.empty((size, t.shape[1]))
        t_out[need[valid]] = t[valid]
        bad = need[~valid]
        redraws += bad.size
        if redraws > max(8, size):
            raise NumericalError(
                f"permutation block {block}: {redraws} draws had a singular Var(X); "
                "use a smaller adjustment vector"
            )
        need = bad
    return t_out, redraws


def _run_draws(runner: _Runner, draws: int, seed: int, threads: Optional[int]):
    """Permutation statistics (draws, K) with per-block seeding; identical for any thread count."""
    n_blocks = -(-draws // BLOCK)
    sizes = [min(BLOCK, draws - i * BLOCK) for i in range(n_blocks)]
    threads = default_threads() if threads is None else max(1, int(threads))
    jobs = [(runner, seed, i, sizes[i]) for i in range(n_blocks)]
    if threads == 1 or n_blocks == 1:
        out = [_frt_block(*j) for j in jobs]
    else:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            out = list(pool.map(lambda j: _frt_block(*j), jobs))
    redraws = sum(r for _, r in out)
    if redraws > MAX_REDRAW_SHARE * draws:
        raise NumericalError(
            f"{redraws} of {draws} permutation draws had a singular Var(X); "
            "use a smaller adjustment vector"
        )
    return np.concatenate([t for t, _ in out]), redraws


@dataclass
class FRTResult:
    p_value: np.ndarray     # (K,)
    t_observed: np.ndarray  # (K,)
    t_draws: np.ndarray     # (B, K)
    redraws: int
    draws: int
    seed: int


def _make_strata(panel: PanelData, builder: Callable, stratified: bool, refine=True):
    codes = _stratum_codes(panel) if stratified else None
    if codes is None:
        w, adj, beta = builder(panel)
        return [_Stratum(Design(panel, w, adj, beta, refine), 1.0, np.arange(panel.n_units))]
    out = []
    for s in np.unique(codes):
        pos = np.flatnonzero(codes == s)
        sub = panel.subset(pos)
        w, adj, beta = builder(sub)
        out.append(_Stratum(Design(sub, w, adj, beta, refine), pos.size / panel.n_units, pos))
    return out


def frt(panel: PanelData, weights=None, adjustment=None, beta="plugin", draws: int = 500, seed: int = 0,
        threads: Optional[int] = None, *, builder: Optional[Callable] = None, stratified: Optional[bool] = None,
        stat: str = "refined") -> FRTResult:
    """Studentized Fisher randomization test of ``theta = 0``.

    The statistic ``|theta_hat / se|`` is recomputed in full, including the
    plug-in coefficient and the refined se, for each random relabelling of
    first-treatment dates (within strata when the panel is stratified).
    ``p = (1 + #{|t_b| >= |t_obs|}) / (B + 1)``.

    Either pass ``weights``/``adjustment`` built on ``panel`` or a ``builder``
    mapping a (sub-)panel to ``(weights, adjustment, beta)``; the builder is
    required for stratified panels since weights depend on cohort sizes.
    """
    if draws < 1:
        raise ValidationError("number of FRT draws must be at least 1")
    if stratified is None:
        stratified = panel.stratum_id is not None
    if builder is None:
        if stratified:
            raise ValidationError("stratified FRT needs a builder so weights can be rebuilt per stratum")
        builder = lambda p: (weights, adjustment, beta)  # noqa: E731
    runner = _Runner(_make_strata(panel, builder, stratified), stat)
    (theta, var_n, var_r, _, valid), _ = runner.observed()
    if not valid.all():
        raise SingularCovarianceError("estimated Var(X) is numerically singular for the observed assignment")
    t_obs = runner.t_stat(theta, var_n, var_r)[0]
    t_draws, redraws = _run_draws(runner, draws, seed, threads)
    p = (1 + count_ge(t_draws, t_obs)) / (draws + 1)
    return FRTResult(p, t_obs, t_draws, redraws, draws, seed)


# ---------------------------------------------------------------- balance

def _adjustment_as_estimand(adj: est.AdjustmentSpec, panel: Optional[PanelData] = None) -> est.EstimandWeights:
    def label(j, row):
        if panel is None or len(row) != 1:
            return f"X_{j}"
        (t, g, gp), = row
        return f"tau({panel.period_label(t)},{panel.cohort_label(g)},{panel.cohort_label(gp)})"

    labels = tuple(label(j, row) for j, row in enumerate(adj.b))
    return est.EstimandWeights("balance", adj.b, labels, adj.cohorts, adj.n_periods, "custom")


@dataclass
class BalanceResult:
    labels: tuple
    xhat: np.ndarray
    se: np.ndarray
    t: np.ndarray
    p_t: np.ndarray
    p_frt: Optional[np.ndarray]
    joint_p: Optional[float]
    draws: int
    seed: int

    def to_dict(self):
        return {
            "components": [
                {"label": lbl, "xhat": float(x), "se": float(s), "t": float(t), "p_t": float(pt),
                 "p_frt": None if self.p_frt is None else float(pf)}
                for lbl, x, s, t, pt, pf in zip(
                    self.labels, self.xhat, self.se, self.t, self.p_t,
                    self.p_frt if self.p_frt is not None else [None] * len(self.labels))
            ],
            "joint_p": self.joint_p,
            "B": self.draws,
            "seed": self.seed,
        }


def balance_test(panel: PanelData, adjustment: est.AdjustmentSpec, draws: int = 500, seed: int = 0,
                 threads: Optional[int] = None) -> BalanceResult:
    """Test ``E[X] = 0`` component-wise and jointly.

    ``t_j = X_j / sqrt(Var_hat(X_j))`` with the cohort-covariance variance
    estimate; randomization p-values for each ``|t_j|`` and for
    ``max_j |t_j|`` use the same permutation draws.
    """
    if adjustment.dim == 0:
        raise ValidationError("adjustment has no components to test")
    w = _adjustment_as_estimand(adjustment, panel)
    none = est.AdjustmentSpec("none", (), panel.cohorts, panel.n_periods)
    design = Design(panel, w, none, np.zeros((0, w.n_components)), refine=False)
    runner = _Runner([_Stratum(design, 1.0, np.arange(panel.n_units))], stat="neyman")
    (theta, var_n, var_r, _, _), _ = runner.observed()
    xhat, se = theta[0], np.sqrt(var_n[0])
    t = _studentize(xhat, se)
    p_t = 2 * scipy.stats.norm.sf(np.abs(t))
    p_frt = joint = None
    if draws:
        t_draws, _ = _run_draws(runner, draws, seed, threads)
        p_frt = (1 + count_ge(t_draws, t)) / (draws + 1)
        jmax = np.max(np.abs(t_draws), axis=1)
        joint = float((1 + count_ge(jmax[:, None], np.array([np.max(np.abs(t))]))[0]) / (draws + 1))
    return BalanceResult(w.labels, xhat, se, t, p_t, p_frt, joint, draws, seed)


# ---------------------------------------------------------------- sup-t

def sup_t_critical_value(cov: np.ndarray, alpha: float = 0.05, draws: int = 100_000, seed: int = 0) -> float:
    """Simulated ``1 - alpha`` quantile of ``max_k |Z_k|`` for ``Z ~ N(0, corr(cov))``.

    Never below the pointwise normal critical value.
    """
    z = z_quantile(alpha)
    cov = np.atleast_2d(np.asarray(cov, dtype=float))
    d = np.sqrt(np.clip(np.diag(cov), 0, None))
    keep = d > 0
    if keep.sum() <= 1:
        return z
    corr = cov[np.ix_(keep, keep)] / np.outer(d[keep], d[keep])
    w, v = np.linalg.eigh((corr + corr.T) / 2)
    root = v * np.sqrt(np.clip(w, 0, None))
    rng = np.random.default_rng([seed, 7])
    Z = rng.standard_normal((draws, corr.shape[0])) @ root.T
    c = float(np.quantile(np.max(np.abs(Z), axis=1), 1 - alpha))
    return max(c, z)


# ---------------------------------------------------------------- pipeline

@dataclass(frozen=True)
class Plan:
    """What to estimate: estimand, comparison group, adjustment and coefficient preset.

    Presets fix the comparison and coefficient of the published estimators:
    ``cs``/``did`` use the never-treated cohort (not-yet-treated when absent)
    with coefficient 1, ``sa`` compares with the last-treated cohort,
    ``dchaisemartin`` is the lag-0 event study with not-yet-treated
    comparisons, ``dim`` sets the coefficient to zero and ``plugin`` estimates
    it.
    """

    estimand: str = "simple"
    lag: Optional[int] = None
    t: Optional[int] = None
    g: Optional[float] = None
    comparison: str = "auto"
    adjustment: str = "cs_scalar"
    preset: str = "plugin"
    exclude_cohorts: tuple = ()

    def __post_init__(self):
        if self.preset not in PRESETS:
            raise ValidationError(f"unknown preset {self.preset!r}; choose from {PRESETS}")
        if self.preset in ("cs", "did", "sa", "dchaisemartin") and self.adjustment != "cs_scalar":
            raise ValidationError(f"preset {self.preset!r} requires the cs_scalar adjustment")

    def resolved(self) -> "Plan":
        kw = {}
        if self.preset == "sa":
            kw["comparison"] = "last"
        elif self.preset == "dchaisemartin":
            kw.update(estimand="event_study", lag=0, comparison="not_yet")
        return Plan(**{**self.__dict__, **kw}) if kw else self

    def weights(self, panel: PanelData) -> est.EstimandWeights:
        p = self.resolved()
        return est.build_estimand(p.estimand, panel, lag=p.lag, t=p.t, g=p.g, comparison=p.comparison,
                                  exclude_cohorts=p.exclude_cohorts)

    def __call__(self, panel: PanelData):
        w = self.weights(panel)
        adj = est.build_adjustment(self.adjustment, w, panel)
        beta = self.beta_mode(adj, w.n_components)
        return w, adj, beta

    def beta_mode(self, adj, k):
        if self.preset == "plugin":
            return "plugin"
        return resolve_preset_beta(self.preset, adj, n_components=k)


@dataclass
class InferenceResult:
    """Estimate with standard errors, interval and randomization p-value.

    Array fields have one entry per estimand component.
    """

    estimand: str
    labels: tuple
    preset: str
    estimate: Optional[Estimate]
    theta_hat: np.ndarray
    se_neyman: np.ndarray
    se_refined: np.ndarray
    ci: tuple
    alpha: float
    frt_p: Optional[np.ndarray] = None
    frt_draws: int = 0
    seed: int = 0
    band: Optional[tuple] = None
    diagnostics: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        scalar = len(self.labels) == 1

        def val(a):
            if a is None:
                return None
            a = [float(x) for x in np.atleast_1d(a)]
            return a[0] if scalar else a

        out = {
            "estimand": self.estimand if scalar else list(self.labels),
            "preset": self.preset,
            "theta_hat": val(self.theta_hat),
            "se_neyman": val(self.se_neyman),
            "se_refined": val(self.se_refined),
            "ci": [val(self.ci[0]), val(self.ci[1])],
            "alpha": self.alpha,
            "frt_p": val(self.frt_p),
            "B": self.frt_draws,
            "seed": self.seed,
        }
        if self.band is not None:
            out["band"] = [val(self.band[0]), val(self.band[1])]
        out["diagnostics"] = self.diagnostics
        return out


def _to_jsonable(x):
    if isinstance(x, dict):
        return {str(k): _to_jsonable(v) for k, v in x.items()}
    if isinstance(x, (list, tuple)):
        return [_to_jsonable(v) for v in x]
    if isinstance(x, np.ndarray):
        return _to_jsonable(x.tolist())
    if isinstance(x, (np.floating, float)):
        x = float(x)
        return x if math.isfinite(x) else ("inf" if x > 0 else "-inf" if x < 0 else "nan")
    if isinstance(x, (np.integer,)):
        return int(x)
    if isinstance(x, (np.bool_,)):
        return bool(x)
    return x


def _point(panel, w, adj, beta_mode, preset_name):
    stats = cohort_stats(panel)
    theta0, xhat = point_estimates(stats, w, adj)
    vc = variance_components(stats, w, adj)
    if isinstance(beta_mode, str):
        beta = resolve_preset_beta("plugin", adj, vc)
    else:
        beta = np.asarray(beta_mode, dtype=float).reshape(adj.dim, w.n_components)
    e = estimate(theta0, xhat, beta, preset_name)
    info = {}
    with warnings.catch_warnings(record=True) as caught:
        warnings.simplefilter("always", RefinementWarning)
        se_n = neyman_se(stats, w, adj, beta)
        se_r = refined_se(stats, w, adj, beta, info=info)
    cov = vc.neyman_cov(beta)
    msgs = [str(c.message) for c in caught]
    return stats, e, se_n, se_r, cov, info.get("refine_fallback", []), msgs


def effective_rows(w: est.EstimandWeights, adj: est.AdjustmentSpec, beta: np.ndarray) -> dict:
    """Per-cohort rows ``A_theta[g] - beta' A_zero[g]`` of the adjusted estimator."""
    beta = np.asarray(beta, dtype=float).reshape(adj.dim, w.n_components)
    return {g: w.A_theta[g] - (beta.T @ adj.A_zero[g] if adj.dim else 0.0) for g in w.cohorts}


def joint_cov(stats: CohortStats, rows: Sequence[dict]) -> np.ndarray:
    """Neyman covariance of several adjusted estimators sharing one assignment."""
    R = {g: np.vstack([r[g] for r in rows]) for g in stats.cohorts}
    K = next(iter(R.values())).shape[0]
    V = np.zeros((K, K))
    for g in stats.cohorts:
        if np.any(R[g] != 0):
            V += R[g] @ stats.cov(g) @ R[g].T / stats.sizes[g]
    return (V + V.T) / 2


def infer(panel: PanelData, plan: Union[Plan, Callable] = Plan(), *, alpha: float = 0.05, frt_draws: int = 0,
          seed: int = 0, threads: Optional[int] = None, stratified: Optional[bool] = None,
          band: bool = False) -> InferenceResult:
    """Full pipeline: build, estimate, standard errors, interval, optional FRT and sup-t band.

    ``plan`` is a ``Plan`` or any callable mapping a panel to
    ``(weights, adjustment, beta)`` with ``beta`` ``"plugin"`` or an array.
    Stratified panels are analyzed stratum by stratum and pooled with weights
    ``N_s / N``; variances pool with weights ``(N_s / N)^2``.
    """
    z_quantile(alpha)
    if stratified is None:
        stratified = panel.stratum_id is not None
    preset = plan.preset if isinstance(plan, Plan) else "custom"
    diagnostics = {"N": panel.n_units, "T": panel.n_periods}
    if not stratified:
        w, adj, beta_mode = plan(panel)
        stats, e, se_n, se_r, cov, fallback, msgs = _point(panel, w, adj, beta_mode, preset)
        theta = e.theta_hat
        diagnostics.update({
            "beta": e.beta.reshape(-1) if adj.dim else [],
            "theta0": e.theta0,
            "xhat": e.xhat,
            "adjustment": adj.name,
            "M": adj.dim,
            "M_effective": int(len(adj.basis)),
            "comparison": w.comparison,
            "dropped_mass": list(w.dropped_mass),
            "g_min": [None if g is None else float(g) for g in (w.g_min(k) for k in range(w.n_components))],
            "refine_fallback": fallback,
        })
        labels, name, estimate_obj = w.labels, w.name, e
    else:
        codes = _stratum_codes(panel)
        theta = se_n2 = se_r2 = cov = 0.0
        per, msgs = [], []
        labels = name = None
        for s in np.unique(codes):
            pos = np.flatnonzero(codes == s)
            sub = panel.subset(pos)
            w, adj, beta_mode = plan(sub)
            if labels is not None and w.labels != labels:
                raise ValidationError("strata produce different estimand components; cannot pool")
            labels, name = w.labels, w.name
            _, e, sn, sr, cv, fb, m = _point(sub, w, adj, beta_mode, preset)
            share = pos.size / panel.n_units
            theta = theta + share * e.theta_hat
            se_n2 = se_n2 + share ** 2 * sn ** 2
            se_r2 = se_r2 + share ** 2 * sr ** 2
            cov = cov + share ** 2 * cv
            msgs += m
            per.append({"stratum": str(sub.stratum_id[0]), "N": int(pos.size), "share": share,
                        "theta_hat": e.theta_hat, "beta": e.beta.reshape(-1)})
        se_n, se_r = np.sqrt(se_n2), np.sqrt(se_r2)
        estimate_obj = None
        diagnostics["strata"] = per
    if msgs:
        diagnostics["warnings"] = msgs
    ci = confidence_interval(theta, se_r, alpha)
    result = InferenceResult(name, labels, preset, estimate_obj, np.atleast_1d(theta), se_n, se_r,
                             (np.atleast_1d(ci[0]), np.atleast_1d(ci[1])), alpha, seed=seed)
    if frt_draws:
        f = frt(panel, builder=plan, draws=frt_draws, seed=seed, threads=threads, stratified=stratified)
        result.frt_p, result.frt_draws = f.p_value, frt_draws
        diagnostics["frt_redraws"] = f.redraws
    if band and len(labels) > 1:
        c = sup_t_critical_value(cov, alpha, seed=seed)
        result.band = (theta - c * se_r, theta + c * se_r)
        diagnostics["sup_t_critical_value"] = c
    result.diagnostics = _to_jsonable(diagnostics)
    return result


# ---------------------------------------------------------------- event study

@dataclass
class EventStudyResult:
    """One row per event time; negative event times are placebo leads."""

    event_time: list
    theta_hat: np.ndarray
    se_neyman: np.ndarray
    se_refined: np.ndarray
    ci_lo: np.ndarray
    ci_hi: np.ndarray
    band_lo: np.ndarray
    band_hi: np.ndarray
    frt_p: Optional[np.ndarray]
    critical_value: float
    alpha: float
    omitted: list

    def to_frame(self):
        import pandas as pd

        df = pd.DataFrame({
            "event_time": self.event_time,
            "estimate": self.theta_hat,
            "se": self.se_refined,
            "se_neyman": self.se_neyman,
            "ci_lo": self.ci_lo,
            "ci_hi": self.ci_hi,
            "band_lo": self.band_lo,
            "band_hi": self.band_hi,
        })
        if self.frt_p is not None:
            df["frt_p"] = self.frt_p
        return df


def _lead_group(panel, j, plan: Plan):
    shifted = est.shift_for_placebo(panel, j)
    exclude = ()
    if plan.adjustment == "cs_scalar" and 1.0 in shifted.cohort_sizes:
        exclude = (1.0,)
    w = est.build_estimand("event_study", shifted, lag=0, comparison=plan.comparison, exclude_cohorts=exclude)
    w = est.EstimandWeights(w.name, w.a, (f"ES_-{j}",), w.cohorts, w.n_periods, w.comparison, w.dropped_mass)
    adj = est.build_adjustment(plan.adjustment, w, shifted)
    w, adj = est.unshift(w, adj, panel, j)
    return w, adj


def event_study(panel: PanelData, lags: Sequence[int] = (0,), leads: Sequence[int] = (), *,
                comparison: str = "auto", adjustment: str = "cs_scalar", preset: str = "plugin",
                alpha: float = 0.05, frt_draws: int = 0, seed: int = 0, threads: Optional[int] = None,
                band_draws: int = 100_000) -> EventStudyResult:
    """Event-study estimates at the requested lags and placebo leads with a sup-t band.

    Lags share one adjustment vector. Lead ``j`` is the lag-0 effect on the
    panel with first-treatment dates moved ``j`` periods earlier, adjusted with
    contrasts from before that placebo date. Unidentified event times are
    omitted with a warning. The band uses the correlation of all estimates
    and the refined standard errors.
    """
    if panel.stratum_id is not None:
        raise ValidationError("stratified event studies are not supported; run each stratum separately")
    if preset == "sa":
        comparison = "last"
    elif preset == "dchaisemartin":
        comparison = "not_yet"
    base = Plan(estimand="event_study", lag=0, comparison=comparison, adjustment=adjustment,
                preset="cs" if preset in ("sa", "dchaisemartin") else preset)
    groups, omitted = [], []
    with warnings.catch_warnings(record=True) as caught:
        warnings.simplefilter("always")
        try:
            w = est.build_event_study(panel, sorted(set(int(x) for x in lags)), comparison=comparison)
        except UnidentifiedError:
            w = None
    for c in caught:
        omitted.append(str(c.message))
        warnings.warn(str(c.message), stacklevel=2)
    if w is not None:
        groups.append((w, est.build_adjustment(adjustment, w, panel)))
    for j in sorted(set(int(x) for x in leads)):
        if j < 1:
            raise ValidationError("leads must be positive integers")
        try:
            groups.append(_lead_group(panel, j, base))
        except (UnidentifiedError, ValidationError) as exc:
            msg = f"lead {j} omitted: {exc}"
            omitted.append(msg)
            warnings.warn(msg, stacklevel=2)
    if not groups:
        raise UnidentifiedError("no requested event time is identified")

    stats = cohort_stats(panel)
    labels, theta, se_n, se_r, rows, pvals = [], [], [], [], [], []
    for w, adj in groups:
        mode = base.beta_mode(adj, w.n_components)
        _, e, sn, sr, _, _, _ = _point(panel, w, adj, mode, preset)
        labels += list(w.labels)
        theta.append(e.theta_hat)
        se_n.append(sn)
        se_r.append(sr)
        rows.append(effective_rows(w, adj, e.beta))
        if frt_draws:
            f = frt(panel, w, adj, mode, draws=frt_draws, seed=seed, threads=threads)
            pvals.append(f.p_value)
    theta, se_n, se_r = np.concatenate(theta), np.concatenate(se_n), np.concatenate(se_r)
    event_time = [int(lbl.split("_", 1)[1]) for lbl in labels]
    order = np.argsort(event_time, kind="stable")
    cov = joint_cov(stats, rows)
    c = sup_t_critical_value(cov, alpha, band_draws, seed)
    lo, hi = confidence_interval(theta, se_r, alpha)
    take = lambda a: np.asarray(a)[order]  # noqa: E731
    return EventStudyResult(
        event_time=[event_time[i] for i in order],
        theta_hat=take(theta),
        se_neyman=take(se_n),
        se_refined=take(se_r),
        ci_lo=take(lo),
        ci_hi=take(hi),
        band_lo=take(theta - c * se_r),
        band_hi=take(theta + c * se_r),
        frt_p=take(np.concatenate(pvals)) if pvals else None,
        critical_value=c,
        alpha=alpha,
        omitted=omitted,
    )
