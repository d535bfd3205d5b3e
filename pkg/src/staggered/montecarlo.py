"""Simulation designs, exhaustive enumeration and the Monte Carlo runner.

A ``PotentialOutcomes`` object is a complete science table: one ``N x T``
outcome matrix per cohort. Randomness comes only from which units are
assigned to which cohort, with cohort sizes fixed. On small populations every
assignment can be enumerated, which gives exact means and variances of any
estimator; on larger ones ``run_mc`` draws assignments at random.
"""

from __future__ import annotations

import configparser
import itertools
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, fields
from typing import Optional, Sequence

import numpy as np
import pandas as pd

from . import estimands as est
from .estimator import Design
from .exceptions import ValidationError
from .inference import (
    Plan,
    _Runner,
    _run_draws,
    _stack_modes,
    _Stratum,
    _studentize,
    count_ge,
    default_threads,
    draw_permutations,
    z_quantile,
)
from .panel import NEVER, PanelData, load_panel

MAX_ENUMERATION = 10 ** 6


@dataclass(frozen=True)
class PotentialOutcomes:
    """Known potential outcomes ``Y[g]`` (N x T) for every cohort ``g``.

    ``sizes`` fixes how many units each assignment places in each cohort.
    """

    Y: dict
    sizes: dict
    periods: tuple = ()

    def __post_init__(self):
        shapes = {np.shape(y) for y in self.Y.values()}
        if len(shapes) != 1:
            raise ValidationError("all potential-outcome tables must share one shape")
        if set(self.Y) != set(self.sizes):
            raise ValidationError("potential outcomes and cohort sizes list different cohorts")
        n, t = shapes.pop()
        if sum(self.sizes.values()) != n:
            raise ValidationError("cohort sizes do not add up to the number of units")
        object.__setattr__(self, "Y", {float(g): np.asarray(y, dtype=float) for g, y in self.Y.items()})
        object.__setattr__(self, "sizes", {float(g): int(k) for g, k in sorted(self.sizes.items())})
        if not self.periods:
            object.__setattr__(self, "periods", tuple(range(1, t + 1)))

    @property
    def cohorts(self) -> tuple:
        return tuple(sorted(self.sizes))

    @property
    def n_units(self) -> int:
        return next(iter(self.Y.values())).shape[0]

    @property
    def n_periods(self) -> int:
        return next(iter(self.Y.values())).shape[1]

    def no_anticipation_gap(self) -> float:
        """Largest ``|Y_it(g) - Y_it(g')|`` over periods before both g and g'."""
        gap = 0.0
        for g, gp in itertools.combinations(self.cohorts, 2):
            t = int(min(min(g, gp) - 1, self.n_periods))
            if t >= 1:
                gap = max(gap, float(np.max(np.abs(self.Y[g][:, :t] - self.Y[gp][:, :t]))))
        return gap

    def template_assignment(self) -> np.ndarray:
        """Deterministic assignment with the right cohort sizes (units in order)."""
        return np.repeat(np.array(self.cohorts), [self.sizes[g] for g in self.cohorts])

    def realize(self, assignment) -> PanelData:
        """Observed panel ``Y_i(G_i)`` for one assignment vector."""
        G = np.asarray(assignment, dtype=float)
        Y = np.empty((self.n_units, self.n_periods))
        for g in self.cohorts:
            rows = G == g
            Y[rows] = self.Y[g][rows]
        return PanelData(tuple(range(self.n_units)), self.periods, Y, G)

    def template_panel(self) -> PanelData:
        return self.realize(self.template_assignment())

    def means(self) -> dict:
        return {g: y.mean(axis=0) for g, y in self.Y.items()}

    def true_theta(self, weights: est.EstimandWeights) -> np.ndarray:
        return weights.evaluate(self.means())

    def S(self, g, gp=None) -> np.ndarray:
        """Finite-population covariance of ``Y_i(g)`` with ``Y_i(g')`` (divisor N - 1)."""
        a = self.Y[g] - self.Y[g].mean(axis=0)
        b = a if gp is None else self.Y[gp] - self.Y[gp].mean(axis=0)
        return a.T @ b / (self.n_units - 1)

    def closed_form(self, weights: est.EstimandWeights, adjustment: est.AdjustmentSpec) -> np.ndarray:
        """Exact covariance of ``(theta0, xhat)`` over assignments, ``(K+M) x (K+M)``.

        ``sum_g R_g S_g R_g' / N_g - S_tau / N`` with ``R_g`` the stacked rows
        ``[A_theta[g]; A_zero[g]]`` and ``S_tau`` the finite-population
        covariance of the unit-level contrasts ``sum_g R_g Y_i(g)``.
        """
        R = {g: np.vstack([weights.A_theta[g], adjustment.A_zero[g]]) for g in self.cohorts}
        V = sum(R[g] @ self.S(g) @ R[g].T / self.sizes[g] for g in self.cohorts)
        tau = sum(self.Y[g] @ R[g].T for g in self.cohorts)
        d = tau - tau.mean(axis=0)
        S_tau = d.T @ d / (self.n_units - 1)
        return V - S_tau / self.n_units

    def beta_star(self, weights, adjustment) -> np.ndarray:
        """Population-optimal coefficient ``Var(X)^{-1} Cov(X, theta0)`` (M x K)."""
        K = weights.n_components
        V = self.closed_form(weights, adjustment)
        basis = adjustment.basis
        beta = np.zeros((adjustment.dim, K))
        if basis.size:
            Vx = V[K:, K:][np.ix_(basis, basis)]
            beta[basis] = np.linalg.solve(Vx, V[K:, :K][basis])
        return beta

    def variance(self, weights, adjustment, beta) -> np.ndarray:
        """Exact covariance (K x K) of ``theta_beta`` for a fixed coefficient."""
        K = weights.n_components
        V = self.closed_form(weights, adjustment)
        b = np.asarray(beta, dtype=float).reshape(adjustment.dim, K)
        L = np.vstack([np.eye(K), -b])
        return L.T @ V @ L


# ---------------------------------------------------------------- populations

@dataclass(frozen=True)
class PopulationSpec:
    """Parameters of a simulated population.

    ``two_period``: cohorts {2, never}; ``Y(never) ~ N(0, [[1, rho], [rho, 1]])``
    and ``Y_2(2) = Y_2(never) + gamma (Y_2(never) - mean Y_2(never))``.
    ``calibrated_null`` / ``calibrated_hetero`` take the untreated outcomes
    from a panel file; the latter adds ``1[t >= g] u_i`` with
    ``u_i ~ N(0, sd(Y))``.
    """

    kind: str = "two_period"
    n_treated: int = 1000
    n_never: int = 1000
    rho: float = 0.5
    gamma: float = 0.0
    seed: int = 0
    panel: Optional[str] = None

    def __post_init__(self):
        if self.kind not in ("two_period", "calibrated_null", "calibrated_hetero"):
            raise ValidationError(f"unknown population kind {self.kind!r}")
        if not -1 <= self.rho <= 1:
            raise ValidationError("rho must lie in [-1, 1]")
        if self.kind == "two_period" and (self.n_treated < 1 or self.n_never < 1):
            raise ValidationError("both cohorts need at least one unit")
        if self.kind != "two_period" and not self.panel:
            raise ValidationError(f"{self.kind} needs a panel file")

    def build(self) -> PotentialOutcomes:
        if self.kind == "two_period":
            return gen_two_period(self.n_treated, self.n_never, self.rho, self.gamma, self.seed)
        panel = load_panel(self.panel)
        if self.kind == "calibrated_null":
            return calibrated_null(panel)
        return calibrated_hetero(panel, self.seed)


def gen_two_period(n_treated: int, n_never: int, rho: float, gamma: float, seed: int = 0) -> PotentialOutcomes:
    """Two periods, cohorts {2, never}; effects average exactly zero."""
    rng = np.random.default_rng([seed, 0])
    n = n_treated + n_never
    z = rng.standard_normal((n, 2))
    y1 = z[:, 0]
    y2 = rho * z[:, 0] + math.sqrt(max(0.0, 1 - rho ** 2)) * z[:, 1]
    tau = gamma * (y2 - y2.mean())
    never = np.column_stack([y1, y2])
    treated = np.column_stack([y1, y2 + tau])
    return PotentialOutcomes({2.0: treated, NEVER: never}, {2.0: n_treated, NEVER: n_never})


def calibrated_null(panel: PanelData) -> PotentialOutcomes:
    """Sharp null: every cohort's potential outcomes equal the observed outcomes."""
    Y = {g: panel.outcomes.copy() for g in panel.cohorts}
    return PotentialOutcomes(Y, panel.cohort_sizes, panel.periods)


def calibrated_hetero(panel: PanelData, seed: int = 0) -> PotentialOutcomes:
    """Observed outcomes as ``Y(never)`` plus unit-specific effects ``u_i`` from period g on."""
    rng = np.random.default_rng([seed, 0])
    base = panel.outcomes
    u = rng.normal(0.0, base.std(ddof=1), size=base.shape[0])
    t = np.arange(1, panel.n_periods + 1)
    Y = {}
    for g in panel.cohorts:
        Y[g] = base + np.outer(u, (t >= g).astype(float))
    return PotentialOutcomes(Y, panel.cohort_sizes, panel.periods)


# ---------------------------------------------------------------- enumeration

def count_assignments(sizes: dict) -> int:
    n = sum(sizes.values())
    out = math.factorial(n)
    for k in sizes.values():
        out //= math.factorial(k)
    return out


def enumerate_assignments(sizes: dict, limit: int = MAX_ENUMERATION) -> np.ndarray:
    """Every first-treatment vector with the given cohort sizes, shape (count, N)."""
    count = count_assignments(sizes)
    if count > limit:
        raise ValidationError(f"{count} assignments exceed the enumeration limit {limit}")
    cohorts = sorted(sizes)
    n = sum(sizes.values())
    out = np.empty((count, n))
    row = 0

    def rec(k, free, current):
        nonlocal row
        if k == len(cohorts) - 1:
            current[list(free)] = cohorts[k]
            out[row] = current
            row += 1
            return
        for chosen in itertools.combinations(free, sizes[cohorts[k]]):
            current[list(chosen)] = cohorts[k]
            rest = tuple(i for i in free if i not in chosen)
            rec(k + 1, rest, current)

    rec(0, tuple(range(n)), np.empty(n))
    return out


def _direct_estimates(panel: PanelData, weights, adjustment):
    """theta0 and xhat by looping over the sparse weights (no compiled matrices)."""
    means = {g: panel.outcomes[panel.first_treated == g].mean(axis=0) for g in panel.cohorts}
    theta0 = np.array([sum(w * (means[g][t - 1] - means[gp][t - 1]) for (t, g, gp), w in comp.items())
                       for comp in weights.a])
    xhat = np.array([sum(w * (means[g][t - 1] - means[gp][t - 1]) for (t, g, gp), w in row.items())
                     for row in adjustment.b])
    return theta0, xhat


@dataclass
class EnumerationResult:
    """Exact assignment distribution of ``(theta0, xhat)``."""

    theta0: np.ndarray   # (count, K)
    xhat: np.ndarray     # (count, M)
    truth: np.ndarray    # (K,)

    def mean(self, beta) -> np.ndarray:
        return self.estimates(beta).mean(axis=0)

    def estimates(self, beta) -> np.ndarray:
        K, M = self.theta0.shape[1], self.xhat.shape[1]
        b = np.asarray(beta, dtype=float)
        b = np.full((M, K), float(b)) if b.ndim == 0 else b.reshape(M, K)
        return self.theta0 - self.xhat @ b

    def variance(self, beta) -> np.ndarray:
        e = self.estimates(beta)
        d = e - e.mean(axis=0)
        return d.T @ d / e.shape[0]

    def joint_cov(self) -> np.ndarray:
        z = np.hstack([self.theta0, self.xhat])
        d = z - z.mean(axis=0)
        return d.T @ d / z.shape[0]


def _sparse_contrasts(means: dict, terms) -> np.ndarray:
    """``sum w (mean_g[t] - mean_g'[t])`` per row of sparse terms; ``means[g]`` is (count, T)."""
    count = next(iter(means.values())).shape[0]
    out = np.zeros((count, len(terms)))
    for j, comp in enumerate(terms):
        for (t, g, gp), w in comp.items():
            out[:, j] += w * (means[g][:, t - 1] - means[gp][:, t - 1])
    return out


def enumerate_moments(po: PotentialOutcomes, weights, adjustment, limit: int = MAX_ENUMERATION) -> EnumerationResult:
    """Evaluate ``theta0`` and ``xhat`` on every assignment by direct arithmetic.

    Cohort means come straight from the science table and the estimand and
    adjustment enter through their sparse ``(t, g, g')`` terms, so none of
    the compiled matrices used by the estimator are involved.
    """
    A = enumerate_assignments(po.sizes, limit)
    means = {g: (A == g).astype(float) @ po.Y[g] / po.sizes[g] for g in po.cohorts}
    return EnumerationResult(_sparse_contrasts(means, weights.a), _sparse_contrasts(means, adjustment.b),
                             po.true_theta(weights))


@dataclass
class EnumeratedFRT:
    """Exact randomization distribution of the studentized statistic."""

    t: np.ndarray           # (count, K) statistic for every assignment of the observed outcomes
    p_values: np.ndarray    # (count, K) p-value if that assignment had been observed
    assignments: np.ndarray

    def rejection_rate(self, alpha: float = 0.05) -> np.ndarray:
        return np.mean(self.p_values <= alpha, axis=0)


def enumerate_frt(panel: PanelData, weights, adjustment, beta="plugin", *, stat: str = "refined",
                  limit: int = MAX_ENUMERATION) -> EnumeratedFRT:
    """Studentized statistic for every relabelling of ``panel``'s first-treatment dates.

    The exact FRT p-value for the observed labels is the fraction of
    assignments whose ``|t|`` is at least the observed one; ``p_values`` gives
    that fraction for each possible observed assignment.
    """
    A = enumerate_assignments(panel.cohort_sizes, limit)
    design = Design(panel, weights, adjustment, beta)
    res = _stack_modes(design.evaluate(design.indices_from_assignments(A)))
    if not res.valid.all():
        raise ValidationError(f"{int((~res.valid).sum())} assignments give a singular Var(X)")
    var = res.var_refined if stat == "refined" else res.var_neyman
    t = _studentize(res.theta, np.sqrt(var))
    p = np.empty_like(t)
    for k in range(t.shape[1]):
        p[:, k] = [count_ge(t[:, k], np.array(tk)) / t.shape[0] for tk in t[:, k]]
    return EnumeratedFRT(t, p, A)


# ---------------------------------------------------------------- Monte Carlo

@dataclass(frozen=True)
class MCConfig:
    """Monte Carlo settings; ``estimators`` are preset names."""

    reps: int = 1000
    seed: int = 0
    estimators: tuple = ("plugin", "did", "dim")
    estimand: str = "simple"
    lag: Optional[int] = None
    adjustment: str = "cs_scalar"
    frt_draws: int = 0
    alpha: float = 0.05
    threads: Optional[int] = None


_INT = {"n_treated", "n_never", "seed", "reps", "frt_draws", "threads", "lag"}
_FLOAT = {"rho", "gamma", "alpha"}


def load_config(path) -> tuple:
    """Read ``key = value`` lines (``#`` comments) into a population spec and MC settings."""
    parser = configparser.ConfigParser(inline_comment_prefixes=("#", ";"))
    with open(path, encoding="utf-8") as fh:
        parser.read_string("[spec]\n" + fh.read())
    return parse_config(dict(parser["spec"]))


def parse_config(raw: dict) -> tuple:
    pop_keys = {f.name for f in fields(PopulationSpec)}
    mc_keys = {f.name for f in fields(MCConfig)}
    pop, mc = {}, {}
    for key, value in raw.items():
        key = key.strip().lower()
        value = str(value).strip()
        if key not in pop_keys | mc_keys:
            raise ValidationError(f"unknown config key {key!r}")
        try:
            if key in _INT:
                v = int(value)
            elif key in _FLOAT:
                v = float(value)
            elif key == "estimators":
                v = tuple(x.strip() for x in value.split(",") if x.strip())
            else:
                v = value
        except ValueError:
            raise ValidationError(f"config key {key!r} has invalid value {value!r}")
        (pop if key in pop_keys else mc)[key] = v
    if "seed" in pop:
        mc["seed"] = pop["seed"]
    return PopulationSpec(**pop), MCConfig(**mc)


@dataclass
class _Group:
    names: list
    weights: est.EstimandWeights
    adjustment: est.AdjustmentSpec
    modes: list


def _groups(template: PanelData, cfg: MCConfig):
    groups = {}
    for name in cfg.estimators:
        plan = Plan(estimand=cfg.estimand, lag=cfg.lag, adjustment=cfg.adjustment, preset=name).resolved()
        key = (plan.estimand, plan.lag, plan.comparison)
        if key not in groups:
            w = plan.weights(template)
            groups[key] = _Group([], w, est.build_adjustment(cfg.adjustment, w, template), [])
        grp = groups[key]
        grp.names.append(name)
        grp.modes.append(plan.beta_mode(grp.adjustment, grp.weights.n_components))
    return list(groups.values())


@dataclass
class MCResult:
    table: pd.DataFrame
    estimates: dict = field(repr=False, default_factory=dict)
    frt_p: dict = field(repr=False, default_factory=dict)

    def to_csv(self, path=None, **kw):
        return self.table.to_csv(path, index=False, float_format="%.10g", **kw)


def assignment_from_permutation(template: np.ndarray, perm: np.ndarray) -> np.ndarray:
    """Assignment putting unit ``perm[j]`` in the cohort of template position ``j``."""
    G = np.empty_like(template)
    G[perm] = template
    return G


def _rep_frt(po, groups, perm, cfg, rep):
    panel = po.realize(assignment_from_permutation(po.template_assignment(), perm))
    out = []
    for gi, grp in enumerate(groups):
        design = Design(panel, grp.weights, grp.adjustment, list(grp.modes))
        runner = _Runner([_Stratum(design, 1.0, np.arange(panel.n_units))])
        (theta, var_n, var_r, _, valid), _ = runner.observed()
        if not valid.all():
            out.append(np.full(theta.shape[1], np.nan))
            continue
        t_obs = runner.t_stat(theta, var_n, var_r)[0]
        try:
            t_draws, _ = _run_draws(runner, cfg.frt_draws, (cfg.seed, 2, rep, gi), threads=1)
        except Exception:
            out.append(np.full(theta.shape[1], np.nan))
            continue
        out.append((1 + count_ge(t_draws, t_obs)) / (cfg.frt_draws + 1))
    return out


def run_mc(spec: PopulationSpec, cfg: MCConfig = MCConfig(), po: Optional[PotentialOutcomes] = None) -> MCResult:
    """Repeated random assignments on one fixed population.

    For every estimator reports bias, standard deviation, mean refined se,
    CI coverage, FRT rejection rate (when ``frt_draws > 0``), the standard
    deviation relative to the plug-in estimator and the mean estimated
    coefficient (scalar adjustments). Rep ``r`` draws its assignment from the
    stream ``(seed, 1, r)`` and its FRT from ``(seed, 2, r, ...)``, so results
    do not depend on the thread count.
    """
    if cfg.reps < 1:
        raise ValidationError("reps must be at least 1")
    z = z_quantile(cfg.alpha)
    po = spec.build() if po is None else po
    template = po.template_panel()
    groups = _groups(template, cfg)
    N = po.n_units
    perms = np.vstack([draw_permutations(np.random.default_rng([cfg.seed, 1, r]), N, 1) for r in range(cfg.reps)])

    estimates, frt_p, rows = {}, {}, []
    results = {}
    for grp in groups:
        design = Design(template, grp.weights, grp.adjustment, list(grp.modes), potential=po.Y)
        res = design.evaluate(design.indices_from_permutations(perms))
        truth = po.true_theta(grp.weights)[0]
        for name, r in zip(grp.names, res):
            results[name] = (r, truth)

    if cfg.frt_draws:
        threads = default_threads() if cfg.threads is None else max(1, cfg.threads)
        jobs = range(cfg.reps)
        fn = lambda r: _rep_frt(po, groups, perms[r], cfg, r)  # noqa: E731
        if threads > 1:
            with ThreadPoolExecutor(max_workers=threads) as pool:
                per_rep = list(pool.map(fn, jobs))
        else:
            per_rep = [fn(r) for r in jobs]
        for gi, grp in enumerate(groups):
            P = np.array([pr[gi] for pr in per_rep])
            K = grp.weights.n_components
            for m, name in enumerate(grp.names):
                frt_p[name] = P[:, m * K]

    sd_plugin = None
    if "plugin" in results:
        r, _ = results["plugin"]
        sd_plugin = float(np.std(r.theta[r.valid, 0], ddof=1)) if r.valid.sum() > 1 else float("nan")
    for name in cfg.estimators:
        r, truth = results[name]
        ok = r.valid
        th = r.theta[ok, 0]
        se = np.sqrt(r.var_refined[ok, 0])
        estimates[name] = th
        sd = float(np.std(th, ddof=1)) if th.size > 1 else float("nan")
        t = (th - 0.0) / np.where(se > 0, se, np.inf)
        row = {
            "estimator": name,
            "kind": spec.kind,
            "n_treated": spec.n_treated if spec.kind == "two_period" else None,
            "n_never": spec.n_never if spec.kind == "two_period" else None,
            "rho": spec.rho if spec.kind == "two_period" else None,
            "gamma": spec.gamma,
            "reps": cfg.reps,
            "failures": int((~ok).sum()),
            "theta": float(truth),
            "bias": float(th.mean() - truth),
            "sd": sd,
            "mean_se": float(se.mean()),
            "coverage": float(np.mean(np.abs(th - truth) <= z * se)),
            "t_reject": float(np.mean(np.abs(t) > z)),
            "sd_ratio": sd / sd_plugin if sd_plugin else float("nan"),
            "beta_mean": float(r.beta[ok, 0, 0].mean()) if r.beta.shape[1] == 1 else float("nan"),
        }
        if name in frt_p:
            p = frt_p[name][ok]
            p_ok = ~np.isnan(p)
            row["frt_size"] = float(np.mean(p[p_ok] <= cfg.alpha))
            row["frt_t_agreement"] = float(np.mean((p[p_ok] <= cfg.alpha) == (np.abs(t[p_ok]) > z)))
        rows.append(row)
    return MCResult(pd.DataFrame(rows), estimates, frt_p)
