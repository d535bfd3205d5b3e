"""Cohort moments, the linearly adjusted estimator family and the plug-in coefficient.

For weights ``A_theta[g]`` (``K x T``) and ``A_zero[g]`` (``M x T``) the
estimators are ``theta_beta = theta0 - xhat' beta`` with

    theta0 = sum_g A_theta[g] Ybar_g,     xhat = sum_g A_zero[g] Ybar_g.

The variance blocks use the sample covariances ``S_g`` of each cohort:

    V_theta0   = sum_g A_theta[g] S_g A_theta[g]' / N_g
    V_x_theta0 = sum_g A_zero[g]  S_g A_theta[g]' / N_g
    V_x        = sum_g A_zero[g]  S_g A_zero[g]'  / N_g

and the plug-in coefficient solves ``V_x beta = V_x_theta0``.

``Design`` evaluates the whole pipeline (point estimate, plug-in coefficient,
Neyman and refined variances) for a batch of treatment assignments at once;
it is what randomization tests and the Monte Carlo harness run on.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Sequence, Union

import numpy as np
import scipy.linalg
import scipy.sparse

from .estimands import AdjustmentSpec, EstimandWeights
from .exceptions import NumericalError, SingularCovarianceError, ValidationError
from .panel import PanelData

PRESETS = ("plugin", "cs", "did", "sa", "dchaisemartin", "dim")

# relative eigenvalue floor below which V_x counts as singular
SINGULAR_RTOL = 1e-10
# negative variances larger than this (relative) indicate a bug, not rounding
NEGATIVE_VAR_RTOL = 1e-12


@dataclass(frozen=True)
class CohortStats:
    """Per-cohort sample mean (T,) and covariance (T, T) with divisor ``N_g - 1``.

    ``covs[g]`` is ``None`` for cohorts with a single unit.
    """

    cohorts: tuple
    sizes: dict
    means: dict
    covs: dict

    @property
    def n_units(self) -> int:
        return sum(self.sizes.values())

    def cov(self, g) -> np.ndarray:
        S = self.covs[g]
        if S is None:
            raise ValidationError(
                f"cohort {g:g} has a single unit; its covariance is undefined but is required here"
            )
        return S


def _moments(y: np.ndarray):
    mean = y.mean(axis=0)
    if y.shape[0] < 2:
        return mean, None
    d = y - mean  # two-pass: center before forming cross products
    S = d.T @ d / (y.shape[0] - 1)
    return mean, (S + S.T) / 2


def cohort_stats(panel: PanelData) -> CohortStats:
    """Exact sample moments of every cohort's outcome vectors."""
    means, covs = {}, {}
    for g in panel.cohorts:
        means[g], covs[g] = _moments(panel.outcomes[panel.cohort_members(g)])
    return CohortStats(panel.cohorts, panel.cohort_sizes, means, covs)


def _check_conformable(stats: CohortStats, weights: EstimandWeights, adjustment: AdjustmentSpec):
    if tuple(weights.cohorts) != tuple(stats.cohorts) or tuple(adjustment.cohorts) != tuple(stats.cohorts):
        raise ValidationError("estimand, adjustment and data were built on different cohort sets")
    T = next(iter(stats.means.values())).shape[0]
    if weights.n_periods != T or adjustment.n_periods != T:
        raise ValidationError("estimand, adjustment and data disagree on the number of periods")


def point_estimates(stats: CohortStats, weights: EstimandWeights, adjustment: AdjustmentSpec):
    """Return ``(theta0, xhat)`` with shapes ``(K,)`` and ``(M,)``."""
    _check_conformable(stats, weights, adjustment)
    theta0 = np.zeros(weights.n_components)
    xhat = np.zeros(adjustment.dim)
    # rows are contrasts, so a common per-period offset cancels; removing it
    # first makes shifts cancel exactly rather than up to rounding
    ref = np.min([stats.means[g] for g in stats.cohorts], axis=0)
    for g in stats.cohorts:
        m = stats.means[g] - ref
        theta0 += weights.A_theta[g] @ m
        if adjustment.dim:
            xhat += adjustment.A_zero[g] @ m
    return theta0, xhat


@dataclass(frozen=True)
class VarianceComponents:
    """Sample-analog variance blocks (no ``-S_theta / N`` term).

    Attributes
    ----------
    V_theta0 : ndarray (K, K)
    V_x_theta0 : ndarray (M, K)
    V_x : ndarray (M, M)
    n_units : int
    """

    V_theta0: np.ndarray
    V_x_theta0: np.ndarray
    V_x: np.ndarray
    n_units: int

    def neyman_cov(self, beta: np.ndarray) -> np.ndarray:
        """Covariance of ``theta_beta`` implied by the blocks, ``(K, K)``."""
        b = np.asarray(beta, dtype=float).reshape(self.V_x.shape[0], self.V_theta0.shape[0])
        cross = b.T @ self.V_x_theta0
        return self.V_theta0 - cross - cross.T + b.T @ self.V_x @ b


def _touches(rows: np.ndarray) -> bool:
    return bool(np.any(rows != 0))


def variance_components(stats: CohortStats, weights: EstimandWeights, adjustment: AdjustmentSpec) -> VarianceComponents:
    _check_conformable(stats, weights, adjustment)
    K, M = weights.n_components, adjustment.dim
    Vt, Vxt, Vx = np.zeros((K, K)), np.zeros((M, K)), np.zeros((M, M))
    for g in stats.cohorts:
        At = weights.A_theta[g]
        Az = adjustment.A_zero[g] if M else np.zeros((0, At.shape[1]))
        if not (_touches(At) or _touches(Az)):
            continue
        S = stats.cov(g) / stats.sizes[g]
        SAt = S @ At.T
        Vt += At @ SAt
        Vxt += Az @ SAt
        Vx += Az @ S @ Az.T
    return VarianceComponents((Vt + Vt.T) / 2, Vxt, (Vx + Vx.T) / 2, stats.n_units)


def _solve_pd(V: np.ndarray, rhs: np.ndarray) -> np.ndarray:
    if V.shape[0] == 0:
        return np.zeros((0,) + rhs.shape[1:])
    w = np.linalg.eigvalsh(V)
    if not (w[-1] > 0 and w[0] >= SINGULAR_RTOL * w[-1]):
        raise SingularCovarianceError(
            f"estimated Var(X) is numerically singular (eigenvalues {w[0]:.3g} .. {w[-1]:.3g}); "
            "use fewer or different adjustment contrasts"
        )
    return scipy.linalg.cho_solve(scipy.linalg.cho_factor(V), rhs)


def beta_star(components: VarianceComponents, basis: Optional[Sequence[int]] = None) -> np.ndarray:
    """Plug-in coefficient ``V_x^{-1} V_x_theta0`` with shape ``(M, K)``.

    When ``basis`` is given, the coefficient is estimated on those rows of the
    adjustment vector only and is zero elsewhere.
    """
    M = components.V_x.shape[0]
    K = components.V_theta0.shape[0]
    rows = np.arange(M) if basis is None else np.asarray(basis, dtype=int)
    beta = np.zeros((M, K))
    if rows.size:
        sub = components.V_x[np.ix_(rows, rows)]
        beta[rows] = _solve_pd(sub, components.V_x_theta0[rows])
    return beta


def resolve_preset_beta(preset: Union[str, np.ndarray, float], adjustment: AdjustmentSpec,
                        components: Optional[VarianceComponents] = None, n_components: int = 1) -> np.ndarray:
    """Coefficient ``(M, K)`` for a named preset or an explicit value.

    ``plugin`` needs the variance components; ``dim`` is zero; ``cs``, ``did``,
    ``sa`` and ``dchaisemartin`` take the adjustment's preset coefficient.
    """
    M = adjustment.dim
    if isinstance(preset, str):
        if preset == "plugin":
            if components is None:
                raise ValueError("plugin preset needs variance components")
            return beta_star(components, adjustment.basis)
        if preset == "dim":
            return np.zeros((M, n_components))
        if preset in PRESETS:
            if adjustment.preset_beta is None:
                raise ValidationError(f"preset {preset!r} is not defined for adjustment {adjustment.name!r}")
            return np.array(adjustment.preset_beta)
        raise ValidationError(f"unknown preset {preset!r}; choose from {PRESETS}")
    b = np.asarray(preset, dtype=float)
    if b.ndim == 0:
        b = np.full((M, n_components), float(b))
    return b.reshape(M, -1)


@dataclass(frozen=True)
class Estimate:
    """``theta_hat = theta0 - xhat' beta`` for each of the K components."""

    theta_hat: np.ndarray
    beta: np.ndarray
    theta0: np.ndarray
    xhat: np.ndarray
    preset: str = "custom"

    def scalar(self) -> float:
        if self.theta_hat.size != 1:
            raise ValueError("estimate has several components")
        return float(self.theta_hat[0])


def estimate(theta0, xhat, beta, preset: str = "custom") -> Estimate:
    theta0 = np.atleast_1d(np.asarray(theta0, dtype=float))
    xhat = np.atleast_1d(np.asarray(xhat, dtype=float))
    b = np.asarray(beta, dtype=float)
    if b.ndim == 0:
        b = np.full((xhat.size, theta0.size), float(b))
    b = b.reshape(xhat.size, theta0.size)
    return Estimate(theta0 - xhat @ b, b, theta0, xhat, preset)


# ---------------------------------------------------------------- batched engine

@dataclass
class BatchResult:
    """Per-assignment results, leading axis = assignment."""

    theta0: np.ndarray          # (B, K)
    xhat: np.ndarray            # (B, Ma) active adjustment rows
    beta: np.ndarray            # (B, Ma, K)
    theta: np.ndarray           # (B, K)
    cov: np.ndarray             # (B, K, K) Neyman covariance of theta
    var_neyman: np.ndarray      # (B, K) squared Neyman se
    var_refined: np.ndarray     # (B, K) squared refined se
    refine_fallback: np.ndarray  # (B, K) refinement unavailable
    valid: np.ndarray           # (B,) Var(X) positive definite

    @property
    def se_neyman(self):
        return np.sqrt(self.var_neyman)

    @property
    def se_refined(self):
        return np.sqrt(self.var_refined)

    def take(self, rows):
        return BatchResult(*(getattr(self, f)[rows] for f in self.__dataclass_fields__))


def _concat(parts):
    return BatchResult(*(np.concatenate([getattr(p, f) for p in parts]) for f in BatchResult.__dataclass_fields__))


class Design:
    """Precomputed projections for evaluating many assignments of one panel.

    Parameters
    ----------
    panel : PanelData
        Supplies outcomes and the observed cohort sizes.
    weights, adjustment : EstimandWeights, AdjustmentSpec
    beta : "plugin", array (M, K), or a list of these
        Re-estimate the plug-in coefficient for every assignment, or hold a
        fixed coefficient. With a list, ``evaluate`` returns one result per
        entry, all computed from the same cohort moments.
    refine : bool
        Compute the refined variance.
    potential : dict, optional
        Cohort -> (N, T) potential outcomes. When given, a unit assigned to
        cohort ``g`` contributes ``potential[g]`` instead of its observed row,
        so assignments can be drawn from a known science table.

    Notes
    -----
    For cohort ``g`` the engine projects every unit's outcome vector once onto
    the rows ``[A_theta[g]; A_zero[g][active]; pre-period selectors]``. An
    assignment only changes which units fall in which cohort, so each draw
    costs a gather and a small covariance per cohort.
    """

    max_chunk_bytes = 64 * 2 ** 20
    raw_max_q = 8  # up to this width, cohort moments come from one sparse product

    def __init__(self, panel: PanelData, weights: EstimandWeights, adjustment: AdjustmentSpec,
                 beta="plugin", refine: bool = True, potential: Optional[dict] = None):
        if tuple(weights.cohorts) != panel.cohorts or tuple(adjustment.cohorts) != panel.cohorts:
            raise ValidationError("estimand and adjustment were built on a different panel")
        self.panel = panel
        self.cohorts = panel.cohorts
        self.sizes = panel.cohort_sizes
        self.N = panel.n_units
        T = panel.n_periods
        self.K = K = weights.n_components
        self.multi = isinstance(beta, list)
        modes = beta if self.multi else [beta]
        rows = set()
        parsed = []
        for m in modes:
            if isinstance(m, str):
                if m != "plugin":
                    raise ValidationError(f"unknown beta mode {m!r}")
                rows.update(int(j) for j in adjustment.basis)
                parsed.append(None)
            else:
                b = np.asarray(m, dtype=float).reshape(adjustment.dim, K)
                rows.update(int(j) for j in np.flatnonzero(np.any(b != 0, axis=1)))
                parsed.append(b)
        self.active = np.array(sorted(rows), dtype=int)
        pos = {j: i for i, j in enumerate(self.active)}
        has_plugin = any(b is None for b in parsed)
        self.plugin_rows = np.array([pos[int(j)] for j in adjustment.basis] if has_plugin else [], dtype=int)
        self.modes = [None if b is None else b[self.active] for b in parsed]
        self.Ma = Ma = self.active.size
        self.refine = refine
        self.g_min = [weights.g_min(k) for k in range(K)]
        usable = [g for g in self.g_min if refine and g is not None and g > 1]
        self.p = p = int(max(usable) - 1) if usable else 0
        self.q = K + Ma + p
        pre = np.eye(T)[:p]
        self.proj, self.centre, self.need_cov, self.theta_rows = [], [], [], []
        if potential is None:
            ref = panel.outcomes.min(axis=0)
        else:
            ref = np.min([np.asarray(potential[g], dtype=float).min(axis=0) for g in self.cohorts], axis=0)
        for g in self.cohorts:
            At = weights.A_theta[g]
            Az = adjustment.A_zero[g][self.active] if Ma else np.zeros((0, T))
            R = np.vstack([At, Az, pre])
            Y = panel.outcomes if potential is None else np.asarray(potential[g], dtype=float)
            # same offset for every cohort: contrast rows are unaffected
            P = (Y - ref) @ R.T
            need = _touches(At) or _touches(Az)
            centre = P.mean(axis=0)
            P = P - centre
            self.centre.append(centre)
            if need and self.q <= self.raw_max_q:
                P = np.hstack([P, (P[:, :, None] * P[:, None, :]).reshape(len(P), -1)])
            self.proj.append(np.ascontiguousarray(P))
            self.need_cov.append(need)
            self.theta_rows.append(np.any(At != 0, axis=1))
            if need and self.sizes[g] < 2:
                raise ValidationError(
                    f"cohort {panel.cohort_label(g)} has N_g = 1 but enters the estimator; "
                    "its covariance is undefined"
                )

    def observed_indices(self):
        return [self.panel.cohort_members(g)[None, :] for g in self.cohorts]

    def indices_from_permutations(self, perms: np.ndarray):
        """Cohort index arrays for permutations ``perms`` (B, N) of unit positions."""
        return [perms[:, self.panel.cohort_members(g)] for g in self.cohorts]

    def indices_from_assignments(self, assignments: np.ndarray):
        """Cohort index arrays from first-treatment vectors ``assignments`` (B, N)."""
        out = []
        for g in self.cohorts:
            n_g = self.sizes[g]
            rows, cols = np.nonzero(assignments == g)
            if rows.size != assignments.shape[0] * n_g:
                raise ValidationError("assignments do not preserve cohort sizes")
            out.append(cols.reshape(assignments.shape[0], n_g))
        return out

    def evaluate(self, indices):
        """Results for each assignment (a list of results when several modes were given)."""
        B = indices[0].shape[0]
        per_draw = 8 * max(1, self.N) * max(1, self.q) * 3
        chunk = max(1, min(B, self.max_chunk_bytes // per_draw))
        if chunk >= B:
            out = self._evaluate(indices)
        else:
            parts = [self._evaluate([ix[s:s + chunk] for ix in indices]) for s in range(0, B, chunk)]
            out = [_concat([p[i] for p in parts]) for i in range(len(self.modes))]
        return out if self.multi else out[0]

    def _moments(self, indices):
        K, Ma, p = self.K, self.Ma, self.p
        Q = K + Ma
        B = indices[0].shape[0]
        theta0 = np.zeros((B, K))
        xhat = np.zeros((B, Ma))
        V = np.zeros((B, Q, Q))
        pre_cov = {}
        q = self.q
        for c, g in enumerate(self.cohorts):
            ix = indices[c]
            n_g = ix.shape[1]
            P = self.proj[c]
            if P.shape[1] > q or not self.need_cov[c]:
                # sums of [z, z z'] via a sparse selector; columns are centred, so
                # the raw second moments do not cancel badly
                sel = scipy.sparse.csr_matrix(
                    (np.ones(ix.size), ix.ravel(), np.arange(0, ix.size + 1, n_g)), shape=(B, P.shape[0]))
                R = sel @ P
                s = R[:, :q]
                mu = s / n_g
                C = None
                if self.need_cov[c]:
                    C = (R[:, q:].reshape(B, q, q) - s[:, :, None] * mu[:, None, :]) / (n_g - 1)
            else:
                Z = P[ix]  # (B, N_g, q)
                mu = Z.mean(axis=1)
                D = Z - mu[:, None, :]
                C = np.matmul(D.transpose(0, 2, 1), D) / (n_g - 1)
            mu = mu + self.centre[c]
            theta0 += mu[:, :K]
            xhat += mu[:, K:Q]
            if C is None:
                continue
            V += C[:, :Q, :Q] / n_g
            if p and self.theta_rows[c].any():
                pre_cov[g] = C[:, Q:, :]
        return theta0, xhat, (V + V.transpose(0, 2, 1)) / 2, pre_cov

    def _refinement(self, pre_cov, B):
        """Subtracted quadratic form per component (B, K) and availability mask."""
        K, Ma = self.K, self.Ma
        quad = np.zeros((B, K))
        ok_all = np.zeros((B, K), dtype=bool)
        if not self.refine:
            return quad, ok_all
        for k in range(K):
            gm = self.g_min[k]
            if gm is None or gm <= 1:
                continue
            pk = int(gm) - 1
            s = np.zeros((B, pk))
            ok = np.ones(B, dtype=bool)
            for c, g in enumerate(self.cohorts):
                if g < gm or not self.theta_rows[c][k]:
                    continue
                C = pre_cov[g]
                Spp = C[:, :pk, K + Ma:K + Ma + pk]
                Spt = C[:, :pk, k]
                w = np.linalg.eigvalsh(Spp)
                good = (w[:, -1] > 0) & (w[:, 0] >= SINGULAR_RTOL * w[:, -1])
                ok &= good
                if good.any():
                    s[good] += np.linalg.solve(Spp[good], Spt[good][..., None])[..., 0]
            Sgm = pre_cov[gm][:, :pk, K + Ma:K + Ma + pk]
            quad[:, k] = np.einsum("bi,bij,bj->b", s, Sgm, s)
            ok_all[:, k] = ok
        return quad, ok_all

    def _evaluate(self, indices):
        K, Ma = self.K, self.Ma
        B = indices[0].shape[0]
        theta0, xhat, V, pre_cov = self._moments(indices)
        Vt, Vxt, Vx = V[:, :K, :K], V[:, K:, :K], V[:, K:, K:]
        quad, ref_ok = self._refinement(pre_cov, B)
        scale = np.maximum(np.abs(np.diagonal(Vt, axis1=1, axis2=2)), np.finfo(float).tiny)
        out = []
        for mode in self.modes:
            valid = np.ones(B, dtype=bool)
            beta = np.zeros((B, Ma, K))
            if mode is None:
                r = self.plugin_rows
                if r.size:
                    sub = Vx[:, r[:, None], r[None, :]]
                    w = np.linalg.eigvalsh(sub)
                    valid = (w[:, -1] > 0) & (w[:, 0] >= SINGULAR_RTOL * w[:, -1])
                    if valid.any():
                        sol = np.linalg.solve(sub[valid], Vxt[valid][:, r, :])
                        tmp = np.zeros((int(valid.sum()), Ma, K))
                        tmp[:, r, :] = sol
                        beta[valid] = tmp
            else:
                beta[:] = mode
            theta = theta0 - np.einsum("bm,bmk->bk", xhat, beta)
            bT = beta.transpose(0, 2, 1)
            cross = np.matmul(bT, Vxt)
            cov = Vt - cross - cross.transpose(0, 2, 1) + np.matmul(np.matmul(bT, Vx), beta)
            var_n = np.diagonal(cov, axis1=1, axis2=2).copy()
            bad = valid[:, None] & (var_n < -NEGATIVE_VAR_RTOL * scale - 1e-300)
            if bad.any():
                raise NumericalError(f"negative Neyman variance {var_n[bad].min():.3g}; inputs are not conformable")
            var_n = np.maximum(var_n, 0.0)
            refined = var_n - quad / self.N
            # an overshooting refinement (sigma**^2 <= 0) keeps the Neyman value
            upd = ref_ok & valid[:, None] & (refined > 0)
            var_r = np.where(upd, refined, var_n)
            out.append(BatchResult(theta0, xhat, beta, theta, cov, var_n, var_r, ~upd, valid))
        return out
