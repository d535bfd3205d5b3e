"""Estimator objects with a scikit-learn style interface.

Only ``fit`` is provided; there is nothing to predict or transform for a
finite-population treatment effect.
"""

from __future__ import annotations

from typing import Optional, Sequence

import numpy as np
import pandas as pd
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_is_fitted

from .exceptions import ValidationError
from .inference import Plan, event_study, infer
from .panel import PanelData, load_panel


def check_panel(X, **load_kw) -> PanelData:
    """Coerce ``X`` to a :class:`PanelData`.

    Parameters
    ----------
    X : PanelData, pandas.DataFrame or path
        A long-format frame or CSV with ``unit``, ``period``,
        ``first_treated`` and ``outcome`` columns.
    """
    if isinstance(X, PanelData):
        return X
    if isinstance(X, pd.DataFrame):
        return load_panel(X, **load_kw)
    if isinstance(X, (str, bytes)) or hasattr(X, "__fspath__"):
        return load_panel(X, **load_kw)
    raise ValidationError(f"cannot build a panel from {type(X).__name__}")


class StaggeredEstimator(BaseEstimator):
    """Efficient estimator for a staggered rollout.

    Parameters
    ----------
    estimand : str
        ``simple``, ``calendar``, ``cohort``, ``event_study``, ``time``,
        ``group`` or ``att_tg``.
    lag, t, g
        Extra arguments of the estimand; ``t`` and ``g`` are internal 1-based
        period indices.
    comparison : str
    adjustment : str
    preset : str
        ``plugin`` estimates the adjustment coefficient; the others fix it.
    alpha : float
    frt_draws : int
        Number of randomization draws; 0 skips the test.
    seed : int
    threads : int, optional

    Attributes
    ----------
    result_ : InferenceResult
    theta_, se_, ci_, frt_p_, beta_
    """

    def __init__(self, estimand="simple", lag=None, t=None, g=None, comparison="auto", adjustment="cs_scalar",
                 preset="plugin", alpha=0.05, frt_draws=0, seed=0, threads=None):
        self.estimand = estimand
        self.lag = lag
        self.t = t
        self.g = g
        self.comparison = comparison
        self.adjustment = adjustment
        self.preset = preset
        self.alpha = alpha
        self.frt_draws = frt_draws
        self.seed = seed
        self.threads = threads

    def fit(self, X, y=None):
        panel = check_panel(X)
        plan = Plan(estimand=self.estimand, lag=self.lag, t=self.t,
                    g=None if self.g is None else float(self.g), comparison=self.comparison,
                    adjustment=self.adjustment, preset=self.preset)
        res = infer(panel, plan, alpha=self.alpha, frt_draws=self.frt_draws, seed=self.seed,
                    threads=self.threads)
        self.result_ = res
        self.theta_ = res.theta_hat
        self.se_ = res.se_refined
        self.ci_ = res.ci
        self.frt_p_ = res.frt_p
        self.beta_ = None if res.estimate is None else res.estimate.beta
        return self

    def summary(self) -> dict:
        check_is_fitted(self, "result_")
        return self.result_.to_dict()


class EventStudyEstimator(BaseEstimator):
    """Event-study estimates over lags and placebo leads with a simultaneous band."""

    def __init__(self, lags: Sequence[int] = (0,), leads: Sequence[int] = (), comparison="auto",
                 adjustment="cs_scalar", preset="plugin", alpha=0.05, frt_draws=0, seed=0,
                 threads: Optional[int] = None):
        self.lags = lags
        self.leads = leads
        self.comparison = comparison
        self.adjustment = adjustment
        self.preset = preset
        self.alpha = alpha
        self.frt_draws = frt_draws
        self.seed = seed
        self.threads = threads

    def fit(self, X, y=None):
        panel = check_panel(X)
        self.result_ = event_study(panel, self.lags, self.leads, comparison=self.comparison,
                                   adjustment=self.adjustment, preset=self.preset, alpha=self.alpha,
                                   frt_draws=self.frt_draws, seed=self.seed, threads=self.threads)
        self.table_ = self.result_.to_frame()
        self.theta_ = np.asarray(self.result_.theta_hat)
        self.se_ = np.asarray(self.result_.se_refined)
        return self
