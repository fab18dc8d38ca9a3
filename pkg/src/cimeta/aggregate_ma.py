"""Aggregate-data meta-analysis baselines: inverse-variance pooling and meta-regression."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Mapping, Sequence

import numpy as np

from .ipd_core import CovariateSchema, StudySummary
from .numerics import DesignMatrix, RankDeficiencyError, fit_ols


class MetaAnalysisError(ValueError):
    pass


@dataclass(frozen=True)
class PooledMAResult:
    """Inverse-variance pooled estimate.

    ``model`` is ``"fixed"`` or ``"random"``. The fixed computation serves
    both the common-effect and fixed-effects interpretations; ``labels``
    lists the interpretations that apply.
    """

    model: str
    estimate: float
    se: float
    tau2: float
    Q: float
    weights: np.ndarray
    study_ids: tuple[str, ...]
    labels: tuple[str, ...] = ()

    def ci(self, z: float = 1.959963984540054) -> tuple[float, float]:
        return self.estimate - z * self.se, self.estimate + z * self.se


@dataclass(frozen=True)
class MetaRegressionFit:
    coefficients: np.ndarray
    columns: tuple[str, ...]
    prediction: float
    prediction_se: float
    tau2: float
    Q: float
    study_ids: tuple[str, ...]


def _effects(summaries: Sequence[StudySummary]):
    if len(summaries) < 2:
        raise MetaAnalysisError(f"pooling needs at least 2 studies, got {len(summaries)}")
    theta = np.array([s.te for s in summaries], dtype=float)
    se = np.array([s.se_te for s in summaries], dtype=float)
    if np.any(se <= 0):
        bad = [s.study_id for s in summaries if s.se_te <= 0]
        raise MetaAnalysisError(f"zero standard error for studies {bad}")
    return theta, se ** 2, tuple(s.study_id for s in summaries)


def fixed_effect(summaries: Sequence[StudySummary]) -> PooledMAResult:
    """Inverse-variance weighted mean of study effects, with Cochran's Q."""
    theta, v, ids = _effects(summaries)
    w = 1.0 / v
    est = float(np.sum(w * theta) / np.sum(w))
    Q = float(np.sum(w * (theta - est) ** 2))
    return PooledMAResult("fixed", est, float(np.sum(w) ** -0.5), 0.0, Q, w / w.sum(), ids,
                          ("common-effect", "fixed-effects"))


def dersimonian_laird_tau2(theta: np.ndarray, v: np.ndarray) -> tuple[float, float]:
    w = 1.0 / v
    mu = np.sum(w * theta) / np.sum(w)
    Q = float(np.sum(w * (theta - mu) ** 2))
    c = np.sum(w) - np.sum(w ** 2) / np.sum(w)
    return max(0.0, float((Q - (theta.size - 1)) / c)), Q


def random_effects_dl(summaries: Sequence[StudySummary]) -> PooledMAResult:
    """DerSimonian-Laird random-effects pooling (tau^2 truncated at zero)."""
    theta, v, ids = _effects(summaries)
    tau2, Q = dersimonian_laird_tau2(theta, v)
    if tau2 == 0.0:
        fe = fixed_effect(summaries)
        return PooledMAResult("random", fe.estimate, fe.se, 0.0, Q, fe.weights, ids)
    w = 1.0 / (v + tau2)
    est = float(np.sum(w * theta) / np.sum(w))
    return PooledMAResult("random", est, float(np.sum(w) ** -0.5), tau2, Q, w / w.sum(), ids)


def aggregate_row(summary_means: Mapping, schema: CovariateSchema) -> list[float]:
    """Flatten covariate aggregates: means, and level proportions without the reference level."""
    row = []
    for cov in schema:
        value = summary_means[cov.name]
        if cov.is_categorical:
            row.extend(float(value[lv]) for lv in cov.levels[1:])
        else:
            row.append(float(value))
    return row


def aggregate_columns(schema: CovariateSchema) -> list[str]:
    cols = []
    for cov in schema:
        if cov.is_categorical:
            cols.extend(f"{cov.name}[{lv}]" for lv in cov.levels[1:])
        else:
            cols.append(cov.name)
    return cols


def meta_regression(summaries: Sequence[StudySummary], target_aggregates: Mapping,
                    schema: CovariateSchema) -> MetaRegressionFit:
    """Weighted regression of study effects on study-level covariate aggregates.

    Residual heterogeneity uses the method-of-moments estimator (truncated at
    zero) and weights ``1/(se^2 + tau^2)``; the prediction is the fitted value
    at ``target_aggregates`` with a normal-approximation standard error.
    """
    theta, v, ids = _effects(summaries)
    cols = ["(intercept)", *aggregate_columns(schema)]
    k, p = theta.size, len(cols)
    if k < p:
        raise MetaAnalysisError(f"{k} studies cannot support {p - 1} aggregate covariates")
    X = np.array([[1.0, *aggregate_row(s.covariate_means, schema)] for s in summaries])
    design = DesignMatrix(X, tuple(cols))
    w = 1.0 / v
    try:
        fe = fit_ols(design, theta, w)
    except RankDeficiencyError as exc:
        raise MetaAnalysisError(f"meta-regression design is degenerate: {exc}") from exc
    resid = theta - X @ fe.coefficients
    Q = float(np.sum(w * resid ** 2))
    XtWX_inv = np.linalg.inv((X.T * w) @ X)
    c = np.sum(w) - np.trace(XtWX_inv @ ((X.T * w ** 2) @ X))
    tau2 = max(0.0, float((Q - (k - p)) / c)) if c > 0 else 0.0
    wr = 1.0 / (v + tau2)
    fit = fit_ols(design, theta, wr)
    x0 = np.array([1.0, *aggregate_row(target_aggregates, schema)])
    cov_beta = np.linalg.inv((X.T * wr) @ X)
    pred = float(x0 @ fit.coefficients)
    return MetaRegressionFit(fit.coefficients, tuple(cols), pred, float(np.sqrt(x0 @ cov_beta @ x0)),
                             tau2, Q, ids)
