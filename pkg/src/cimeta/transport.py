"""Transport estimators: outcome model, inverse probability weighting and doubly robust.

All estimators work on a :class:`~cimeta.ipd_core.TargetAssignment`: the
target sample supplies covariates only, the contributing studies supply
covariates, arms and outcomes. Potential-outcome means are estimated per arm
and the effect is their difference.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field, replace
from typing import Sequence

import numpy as np

from .ipd_core import CovariateSchema, MetaDataset, TargetAssignment
from .numerics import (
    KernelModel, LinearFit, LogisticFit, design_matrix, fit_logistic, fit_ols,
    kernel_probs, select_bandwidths,
)

TRANSPORT_ESTIMATORS = ("om", "ipw", "ipw-h", "np-ipw", "np-ipw-h", "dr")


# fitted probabilities this close to 0 or 1 are reported as pinned when the participation model is separated
SEPARATION_PIN = 1e-8


class TransportError(RuntimeError):
    """An estimator could not produce a finite estimate for this assignment."""


class InfiniteWeightError(TransportError):
    def __init__(self, message, rows=()):
        super().__init__(message)
        self.rows = tuple(int(r) for r in rows)


class SeparationWarning(UserWarning):
    pass


def _schema(ds: MetaDataset, covariates: Sequence[str] | None) -> CovariateSchema:
    return ds.schema if covariates is None else ds.schema.subset(covariates)


def _design(ds: MetaDataset, rows: np.ndarray, schema: CovariateSchema):
    return design_matrix(schema, {c.name: ds.column(c.name)[rows] for c in schema}, n=rows.size)


@dataclass(frozen=True)
class OutcomeModelFit:
    """Linear regression of the outcome on covariates within one arm of the pooled contributing rows."""

    arm: str
    fit: LinearFit
    schema: CovariateSchema

    def predict(self, ds: MetaDataset, rows: np.ndarray) -> np.ndarray:
        return self.fit.predict(_design(ds, rows, self.schema))


@dataclass(frozen=True)
class ParticipationModelFit:
    """Model for the probability of belonging to the target sample given covariates."""

    method: str
    fit: LogisticFit | KernelModel
    schema: CovariateSchema
    clip_epsilon: float = 0.0

    @property
    def separation_detected(self) -> bool:
        return self.method == "logistic" and self.fit.separation_detected

    def predict(self, ds: MetaDataset, rows: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """Return ``(p_hat, no_support)`` at ``rows``, clipped to ``[eps, 1 - eps]`` when ``eps > 0``."""
        if self.method == "logistic":
            p = self.fit.predict(_design(ds, rows, self.schema))
            no_support = np.zeros(rows.size, dtype=bool)
        else:
            xc, xd = _kernel_inputs(ds, rows, self.schema)
            pred = kernel_probs(self.fit, xc, xd)
            p, no_support = pred.prob, pred.no_support
        if self.clip_epsilon > 0:
            p = np.clip(p, self.clip_epsilon, 1 - self.clip_epsilon)
        return p, no_support


@dataclass(frozen=True)
class TreatmentModelFit:
    """Logistic model for ``Pr[A = a | X, contributing]``; the other arm gets the complement."""

    fit: LogisticFit
    schema: CovariateSchema
    arm_a: str

    def prob_a(self, ds: MetaDataset, rows: np.ndarray) -> np.ndarray:
        return self.fit.predict(_design(ds, rows, self.schema))

    def prob_own_arm(self, ds: MetaDataset, rows: np.ndarray) -> np.ndarray:
        ea = self.prob_a(ds, rows)
        return np.where(ds.arm[rows] == self.arm_a, ea, 1.0 - ea)


@dataclass(frozen=True)
class StudyWeight:
    """One study's share of a weighting estimator written as an aggregate meta-analysis."""

    study_id: str
    n_a: int
    n_a_prime: int
    weight_a: float
    weight_a_prime: float
    implied_weight: float
    implied_te: float


@dataclass(frozen=True)
class WeightDiagnostics:
    """Per-individual transport weights for the contributing rows and their summaries.

    The weighting estimate equals ``sum(implied_weight * implied_te) +
    imbalance_term`` over studies, where the imbalance term collects the part
    due to unequal arm weight totals within studies.
    """

    rows: np.ndarray
    is_arm_a: np.ndarray
    weights: np.ndarray
    participation_prob: np.ndarray
    treatment_prob: np.ndarray
    study_ids: np.ndarray = field(repr=False)
    outcome: np.ndarray | None = field(default=None, repr=False)
    n_target: int = 0
    normalized: bool = False
    studies: tuple[StudyWeight, ...] = ()
    implied_weight_sum: float = float("nan")
    imbalance_term: float = 0.0
    ess_a: float = float("nan")
    ess_a_prime: float = float("nan")
    n_no_support: int = 0
    separation_detected: bool = False

    @property
    def top_decile_share(self) -> float:
        """Fraction of total weight held by the heaviest 10% of contributing individuals."""
        w = np.sort(self.weights)[::-1]
        total = w.sum()
        if total <= 0:
            return float("nan")
        k = max(1, int(np.ceil(0.1 * w.size)))
        return float(w[:k].sum() / total)

    def hajek(self) -> "WeightDiagnostics":
        """Weights rescaled to mean one within each arm."""
        if self.normalized:
            return self
        w = self.weights.copy()
        for mask in (self.is_arm_a, ~self.is_arm_a):
            total = w[mask].sum()
            if not total > 0:
                raise TransportError("Hajek normalization impossible: zero total weight in an arm")
            w[mask] *= mask.sum() / total
        return summarize_weights(replace(self, weights=w, normalized=True))


def _ess(w):
    s2 = float(np.sum(w * w))
    return float(np.sum(w) ** 2 / s2) if s2 > 0 else 0.0


def summarize_weights(diag: WeightDiagnostics) -> WeightDiagnostics:
    """Fill in implied study weights, the imbalance term and per-arm ESS from ``diag.weights``.

    Study ``m`` gets arm shares ``W_ma = sum_{m, a} w / D_a`` with ``D_a`` the
    target size (unnormalized) or the arm weight total (Hajek); its implied
    weight is the average of the two shares and its implied effect is the
    difference of weighted arm means.
    """
    w, is_a = diag.weights, diag.is_arm_a
    if diag.normalized:
        norm_a, norm_b = float(w[is_a].sum()), float(w[~is_a].sum())
    else:
        norm_a = norm_b = float(diag.n_target)
    y = diag.outcome
    studies, total, imbalance = [], 0.0, 0.0
    for s in dict.fromkeys(diag.study_ids):
        in_s = diag.study_ids == s
        ma, mb = in_s & is_a, in_s & ~is_a
        Wa, Wb = w[ma].sum() / norm_a, w[mb].sum() / norm_b
        omega = 0.5 * (Wa + Wb)
        te = float("nan")
        if y is not None and w[ma].sum() > 0 and w[mb].sum() > 0:
            ya = np.dot(w[ma], y[ma]) / w[ma].sum()
            yb = np.dot(w[mb], y[mb]) / w[mb].sum()
            te = float(ya - yb)
            imbalance += (Wa - Wb) * 0.5 * (ya + yb)
        elif y is not None:
            ya = np.dot(w[ma], y[ma]) / w[ma].sum() if w[ma].sum() > 0 else 0.0
            yb = np.dot(w[mb], y[mb]) / w[mb].sum() if w[mb].sum() > 0 else 0.0
            imbalance += Wa * ya - Wb * yb
        total += omega
        studies.append(StudyWeight(str(s), int(ma.sum()), int(mb.sum()), float(Wa), float(Wb),
                                   float(omega), te))
    out = replace(diag, studies=tuple(studies), implied_weight_sum=float(total),
                  imbalance_term=float(imbalance),
                  ess_a=_ess(w[is_a]), ess_a_prime=_ess(w[~is_a]))
    return out


@dataclass(frozen=True)
class TransportEstimate:
    estimator: str
    point: float
    arm_means: tuple[float, float] | None = None
    ci: tuple[float, float, float] | None = None
    diagnostics: WeightDiagnostics | None = None

    def with_ci(self, level: float, lo: float, hi: float) -> "TransportEstimate":
        return replace(self, ci=(float(level), float(lo), float(hi)))


def fit_outcome_models(assign: TargetAssignment, ds: MetaDataset,
                       covariates: Sequence[str] | None = None) -> tuple[OutcomeModelFit, OutcomeModelFit]:
    """Fit one linear outcome model per arm on the pooled contributing rows of that arm."""
    schema = _schema(ds, covariates)
    fits = []
    for arm in ds.treatment_pair:
        rows = assign.contributing_rows[ds.arm[assign.contributing_rows] == arm]
        X = _design(ds, rows, schema)
        if rows.size < X.values.shape[1] + 2:
            raise TransportError(f"arm {arm!r}: {rows.size} contributing rows for "
                                 f"{X.values.shape[1]} outcome-model coefficients")
        fits.append(OutcomeModelFit(arm, fit_ols(X, ds.outcome[rows]), schema))
    return fits[0], fits[1]


def estimate_om(assign: TargetAssignment, ds: MetaDataset, g_a: OutcomeModelFit,
                g_a_prime: OutcomeModelFit) -> TransportEstimate:
    """Average the per-arm outcome predictions over the target sample."""
    if assign.n_target == 0:
        raise TransportError("target sample is empty")
    mu_a = float(np.mean(g_a.predict(ds, assign.target_rows)))
    mu_b = float(np.mean(g_a_prime.predict(ds, assign.target_rows)))
    return TransportEstimate("om", mu_a - mu_b, (mu_a, mu_b))


def _kernel_inputs(ds: MetaDataset, rows: np.ndarray, schema: CovariateSchema):
    cont = [c for c in schema if not c.is_categorical]
    cat = [c for c in schema if c.is_categorical]
    xc = np.column_stack([ds.column(c.name)[rows] for c in cont]) if cont else np.empty((rows.size, 0))
    if cat:
        xd = np.column_stack([[c.levels.index(v) for v in ds.column(c.name)[rows]] for c in cat])
    else:
        xd = np.empty((rows.size, 0))
    return xc, xd.astype(int)


def fit_participation(assign: TargetAssignment, ds: MetaDataset, method: str = "logistic",
                      clip_epsilon: float = 0.0, covariates: Sequence[str] | None = None,
                      seed: int = 0) -> ParticipationModelFit:
    """Fit ``Pr[target | X]`` over target and contributing rows by logistic regression or kernel smoothing."""
    if not 0 <= clip_epsilon < 0.5:
        raise ValueError("clip_epsilon must lie in [0, 0.5)")
    if assign.n_target == 0 or assign.contributing_rows.size == 0:
        raise TransportError("participation model needs target and contributing rows")
    schema = _schema(ds, covariates)
    rows = np.concatenate([assign.target_rows, assign.contributing_rows])
    label = np.concatenate([np.ones(assign.n_target), np.zeros(assign.contributing_rows.size)])
    if method == "logistic":
        fit = fit_logistic(_design(ds, rows, schema), label)
        if fit.separation_detected:
            warnings.warn(f"target {assign.target_study!r}: participation model shows separation "
                          "(fitted probabilities pinned at 0 or 1)", SeparationWarning, stacklevel=2)
    elif method == "kernel":
        xc, xd = _kernel_inputs(ds, rows, schema)
        levels = tuple(len(c.levels) for c in schema if c.is_categorical)
        fit = select_bandwidths(xc, xd, levels, label.astype(int), seed=seed)
    else:
        raise ValueError(f"unknown participation method {method!r}")
    return ParticipationModelFit(method, fit, schema, clip_epsilon)


def fit_treatment_model(assign: TargetAssignment, ds: MetaDataset,
                        covariates: Sequence[str] | None = None) -> TreatmentModelFit:
    """Logistic regression of arm membership on covariates over the pooled contributing rows."""
    schema = _schema(ds, covariates)
    rows = assign.contributing_rows
    a = ds.treatment_pair[0]
    is_a = (ds.arm[rows] == a).astype(float)
    if is_a.min() == is_a.max():
        raise TransportError("treatment model needs both arms among contributing rows")
    return TreatmentModelFit(fit_logistic(_design(ds, rows, schema), is_a), schema, a)


def compute_transport_weights(assign: TargetAssignment, ds: MetaDataset,
                              participation: ParticipationModelFit,
                              treatment: TreatmentModelFit) -> WeightDiagnostics:
    """Weights ``p/(1-p) / e_A`` for contributing rows, with implied study weights and ESS."""
    rows = assign.contributing_rows
    p, no_support = participation.predict(ds, rows)
    e = treatment.prob_own_arm(ds, rows)
    if participation.clip_epsilon == 0:
        if participation.separation_detected:
            pinned = rows[(p <= SEPARATION_PIN) | (p >= 1 - SEPARATION_PIN)]
            raise InfiniteWeightError(
                "infinite weight: logistic participation model is separated, so fitted odds are 0 or "
                f"infinite; rows pinned at the bound: {pinned.tolist()} (set clip_epsilon > 0 or use "
                "the kernel method)", pinned)
        at_one = rows[p >= 1.0]
        if at_one.size:
            raise InfiniteWeightError(
                f"infinite weight: participation probability is 1 for rows {at_one.tolist()}", at_one)
    with np.errstate(divide="ignore", invalid="ignore"):
        w = (p / (1.0 - p)) / e
    w[no_support] = 0.0
    bad = rows[~np.isfinite(w)]
    if bad.size:
        raise InfiniteWeightError(f"infinite weight for rows {bad.tolist()}", bad)
    diag = WeightDiagnostics(
        rows=rows, is_arm_a=ds.arm[rows] == ds.treatment_pair[0], weights=w,
        participation_prob=p, treatment_prob=e, study_ids=ds.study[rows], outcome=ds.outcome[rows],
        n_target=assign.n_target, n_no_support=int(no_support.sum()),
        separation_detected=participation.separation_detected)
    return summarize_weights(diag)


def estimate_ipw(assign: TargetAssignment, ds: MetaDataset, weights: WeightDiagnostics,
                 hajek: bool = False, estimator: str | None = None) -> TransportEstimate:
    """Weighted arm means of contributing outcomes; divided by the target size or, for Hajek, the arm weight total."""
    y = ds.outcome[weights.rows]
    if hajek:
        weights = weights.hajek()
    w, is_a = weights.weights, weights.is_arm_a
    if not np.all(np.isfinite(w)):
        raise InfiniteWeightError("weights are not finite", weights.rows[~np.isfinite(w)])
    means = []
    for mask in (is_a, ~is_a):
        if hajek:
            means.append(float(np.dot(w[mask], y[mask]) / w[mask].sum()))
        else:
            means.append(float(np.dot(w[mask], y[mask]) / assign.n_target))
    name = estimator or ("ipw-h" if hajek else "ipw")
    return TransportEstimate(name, means[0] - means[1], (means[0], means[1]), diagnostics=weights)


def estimate_dr(assign: TargetAssignment, ds: MetaDataset, g_a: OutcomeModelFit,
                g_a_prime: OutcomeModelFit, weights: WeightDiagnostics) -> TransportEstimate:
    """Outcome-model prediction over the target plus weighted residual correction from contributing rows."""
    if weights.normalized:
        raise ValueError("the doubly robust estimator uses unnormalized weights")
    rows, w, is_a = weights.rows, weights.weights, weights.is_arm_a
    y = ds.outcome[rows]
    means = []
    for g, mask in ((g_a, is_a), (g_a_prime, ~is_a)):
        resid = y[mask] - g.predict(ds, rows[mask])
        total = np.dot(w[mask], resid) + np.sum(g.predict(ds, assign.target_rows))
        means.append(float(total / assign.n_target))
    return TransportEstimate("dr", means[0] - means[1], (means[0], means[1]), diagnostics=weights)
