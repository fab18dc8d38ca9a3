"""Leave-one-study-out evaluation, error metrics, bootstrap intervals and effect-modifier screening."""

from __future__ import annotations

import logging
import warnings
from collections import Counter
from concurrent.futures import ProcessPoolExecutor, ThreadPoolExecutor
from itertools import repeat
from dataclasses import dataclass, field
from typing import Callable, Mapping, Sequence

import numpy as np
from scipy import stats

from . import aggregate_ma, transport
from .ipd_core import (
    DataError, MetaDataset, StudyExclusionWarning, TargetAssignment, covariate_aggregates, partition,
    study_summaries, summarize_study,
)
from .numerics import DesignMatrix, design_matrix, fit_ols

logger = logging.getLogger(__name__)

AGGREGATE_ESTIMATORS = ("fe-ma", "re-ma", "meta-reg")
ESTIMATOR_IDS = transport.TRANSPORT_ESTIMATORS + AGGREGATE_ESTIMATORS

# exceptions that mark a single estimate as failed without stopping a run
ESTIMATION_ERRORS = (ValueError, ArithmeticError, RuntimeError, np.linalg.LinAlgError)


@dataclass(frozen=True)
class EstimatorSettings:
    """Model choices shared by the estimators.

    ``participation_method`` and ``clip_epsilon`` apply to ``dr``; the
    ``ipw``/``ipw-h`` estimators always use logistic participation and
    ``np-ipw``/``np-ipw-h`` always use the kernel model. Covariate lists of
    ``None`` mean every schema covariate.
    """

    participation_method: str = "logistic"
    clip_epsilon: float = 0.0
    outcome_covariates: tuple[str, ...] | None = None
    participation_covariates: tuple[str, ...] | None = None
    treatment_covariates: tuple[str, ...] | None = None
    meta_regression_covariates: tuple[str, ...] | None = None
    bandwidth_seed: int = 0


@dataclass(frozen=True)
class BootstrapSpec:
    replicates: int
    seed: int
    max_failure_rate: float = 0.2

    def __post_init__(self):
        if self.replicates < 1:
            raise ValueError("bootstrap needs at least one replicate")


class BootstrapError(RuntimeError):
    pass


class _FitCache:
    """Model fits shared by the estimators evaluated on one assignment."""

    def __init__(self, ds: MetaDataset, assign: TargetAssignment, settings: EstimatorSettings):
        self.ds, self.assign, self.settings = ds, assign, settings
        self._store = {}

    def _get(self, key, build):
        if key not in self._store:
            try:
                self._store[key] = (True, build())
            except ESTIMATION_ERRORS as exc:
                self._store[key] = (False, exc)
        ok, value = self._store[key]
        if not ok:
            raise value
        return value

    def outcome(self):
        return self._get("outcome", lambda: transport.fit_outcome_models(
            self.assign, self.ds, self.settings.outcome_covariates))

    def treatment(self):
        return self._get("treatment", lambda: transport.fit_treatment_model(
            self.assign, self.ds, self.settings.treatment_covariates))

    def weights(self, method: str, clip_epsilon: float):
        def build():
            part = transport.fit_participation(
                self.assign, self.ds, method, clip_epsilon, self.settings.participation_covariates,
                seed=self.settings.bandwidth_seed)
            return transport.compute_transport_weights(self.assign, self.ds, part, self.treatment())
        return self._get(("weights", method, clip_epsilon), build)

    def summaries(self):
        def build():
            with warnings.catch_warnings():
                warnings.simplefilter("ignore", StudyExclusionWarning)
                return study_summaries(self.ds, self.assign.contributing_studies)
        return self._get("summaries", build)


def _run(cache: _FitCache, estimator: str) -> transport.TransportEstimate:
    ds, assign, st = cache.ds, cache.assign, cache.settings
    if estimator == "om":
        return transport.estimate_om(assign, ds, *cache.outcome())
    if estimator in ("ipw", "ipw-h"):
        w = cache.weights("logistic", st.clip_epsilon)
        return transport.estimate_ipw(assign, ds, w, hajek=estimator == "ipw-h", estimator=estimator)
    if estimator in ("np-ipw", "np-ipw-h"):
        w = cache.weights("kernel", st.clip_epsilon)
        return transport.estimate_ipw(assign, ds, w, hajek=estimator == "np-ipw-h", estimator=estimator)
    if estimator == "dr":
        w = cache.weights(st.participation_method, st.clip_epsilon)
        return transport.estimate_dr(assign, ds, *cache.outcome(), w)
    if estimator == "fe-ma":
        return transport.TransportEstimate("fe-ma", aggregate_ma.fixed_effect(cache.summaries()).estimate)
    if estimator == "re-ma":
        return transport.TransportEstimate("re-ma", aggregate_ma.random_effects_dl(cache.summaries()).estimate)
    if estimator == "meta-reg":
        names = st.meta_regression_covariates
        schema = ds.schema if names is None else ds.schema.subset(names)
        target = covariate_aggregates(ds, assign.target_rows)
        fit = aggregate_ma.meta_regression(cache.summaries(), target, schema)
        return transport.TransportEstimate("meta-reg", fit.prediction)
    raise ValueError(f"unknown estimator {estimator!r}; choose from {ESTIMATOR_IDS}")


def run_estimator(ds: MetaDataset, assign: TargetAssignment, estimator: str,
                  settings: EstimatorSettings = EstimatorSettings()) -> transport.TransportEstimate:
    """Evaluate one estimator id on an assignment."""
    return _run(_FitCache(ds, assign, settings), estimator)


def make_estimator(estimator: str, settings: EstimatorSettings = EstimatorSettings()
                   ) -> Callable[[MetaDataset, TargetAssignment], float]:
    if estimator not in ESTIMATOR_IDS:
        raise ValueError(f"unknown estimator {estimator!r}; choose from {ESTIMATOR_IDS}")

    def estimate(ds, assign):
        return run_estimator(ds, assign, estimator, settings).point
    return estimate


@dataclass(frozen=True)
class Cell:
    """One (target, estimator) entry; exactly one of ``estimate`` and ``failure`` is set."""

    target: str
    estimator: str
    estimate: float | None = None
    failure: str | None = None
    ci: tuple[float, float, float] | None = None
    result: transport.TransportEstimate | None = field(default=None, repr=False, compare=False)

    @property
    def ok(self) -> bool:
        return self.failure is None


def _failure_text(exc: BaseException) -> str:
    return f"{type(exc).__name__}: {exc}"


def estimate_cells(ds: MetaDataset, assign: TargetAssignment, estimators: Sequence[str],
                   settings: EstimatorSettings = EstimatorSettings(),
                   bootstrap: BootstrapSpec | None = None, level: float = 0.95,
                   n_jobs: int = 1) -> list[Cell]:
    """Evaluate every requested estimator on one assignment, recording failures per cell."""
    cache = _FitCache(ds, assign, settings)
    results = {}
    for est in estimators:
        try:
            result = _run(cache, est)
            if not np.isfinite(result.point):
                raise transport.TransportError(f"non-finite estimate {result.point}")
            results[est] = result
        except ESTIMATION_ERRORS as exc:
            results[est] = exc
    intervals = {}
    ok = [e for e in estimators if not isinstance(results[e], BaseException)]
    if bootstrap is not None and ok:
        intervals = bootstrap_intervals(ds, assign, ok, settings, bootstrap, level, n_jobs)
    cells = []
    for est in estimators:
        result = results[est]
        if isinstance(result, BaseException):
            cells.append(Cell(assign.target_study, est, failure=_failure_text(result)))
            continue
        ci = None
        interval = intervals.get(est)
        if isinstance(interval, BaseException):
            logger.warning("bootstrap failed for %s on target %s: %s", est, assign.target_study, interval)
        elif interval is not None:
            ci = (level, *interval)
            result = result.with_ci(level, *interval)
        cells.append(Cell(assign.target_study, est, float(result.point), ci=ci, result=result))
    return cells


# ------------------------------------------------------------------------------------------------
# metrics and reports
# ------------------------------------------------------------------------------------------------

def abs_diff_mean(estimates, observed) -> float:
    """Mean absolute difference between estimates and observed effects."""
    d = np.abs(np.asarray(estimates, dtype=float) - np.asarray(observed, dtype=float))
    return float(np.mean(d))


def standardized_abs_diff(estimates, observed, n_a, n_a_prime, average: bool = True) -> float:
    """Absolute differences scaled by ``(1/n_a + 1/n_a')^(-1/2)``; averaged, or summed if ``average`` is false."""
    d = np.abs(np.asarray(estimates, dtype=float) - np.asarray(observed, dtype=float))
    scale = (1.0 / np.asarray(n_a, dtype=float) + 1.0 / np.asarray(n_a_prime, dtype=float)) ** -0.5
    terms = d * scale
    return float(np.mean(terms) if average else np.sum(terms))


@dataclass(frozen=True)
class ObservedEffect:
    study_id: str
    te: float
    se: float
    n_a: int
    n_a_prime: int


@dataclass(frozen=True)
class SummaryRow:
    estimator: str
    avg_abs_diff: float
    st_abs_diff: float
    st_abs_diff_sum: float
    n_ok: int
    n_failed: int


@dataclass(frozen=True)
class EvalReport:
    """Target-by-estimator matrix of transported estimates with the observed effect per target."""

    targets: tuple[str, ...]
    estimators: tuple[str, ...]
    observed: Mapping[str, ObservedEffect]
    cells: Mapping[tuple[str, str], Cell]
    skipped: tuple[str, ...] = ()

    @classmethod
    def from_columns(cls, targets, observed_te, columns: Mapping[str, Sequence[float]],
                     n_a=None, n_a_prime=None) -> "EvalReport":
        """Build a report from printed columns; ``nan`` entries become failed cells."""
        targets = tuple(str(t) for t in targets)
        m = len(targets)
        n_a = [0] * m if n_a is None else list(n_a)
        n_b = [0] * m if n_a_prime is None else list(n_a_prime)
        observed = {t: ObservedEffect(t, float(te), float("nan"), int(na), int(nb))
                    for t, te, na, nb in zip(targets, observed_te, n_a, n_b)}
        cells = {}
        for est, values in columns.items():
            for t, v in zip(targets, values):
                v = float(v)
                cells[(t, est)] = (Cell(t, est, v) if np.isfinite(v)
                                   else Cell(t, est, failure="missing"))
        return cls(targets, tuple(columns), observed, cells)

    def column(self, estimator: str) -> list[Cell]:
        return [self.cells[(t, estimator)] for t in self.targets]

    def _ok(self, estimator: str):
        cells = [c for c in self.column(estimator) if c.ok]
        if not cells:
            raise ValueError(f"estimator {estimator!r} failed on every target")
        obs = [self.observed[c.target] for c in cells]
        return cells, obs

    def summary(self, estimator: str) -> SummaryRow:
        cells = self.column(estimator)
        n_ok = sum(c.ok for c in cells)
        if n_ok == 0:
            nan = float("nan")
            return SummaryRow(estimator, nan, nan, nan, 0, len(cells))
        aad = avg_abs_diff(self, estimator)
        try:
            sad = st_abs_diff(self, estimator)
            sad_sum = st_abs_diff(self, estimator, average=False)
        except ValueError:
            sad = sad_sum = float("nan")
        return SummaryRow(estimator, aad, sad, sad_sum, n_ok, len(cells) - n_ok)


def avg_abs_diff(report: EvalReport, estimator: str) -> float:
    """Mean over non-failed targets of ``|estimate - observed|``."""
    cells, obs = report._ok(estimator)
    return abs_diff_mean([c.estimate for c in cells], [o.te for o in obs])


def st_abs_diff(report: EvalReport, estimator: str, average: bool = True) -> float:
    """Standardized absolute difference over non-failed targets (mean by default, sum if ``average=False``)."""
    cells, obs = report._ok(estimator)
    if any(o.n_a <= 0 or o.n_a_prime <= 0 for o in obs):
        raise ValueError("arm sizes are required for the standardized absolute difference")
    return standardized_abs_diff([c.estimate for c in cells], [o.te for o in obs],
                                 [o.n_a for o in obs], [o.n_a_prime for o in obs], average)


def observed_te(ds: MetaDataset, target_study: str) -> tuple[float, float]:
    """Difference of arm means within the target study and its standard error."""
    s = summarize_study(ds, str(target_study))
    return s.te, s.se_te


def _evaluate_target(ds: MetaDataset, target: str, estimators, settings, bootstrap, level) -> list[Cell]:
    try:
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", StudyExclusionWarning)
            assign = partition(ds, target)
    except DataError as exc:
        return [Cell(target, e, failure=_failure_text(exc)) for e in estimators]
    return estimate_cells(ds, assign, estimators, settings, bootstrap, level)


def loso_evaluate(ds: MetaDataset, estimators: Sequence[str],
                  settings: EstimatorSettings = EstimatorSettings(),
                  bootstrap: BootstrapSpec | None = None, level: float = 0.95,
                  n_jobs: int = 1) -> EvalReport:
    """Treat each study in turn as the target sample and transport the others to it.

    Studies that cannot provide an observed effect (an arm with fewer than two
    participants) are skipped as targets and listed in ``EvalReport.skipped``.
    Targets are processed independently and may run in parallel; results are
    assembled in study order.
    """
    estimators = tuple(estimators)
    unknown = [e for e in estimators if e not in ESTIMATOR_IDS]
    if unknown:
        raise ValueError(f"unknown estimator(s) {unknown}; choose from {ESTIMATOR_IDS}")
    if len(ds.studies) < 2:
        raise DataError("leave-one-study-out evaluation needs at least 2 studies")

    targets, observed, skipped = [], {}, []
    for s in ds.studies:
        try:
            summ = summarize_study(ds, s)
        except DataError as exc:
            warnings.warn(f"study {s!r} skipped as a target: {exc}", StudyExclusionWarning, stacklevel=2)
            skipped.append(s)
            continue
        targets.append(s)
        observed[s] = ObservedEffect(s, summ.te, summ.se_te, summ.n_a, summ.n_a_prime)

    if n_jobs > 1:
        # targets are independent; separate processes sidestep the interpreter lock
        with ProcessPoolExecutor(max_workers=min(n_jobs, len(targets))) as pool:
            per_target = list(pool.map(_evaluate_target, repeat(ds), targets, repeat(estimators),
                                       repeat(settings), repeat(bootstrap), repeat(level)))
    else:
        per_target = [_evaluate_target(ds, t, estimators, settings, bootstrap, level) for t in targets]
    cells = {(c.target, c.estimator): c for row in per_target for c in row}
    return EvalReport(tuple(targets), estimators, observed, cells, tuple(skipped))


# ------------------------------------------------------------------------------------------------
# bootstrap
# ------------------------------------------------------------------------------------------------

def _strata(ds: MetaDataset, rows: np.ndarray) -> list[np.ndarray]:
    keys = list(zip(ds.study[rows], ds.arm[rows]))
    groups = {}
    for r, k in zip(rows, keys):
        groups.setdefault(k, []).append(r)
    return [np.array(groups[k]) for k in groups]


def _resample_table(evaluate_fn: Callable[[MetaDataset, TargetAssignment], Sequence[float]], k: int,
                    ds: MetaDataset, assign: TargetAssignment, spec: BootstrapSpec, n_jobs: int = 1):
    """Run ``evaluate_fn`` (returning ``k`` values) on every replicate.

    Returns a ``(B, k)`` array with ``nan`` for failed entries and, per column,
    the list of failure reasons. ``evaluate_fn`` may return exception
    instances in place of values to mark single entries as failed.
    """
    retained = np.sort(np.concatenate([assign.target_rows, assign.contributing_rows]))
    strata = _strata(ds, retained)

    def reason(exc):
        return type(exc).__name__ + ": " + str(exc).split(";")[0][:120]

    def replicate(b):
        rng = np.random.default_rng([spec.seed, b])
        idx = np.concatenate([rng.choice(s, size=s.size, replace=True) for s in strata])
        boot = ds.take(idx)
        try:
            with warnings.catch_warnings():
                warnings.simplefilter("ignore")
                out = list(evaluate_fn(boot, partition(boot, assign.target_study)))
        except (DataError, *ESTIMATION_ERRORS) as exc:
            return [(float("nan"), reason(exc))] * k
        row = []
        for v in out:
            if isinstance(v, BaseException):
                row.append((float("nan"), reason(v)))
            elif not np.isfinite(v):
                row.append((float("nan"), "non-finite estimate"))
            else:
                row.append((float(v), None))
        return row

    if n_jobs > 1:
        with ThreadPoolExecutor(max_workers=n_jobs) as pool:
            rows = list(pool.map(replicate, range(spec.replicates)))
    else:
        rows = [replicate(b) for b in range(spec.replicates)]
    values = np.array([[v for v, _ in row] for row in rows]).reshape(spec.replicates, k)
    reasons = [[row[j][1] for row in rows if row[j][1] is not None] for j in range(k)]
    return values, reasons


def bootstrap_replicates(estimator: Callable[[MetaDataset, TargetAssignment], float], ds: MetaDataset,
                         assign: TargetAssignment, spec: BootstrapSpec, n_jobs: int = 1):
    """Replicate estimates (``nan`` where a replicate failed) and the failure reasons.

    Rows are resampled with replacement within each study-by-arm stratum,
    including the target strata, and every model is refitted. Replicate ``b``
    draws from its own generator seeded by ``(seed, b)``.
    """
    values, reasons = _resample_table(lambda d, a: [float(estimator(d, a))], 1, ds, assign, spec, n_jobs)
    return values[:, 0], reasons[0]


def _percentile_interval(values, reasons, spec: BootstrapSpec, level: float) -> tuple[float, float]:
    if len(reasons) > spec.max_failure_rate * spec.replicates:
        counts = Counter(reasons).most_common()
        raise BootstrapError(f"{len(reasons)} of {spec.replicates} bootstrap replicates failed: {counts}")
    ok = values[np.isfinite(values)]
    lo, hi = np.quantile(ok, [(1 - level) / 2, (1 + level) / 2])
    return float(lo), float(hi)


def bootstrap_intervals(ds: MetaDataset, assign: TargetAssignment, estimators: Sequence[str],
                        settings: EstimatorSettings, spec: BootstrapSpec, level: float = 0.95,
                        n_jobs: int = 1) -> dict:
    """Percentile intervals for several estimators from one shared set of replicates.

    Models are fitted once per replicate and reused by every estimator, so
    each interval equals the one ``bootstrap_ci`` gives for that estimator
    alone. Values are ``(lo, hi)`` or the ``BootstrapError`` raised for it.
    """
    if not 0 < level < 1:
        raise ValueError("level must lie in (0, 1)")
    estimators = tuple(estimators)

    def evaluate_all(boot, boot_assign):
        cache = _FitCache(boot, boot_assign, settings)
        out = []
        for est in estimators:
            try:
                out.append(_run(cache, est).point)
            except ESTIMATION_ERRORS as exc:
                out.append(exc)
        return out

    values, reasons = _resample_table(evaluate_all, len(estimators), ds, assign, spec, n_jobs)
    result = {}
    for j, est in enumerate(estimators):
        try:
            result[est] = _percentile_interval(values[:, j], reasons[j], spec, level)
        except BootstrapError as exc:
            result[est] = exc
    return result


def bootstrap_ci(estimator: Callable[[MetaDataset, TargetAssignment], float], ds: MetaDataset,
                 assign: TargetAssignment, spec: BootstrapSpec, level: float = 0.95,
                 n_jobs: int = 1) -> tuple[float, float]:
    """Percentile bootstrap interval for ``estimator`` on a stratified resample of ``ds``."""
    if not 0 < level < 1:
        raise ValueError("level must lie in (0, 1)")
    values, reasons = bootstrap_replicates(estimator, ds, assign, spec, n_jobs)
    return _percentile_interval(values, reasons, spec, level)


# ------------------------------------------------------------------------------------------------
# effect-modifier screening
# ------------------------------------------------------------------------------------------------

@dataclass(frozen=True)
class ScreeningResult:
    selected: tuple[str, ...]
    pvalues: Mapping[str, float]
    alpha: float


def screen_effect_modifiers(ds: MetaDataset, candidates: Sequence[str], alpha: float = 0.05,
                            rows: np.ndarray | None = None) -> ScreeningResult:
    """Select covariates whose interaction with treatment is significant in a pooled linear model.

    The model regresses the outcome on all candidates, the arm indicator and
    every candidate-by-arm interaction. Each candidate is tested with a partial
    F test of its interaction columns.
    """
    schema = ds.schema.subset(candidates)
    if rows is None:
        rows = np.flatnonzero(ds.in_pair())
    rows = np.asarray(rows)
    data = {c.name: ds.column(c.name)[rows] for c in schema}
    main = design_matrix(schema, data, n=rows.size)
    arm = (ds.arm[rows] == ds.treatment_pair[0]).astype(float)
    inter = main.values[:, 1:] * arm[:, None]
    inter_names = tuple(f"{n}:arm" for n in main.columns[1:])
    # interaction columns belonging to each candidate
    owner = []
    for c in schema:
        owner += [c.name] * (len(c.levels) - 1 if c.is_categorical else 1)
    X = np.column_stack([main.values, arm, inter])
    names = (*main.columns, "arm", *inter_names)
    y = ds.outcome[rows]
    full = fit_ols(DesignMatrix(X, names), y)
    n, p = X.shape
    rss_full = full.residual_variance * (n - p)
    pvalues = {}
    base = main.values.shape[1] + 1
    for c in schema:
        drop = [base + j for j, o in enumerate(owner) if o == c.name]
        keep = [j for j in range(p) if j not in drop]
        reduced = fit_ols(DesignMatrix(X[:, keep], tuple(names[j] for j in keep)), y)
        rss_red = reduced.residual_variance * (n - len(keep))
        q = len(drop)
        F = ((rss_red - rss_full) / q) / (rss_full / (n - p))
        pvalues[c.name] = float(stats.f.sf(F, q, n - p))
    selected = tuple(c.name for c in schema if pvalues[c.name] < alpha)
    return ScreeningResult(selected, pvalues, alpha)
