"""Numerical kernels: least squares, IRLS logistic regression and kernel conditional probabilities.

All fits are pure functions of their inputs. Design matrices carry their
column names so that rank problems can be reported by name.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np
from scipy import linalg, optimize
from scipy.special import expit

from .ipd_core import CovariateSchema

PROB_CLIP = 1e-10
PROB_FLOOR = 1e-10
KERNEL_GRID = 33


class RankDeficiencyError(ValueError):
    """Design matrix is not of full column rank."""

    def __init__(self, message, columns=()):
        super().__init__(message)
        self.columns = tuple(columns)


class LogisticConvergenceError(RuntimeError):
    def __init__(self, message, trace=()):
        super().__init__(f"{message}; deviance trace: {[float(f'{d:.6g}') for d in trace]}")
        self.trace = tuple(trace)


class KernelError(ValueError):
    """Invalid input for kernel probability estimation."""


@dataclass(frozen=True)
class DesignMatrix:
    values: np.ndarray
    columns: tuple[str, ...]

    @property
    def shape(self):
        return self.values.shape


def design_matrix(schema: CovariateSchema, data: Mapping[str, np.ndarray],
                  n: int | None = None, intercept: bool = True) -> DesignMatrix:
    """Encode covariate columns: continuous pass through, categorical one-hot minus the first level."""
    blocks, names = [], []
    if n is None:
        n = len(next(iter(data.values()))) if schema.entries else 0
    if intercept:
        blocks.append(np.ones((n, 1)))
        names.append("(intercept)")
    for cov in schema:
        x = np.asarray(data[cov.name])
        if cov.is_categorical:
            for lv in cov.levels[1:]:
                blocks.append((x == lv).astype(float)[:, None])
                names.append(f"{cov.name}[{lv}]")
        else:
            blocks.append(x.astype(float)[:, None])
            names.append(cov.name)
    values = np.hstack(blocks) if blocks else np.empty((n, 0))
    return DesignMatrix(values, tuple(names))


def _as_design(X) -> DesignMatrix:
    if isinstance(X, DesignMatrix):
        return X
    X = np.asarray(X, dtype=float)
    if X.ndim == 1:
        X = X[:, None]
    return DesignMatrix(X, tuple(f"x{j}" for j in range(X.shape[1])))


def _lstsq(X: DesignMatrix, y: np.ndarray, w: np.ndarray | None = None, rtol: float = 1e-10):
    """Weighted least squares by pivoted QR on column-normalised data."""
    A = X.values
    y = np.asarray(y, dtype=float)
    if w is not None:
        w = np.asarray(w, dtype=float)
        if np.any(w < 0) or not np.all(np.isfinite(w)):
            raise ValueError("weights must be finite and non-negative")
        sw = np.sqrt(w)
        A = A * sw[:, None]
        y = y * sw
        n_eff = int(np.count_nonzero(w))
    else:
        n_eff = A.shape[0]
    n, p = A.shape
    if n_eff < p:
        raise RankDeficiencyError(f"{n_eff} observations for {p} coefficients", X.columns)
    scale = np.linalg.norm(A, axis=0)
    zero = scale == 0
    if zero.any():
        cols = [X.columns[j] for j in np.flatnonzero(zero)]
        raise RankDeficiencyError(f"design columns are identically zero: {cols}", cols)
    Q, R, piv = linalg.qr(A / scale, mode="economic", pivoting=True)
    diag = np.abs(np.diag(R))
    rank = int(np.sum(diag > rtol * diag[0]))
    if rank < p:
        cols = [X.columns[j] for j in piv[rank:]]
        raise RankDeficiencyError(f"collinear design columns: {cols}", cols)
    coef_piv = linalg.solve_triangular(R, Q.T @ y)
    coef = np.empty(p)
    coef[piv] = coef_piv
    coef /= scale
    return coef, n_eff


@dataclass(frozen=True)
class LinearFit:
    coefficients: np.ndarray
    residual_variance: float
    columns: tuple[str, ...]
    n: int

    def predict(self, X) -> np.ndarray:
        return _as_design(X).values @ self.coefficients


def fit_ols(X, y, w=None) -> LinearFit:
    """(Weighted) least squares; raises :class:`RankDeficiencyError` naming collinear columns."""
    X = _as_design(X)
    y = np.asarray(y, dtype=float)
    coef, n_eff = _lstsq(X, y, w)
    resid = y - X.values @ coef
    wr = resid ** 2 if w is None else np.asarray(w, dtype=float) * resid ** 2
    dof = n_eff - X.values.shape[1]
    sigma2 = float(wr.sum() / dof) if dof > 0 else 0.0
    return LinearFit(coef, sigma2, X.columns, n_eff)


@dataclass(frozen=True)
class LogisticFit:
    coefficients: np.ndarray
    converged: bool
    separation_detected: bool
    n_iter: int
    deviance: float
    columns: tuple[str, ...]
    trace: tuple[float, ...] = ()

    def linear_predictor(self, X) -> np.ndarray:
        return _as_design(X).values @ self.coefficients

    def predict(self, X) -> np.ndarray:
        return expit(self.linear_predictor(X))


def _deviance(y, p):
    return float(-2.0 * np.sum(y * np.log(p) + (1 - y) * np.log1p(-p)))


def detect_separation(A, y, tol: float = 1e-7) -> bool:
    """True when the classes are completely or quasi-completely separated.

    Separation holds exactly when some direction ``b != 0`` satisfies
    ``s_i * a_i @ b >= 0`` for every row with ``s_i = 2 y_i - 1``; the logistic
    MLE then does not exist. The check is a linear program that maximises
    ``sum_i s_i * a_i @ b`` over that cone intersected with the unit box, on
    column-scaled data. A strictly positive optimum certifies separation.
    """
    A = np.asarray(A, dtype=float)
    scale = np.max(np.abs(A), axis=0)
    scale[scale == 0] = 1.0
    S = (2 * np.asarray(y, dtype=float) - 1)[:, None] * (A / scale)
    res = optimize.linprog(-S.sum(axis=0), A_ub=-S, b_ub=np.zeros(S.shape[0]),
                  bounds=[(-1.0, 1.0)] * S.shape[1], method="highs")
    if res.status != 0:
        raise LogisticConvergenceError(f"separation check failed: {res.message}", ())
    return bool(-res.fun > tol * S.shape[0])


def fit_logistic(X, y, max_iter: int = 50, tol: float = 1e-10) -> LogisticFit:
    """Logistic regression by iteratively reweighted least squares.

    Probabilities are clipped to ``[1e-10, 1 - 1e-10]`` inside the iterations
    only, and a step is halved while it increases the deviance. Convergence is
    declared when ``|dev_old - dev| / (|dev| + 0.1) < tol``. Complete or
    quasi-complete separation shows up as fitted probabilities pinned at the
    clipping bound; it is diagnosed exactly by :func:`detect_separation` and
    reported through ``separation_detected`` rather than raised.
    """
    X = _as_design(X)
    y = np.asarray(y, dtype=float)
    if not np.all((y == 0) | (y == 1)):
        raise ValueError("logistic response must be binary 0/1")
    if y.min() == y.max():
        raise ValueError("logistic response has a single class")
    A = X.values
    beta = np.zeros(A.shape[1])
    eta = A @ beta
    p = np.clip(expit(eta), PROB_CLIP, 1 - PROB_CLIP)
    dev = _deviance(y, p)
    trace = [dev]
    converged = False
    it = 0
    for it in range(1, max_iter + 1):
        W = p * (1 - p)
        z = eta + (y - p) / W
        beta_new, _ = _lstsq(X, z, W)
        for _ in range(30):
            eta_new = A @ beta_new
            p_new = np.clip(expit(eta_new), PROB_CLIP, 1 - PROB_CLIP)
            dev_new = _deviance(y, p_new)
            if dev_new <= dev * (1 + 1e-12) + 1e-12:
                break
            beta_new = 0.5 * (beta + beta_new)
        change = abs(dev - dev_new) / (abs(dev_new) + 0.1)
        beta, eta, p, dev = beta_new, eta_new, p_new, dev_new
        trace.append(dev)
        if change < tol:
            converged = True
            break
    separation = detect_separation(A, y)
    if not converged and not separation:
        raise LogisticConvergenceError(f"IRLS did not converge in {max_iter} iterations", trace)
    return LogisticFit(beta, converged, separation, it, dev, X.columns, tuple(trace))


# --------------------------------------------------------------------------------------------
# kernel conditional probability
# --------------------------------------------------------------------------------------------

def _columns_2d(x, n_rows: int | None, width: int | None, dtype) -> np.ndarray:
    """Coerce ``x`` to a 2-D array, accepting 1-D input as a single column and empty widths."""
    x = np.asarray(x, dtype=dtype)
    if x.ndim == 2:
        return x
    if x.size == 0:
        return np.empty((n_rows or 0, 0), dtype=dtype)
    if width is not None:
        return x.reshape(-1, width)
    return x.reshape(n_rows, -1)


@dataclass(frozen=True)
class KernelModel:
    """Nadaraya-Watson estimate of ``Pr[label = 1 | x]`` with a mixed product kernel.

    Continuous coordinates use a Gaussian kernel with bandwidths ``bandwidths``;
    categorical coordinates (integer codes) use the Aitchison-Aitken kernel with
    smoothing ``smoothing[d]`` in ``[0, (L-1)/L]``.
    """

    continuous: np.ndarray
    categorical: np.ndarray
    n_levels: tuple[int, ...]
    labels: np.ndarray
    bandwidths: np.ndarray
    smoothing: np.ndarray
    loglik: float = float("nan")

    def __post_init__(self):
        cont = np.asarray(self.continuous, dtype=float)
        cat = np.asarray(self.categorical, dtype=int)
        n = self.labels.shape[0]
        object.__setattr__(self, "continuous", _columns_2d(cont, n, None, float))
        object.__setattr__(self, "categorical", _columns_2d(cat, n, None, int))
        object.__setattr__(self, "bandwidths", np.asarray(self.bandwidths, dtype=float).ravel())
        object.__setattr__(self, "smoothing", np.asarray(self.smoothing, dtype=float).ravel())
        if self.bandwidths.size != self.continuous.shape[1]:
            raise KernelError("one bandwidth per continuous coordinate is required")
        if self.smoothing.size != self.categorical.shape[1] or len(self.n_levels) != self.smoothing.size:
            raise KernelError("one smoothing parameter and level count per categorical coordinate")
        if np.any(~(self.bandwidths > 0)):
            raise KernelError("continuous bandwidths must be positive")
        for lam, L in zip(self.smoothing, self.n_levels):
            if not 0 <= lam <= (L - 1) / L + 1e-15:
                raise KernelError(f"categorical smoothing {lam} outside [0, {(L - 1) / L}]")


@dataclass(frozen=True)
class KernelPrediction:
    prob: np.ndarray
    no_support: np.ndarray = field(repr=False)


def _aa_factor(lam, n_levels, equal):
    return np.where(equal, 1.0 - lam, lam / (n_levels - 1))


def kernel_weights(model: KernelModel, xc: np.ndarray, xd: np.ndarray) -> np.ndarray:
    """Product-kernel weights between query rows and training rows, shape ``(m, n)``."""
    xc = _columns_2d(xc, None, model.continuous.shape[1], float)
    xd = _columns_2d(xd, None, model.categorical.shape[1], int)
    m = max(xc.shape[0], xd.shape[0])
    expo = np.zeros((m, model.labels.size))
    for d, h in enumerate(model.bandwidths):
        u = (xc[:, d][:, None] - model.continuous[:, d][None, :]) / h
        expo += u * u
    K = np.exp(-0.5 * expo)
    for d, (lam, L) in enumerate(zip(model.smoothing, model.n_levels)):
        K *= _aa_factor(lam, L, xd[:, d][:, None] == model.categorical[:, d][None, :])
    return K


def kernel_probs(model: KernelModel, xc, xd, chunk: int = 2048) -> KernelPrediction:
    """Vectorised :func:`kernel_prob`; rows without kernel support get probability 0."""
    xc = _columns_2d(xc, None, model.continuous.shape[1], float)
    xd = _columns_2d(xd, None, model.categorical.shape[1], int)
    m = max(xc.shape[0], xd.shape[0])
    prob = np.zeros(m)
    no_support = np.zeros(m, dtype=bool)
    y = model.labels.astype(float)
    for start in range(0, m, chunk):
        sl = slice(start, start + chunk)
        K = kernel_weights(model, xc[sl], xd[sl])
        den = K.sum(axis=1)
        num = K @ y
        ok = den > np.finfo(float).tiny
        prob[sl] = np.where(ok, num / np.where(ok, den, 1.0), 0.0)
        no_support[sl] = ~ok
    return KernelPrediction(np.clip(prob, 0.0, 1.0), no_support)


def kernel_prob(model: KernelModel, xc=(), xd=()) -> tuple[float, bool]:
    """``Pr[label = 1 | x]`` at one query point; returns ``(probability, no_local_support)``."""
    pred = kernel_probs(model, np.asarray(xc, dtype=float), np.asarray(xd, dtype=int))
    return float(pred.prob[0]), bool(pred.no_support[0])


def bandwidth_bounds(continuous: np.ndarray) -> np.ndarray:
    """Search interval ``[1e-3 sd, 1e3 sd]`` for each continuous coordinate, shape ``(q, 2)``."""
    continuous = np.asarray(continuous, dtype=float)
    sd = continuous.std(axis=0, ddof=1) if continuous.shape[0] > 1 else np.zeros(continuous.shape[1])
    return np.column_stack([1e-3 * sd, 1e3 * sd])


def loo_loglik_terms(p_loo: np.ndarray, labels: np.ndarray) -> np.ndarray:
    p = np.clip(p_loo, PROB_FLOOR, 1 - PROB_FLOOR)
    return np.where(labels == 1, np.log(p), np.log1p(-p))


class _LooObjective:
    """Leave-one-out conditional log-likelihood with cached pairwise distance matrices."""

    def __init__(self, continuous, categorical, n_levels, labels):
        self.labels = labels.astype(float)
        self.n_levels = n_levels
        self.sq = [np.subtract.outer(c, c) ** 2 for c in continuous.T]
        self.eq = [np.equal.outer(c, c) for c in categorical.T]
        self.n = labels.size
        self.qc = len(self.sq)

    def factor(self, j, value):
        """Fresh ``(n, n)`` kernel factor for parameter ``j`` (log bandwidth or smoothing)."""
        if j < self.qc:
            out = np.multiply(self.sq[j], -0.5 / np.exp(value) ** 2)
            return np.exp(out, out=out)
        d = j - self.qc
        return _aa_factor(value, self.n_levels[d], self.eq[d])

    def from_kernel(self, K):
        """Log-likelihood from a full kernel matrix; ``K`` is overwritten."""
        np.fill_diagonal(K, 0.0)
        return self.from_sums(K @ self.labels, K.sum(axis=1))

    def categorical_sums(self, d, others):
        """Row sums needed to evaluate categorical parameter ``d`` in O(n) per value.

        The Aitchison-Aitken factor takes one value on matching levels and one
        elsewhere, so the leave-one-out numerator and denominator are linear in
        those two values. Returns ``(num_eq, num_ne, den_eq, den_ne)``.
        """
        eq = self.eq[d]
        O = np.ones((self.n, self.n)) if others is None else others.copy()
        np.fill_diagonal(O, 0.0)
        Oeq = np.where(eq, O, 0.0)
        den_all, num_all = O.sum(axis=1), O @ self.labels
        den_eq, num_eq = Oeq.sum(axis=1), Oeq @ self.labels
        return num_eq, num_all - num_eq, den_eq, den_all - den_eq

    def from_categorical_sums(self, d, value, sums):
        num_eq, num_ne, den_eq, den_ne = sums
        same, other = 1.0 - value, value / (self.n_levels[d] - 1)
        return self.from_sums(same * num_eq + other * num_ne, same * den_eq + other * den_ne)

    def from_sums(self, num, den):
        ok = den > np.finfo(float).tiny
        # unsupported rows get the floor probability for their observed label
        p = np.where(ok, num / np.where(ok, den, 1.0), 1.0 - self.labels)
        return float(loo_loglik_terms(p, self.labels).sum())

    def __call__(self, theta):
        K = np.ones((self.n, self.n))
        for j, v in enumerate(theta):
            K *= self.factor(j, v)
        return self.from_kernel(K)


def select_bandwidths(continuous, categorical, n_levels: Sequence[int], labels,
                      seed: int = 0, restarts: int = 3, max_sweeps: int = 25) -> KernelModel:
    """Maximise the leave-one-out log-likelihood of the labels over kernel parameters.

    Each coordinate is updated by a scan over a fixed grid (log-spaced for
    bandwidths, linear for categorical smoothing) followed by bounded Brent
    refinement between the neighbouring grid points. Sweeps repeat until the
    objective stops improving. With more than one parameter the search is
    restarted from ``restarts`` random points drawn with ``seed``.
    """
    labels = np.asarray(labels).astype(int).ravel()
    n = labels.size
    continuous = _columns_2d(continuous, n, None, float)
    categorical = _columns_2d(categorical, n, None, int)
    n_levels = tuple(int(L) for L in n_levels)
    if n < 10:
        raise KernelError(f"bandwidth selection needs at least 10 rows, got {n}")
    if labels.min() == labels.max():
        raise KernelError("bandwidth selection needs both labels present")
    bounds = bandwidth_bounds(continuous)
    if np.any(bounds[:, 1] <= 0):
        raise KernelError("a continuous covariate has zero variance; remove it or declare it categorical")

    obj = _LooObjective(continuous, categorical, n_levels, labels)
    qc, qd = continuous.shape[1], categorical.shape[1]
    lo = np.concatenate([np.log(bounds[:, 0]), np.zeros(qd)])
    hi = np.concatenate([np.log(bounds[:, 1]), [(L - 1) / L for L in n_levels]])

    def coordinate_search(theta):
        theta = theta.copy()
        best = obj(theta)
        for _ in range(max_sweeps):
            previous = best
            for j in range(theta.size):
                others = None
                for k, v in enumerate(theta):
                    if k != j:
                        others = obj.factor(k, v) if others is None else others * obj.factor(k, v)

                if j >= qc:
                    sums = obj.categorical_sums(j - qc, others)

                    def f(v, d=j - qc, sums=sums):
                        return obj.from_categorical_sums(d, v, sums)
                else:
                    def f(v, j=j, others=others):
                        K = obj.factor(j, v)
                        if others is not None:
                            K *= others
                        return obj.from_kernel(K)

                grid = np.linspace(lo[j], hi[j], KERNEL_GRID)
                vals = np.array([f(v) for v in grid])
                g = int(np.argmax(vals))
                cand, cand_val = grid[g], vals[g]
                a, b = grid[max(g - 1, 0)], grid[min(g + 1, KERNEL_GRID - 1)]
                res = optimize.minimize_scalar(lambda v: -f(v), bounds=(a, b), method="bounded",
                                               options={"xatol": 1e-10 * max(1.0, abs(b - a))})
                # refinement must beat the grid by more than rounding so exact grid points (such as
                # zero smoothing) win ties
                if -res.fun > cand_val + 1e-9 * (1 + abs(cand_val)):
                    cand, cand_val = float(res.x), -float(res.fun)
                if cand_val > best:
                    theta[j], best = cand, cand_val
            # a single coordinate is already globally scanned in one sweep
            if theta.size == 1 or best - previous <= 1e-10 * (1 + abs(best)):
                break
        return theta, best

    sd = np.std(continuous, axis=0, ddof=1)
    start = np.concatenate([np.log(np.clip(1.06 * sd * n ** -0.2, np.exp(lo[:qc]), np.exp(hi[:qc]))),
                            [0.5 * (L - 1) / L for L in n_levels]])
    starts = [start]
    if start.size > 1:
        rng = np.random.default_rng(seed)
        starts += [rng.uniform(lo, hi) for _ in range(restarts)]
    best_theta, best_val = None, -np.inf
    for s in starts:
        theta, val = coordinate_search(s)
        if val > best_val:
            best_theta, best_val = theta, val
    # clip away the rounding of exp(log(bound)) so selected values stay inside the search box
    bandwidths = np.clip(np.exp(best_theta[:qc]), bounds[:, 0], bounds[:, 1])
    return KernelModel(continuous, categorical, n_levels, labels,
                       bandwidths, best_theta[qc:], loglik=best_val)
