"""L1-regularized logistic regression by quadratic-approximation coordinate descent.

The fitted objective is::

    (1/n) * sum_i w_i * logloss(y_i, b0 + x_i . beta) + lam * sum_j s_j * |beta_j|

where ``s_j`` is the column standard deviation for continuous covariates and 1
for binary ones (penalizing standardized coefficients), and the intercept is
unpenalized.
"""

from __future__ import annotations

import json
import logging
import os
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy import stats
from scipy.special import expit, log_expit

from .cohort import CovariateTable, Design

log = logging.getLogger(__name__)

GRAM_MAX_FEATURES = 200


class NoContrastError(ValueError):
    pass


@dataclass
class SparseLinearModel:
    intercept: float
    coefficients: dict[int, float]
    lam: float
    training_meta: dict = field(default_factory=dict)
    # subjects the model was developed on; not serialized
    development_subjects: np.ndarray | None = field(default=None, repr=False, compare=False)

    def to_dict(self) -> dict:
        return {
            "intercept": self.intercept,
            "lambda": self.lam,
            "coefficients": [{"covariate_id": int(c), "beta": float(b)}
                             for c, b in sorted(self.coefficients.items())],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "SparseLinearModel":
        coefs = {int(r["covariate_id"]): float(r["beta"]) for r in d.get("coefficients", [])}
        return cls(float(d["intercept"]), {c: b for c, b in coefs.items() if b != 0.0},
                   float(d.get("lambda", 0.0)))

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2) + "\n")

    @classmethod
    def load(cls, path) -> "SparseLinearModel":
        return cls.from_dict(json.loads(Path(path).read_text()))


@dataclass
class PerformanceSummary:
    population_label: str
    n: int
    n_events: int
    c_statistic: float = float("nan")
    c_lo: float = float("nan")
    c_hi: float = float("nan")
    calibration_intercept: float = float("nan")
    calibration_slope: float = float("nan")
    flag: str | None = None


@dataclass
class CStatistic:
    c: float
    lo: float
    hi: float
    se: float


# ----------------------------------------------------------------- helpers

def soft_threshold(z, gamma):
    return np.sign(z) * np.maximum(np.abs(z) - gamma, 0.0)


def _soft(z: float, gamma: float) -> float:
    if z > gamma:
        return z - gamma
    if z < -gamma:
        return z + gamma
    return 0.0


def _as_matrix(X):
    if isinstance(X, Design):
        return X.x, X.covariate_ids, X.continuous
    X = np.asarray(X, dtype=float)
    if X.ndim == 1:
        X = X[:, None]
    return X, np.arange(X.shape[1], dtype=np.int64), None


def _check_labels(y, w=None):
    y = np.asarray(y, dtype=float)
    if not np.isin(y, (0.0, 1.0)).all():
        raise ValueError("labels must be binary")
    pos = y == 1 if w is None else (y == 1) & (w > 0)
    neg = y == 0 if w is None else (y == 0) & (w > 0)
    if not pos.any() or not neg.any():
        raise NoContrastError("no contrast: labels contain a single class")
    return y


def penalty_scale(X, continuous=None) -> np.ndarray:
    """Per-column penalty multipliers: SD for continuous columns, 1 for binary."""
    X, _, cont = _as_matrix(X)
    if continuous is None:
        continuous = cont if cont is not None else ~np.isin(X, (0.0, 1.0)).all(axis=0)
    sd = X.std(axis=0)
    return np.where(continuous, sd, 1.0)


def lasso_objective(intercept, beta, X, y, lam, weights=None, scale=None) -> float:
    """Penalized objective in original coefficient units."""
    X, _, _ = _as_matrix(X)
    y = np.asarray(y, float)
    w = np.ones(len(y)) if weights is None else np.asarray(weights, float)
    beta = np.asarray(beta, float)
    scale = np.ones(X.shape[1]) if scale is None else np.asarray(scale, float)
    eta = intercept + X @ beta
    loss = np.sum(w * (np.logaddexp(0.0, eta) - y * eta)) / len(y)
    return float(loss + lam * np.sum(scale * np.abs(beta)))


def logloss_gradient(intercept, beta, X, y, weights=None):
    """Gradient of the unpenalized average log-loss with respect to (intercept, beta)."""
    X, _, _ = _as_matrix(X)
    y = np.asarray(y, float)
    w = np.ones(len(y)) if weights is None else np.asarray(weights, float)
    r = w * (expit(intercept + X @ np.asarray(beta, float)) - y) / len(y)
    return np.concatenate([[r.sum()], X.T @ r])


def lambda_max(X, y, weights=None, continuous=None) -> float:
    """Smallest penalty for which every coefficient is zero."""
    X, _, cont = _as_matrix(X)
    y = np.asarray(y, float)
    w = np.ones(len(y)) if weights is None else np.asarray(weights, float)
    scale = penalty_scale(X, cont if continuous is None else continuous)
    ybar = np.sum(w * y) / np.sum(w)
    grad = np.abs(X.T @ (w * (y - ybar))) / len(y)
    ok = scale > 0
    return float(np.max(grad[ok] / scale[ok])) if ok.any() else 0.0


def default_lambda_grid(lmax: float, n: int = 20, ratio: float = 1e-3) -> np.ndarray:
    if lmax <= 0:
        return np.array([1.0])
    return np.geomspace(lmax, lmax * ratio, n)


# ------------------------------------------------------------------ solver

def _objective_std(b, A, y, v, lam):
    eta = b[0] + A @ b[1:]
    return float(np.sum(v * (np.logaddexp(0.0, eta) - y * eta)) + lam * np.abs(b[1:]).sum())


def _cd_gram(H, g, b0, lam, active, tol, max_sweeps=1000):
    """Minimize g'(b-b0) + 0.5 (b-b0)'H(b-b0) + lam*|b[1:]|_1 by cyclic coordinate descent."""
    b = b0.copy()
    r = np.zeros_like(b)  # H @ (b - b0)
    diag = np.diag(H).tolist()
    g = g.tolist()
    pen = np.full(len(b), lam).tolist()
    pen[0] = 0.0
    coords = np.flatnonzero(active)
    full = True
    for _ in range(max_sweeps):
        todo = coords if full else coords[(b[coords] != 0) | (coords == 0)]
        biggest = 0.0
        for j in todo:
            old = b[j]
            z = diag[j] * old - (g[j] + r[j])
            new = _soft(z, pen[j]) / diag[j]
            if new != old:
                d = new - old
                b[j] = new
                r += H[:, j] * d
                biggest = max(biggest, abs(d))
        if biggest < tol:
            if full:
                break
            full = True
        else:
            full = False
    return b


def _cd_naive(A, s, g, b0, lam, active, tol, max_sweeps=1000):
    """Same problem as ``_cd_gram`` with H = [1 A]' diag(s) [1 A], never formed."""
    b = b0.copy()
    u = np.zeros(A.shape[0])  # [1 A] @ (b - b0)
    diag = np.concatenate([[s.sum()], (s[:, None] * A * A).sum(axis=0)])
    coords = np.flatnonzero(active)
    full = True
    for _ in range(max_sweeps):
        todo = coords if full else coords[(b[coords] != 0) | (coords == 0)]
        biggest = 0.0
        for j in todo:
            col = None if j == 0 else A[:, j - 1]
            hu = np.dot(s, u) if col is None else np.dot(s * col, u)
            old = b[j]
            z = diag[j] * old - (g[j] + hu)
            new = z / diag[j] if j == 0 else _soft(z, lam) / diag[j]
            if new != old:
                d = new - old
                b[j] = new
                u += d if col is None else d * col
                biggest = max(biggest, abs(d))
        if biggest < tol:
            if full:
                break
            full = True
        else:
            full = False
    return b


def _fit_std(A, y, v, lam, b_init, tol, max_sweeps, debug):
    """Coordinate descent on standardized columns ``A``; ``v`` are weights / n."""
    n, p = A.shape
    active = np.ones(p + 1, dtype=bool)
    active[1:] = A.std(axis=0) > 0
    b = b_init.copy()
    b[1:][~active[1:]] = 0.0
    use_gram = p <= GRAM_MAX_FEATURES
    Aaug = np.column_stack([np.ones(n), A]) if use_gram else None
    f = _objective_std(b, A, y, v, lam)
    sweeps = 0
    for sweeps in range(1, max_sweeps + 1):
        eta = b[0] + A @ b[1:]
        mu = expit(eta)
        s = np.maximum(v * mu * (1.0 - mu), 1e-12 * v)
        resid = v * (mu - y)
        g = np.concatenate([[resid.sum()], A.T @ resid])
        inner_tol = min(tol, 1e-3) * 0.1
        if use_gram:
            H = Aaug.T @ (s[:, None] * Aaug)
            cand = _cd_gram(H, g, b, lam, active, inner_tol)
        else:
            cand = _cd_naive(A, s, g, b, lam, active, inner_tol)
        step = 1.0
        f_new = _objective_std(cand, A, y, v, lam)
        while f_new > f and step > 1e-10:
            step *= 0.5
            trial = b + step * (cand - b)
            f_new = _objective_std(trial, A, y, v, lam)
            if f_new <= f:
                cand = trial
        if f_new > f:
            cand, f_new = b, f
        if debug and f_new > f + 1e-12 * max(1.0, abs(f)):
            raise AssertionError(f"objective increased at sweep {sweeps}: {f} -> {f_new}")
        change = np.max(np.abs(cand - b))
        b, f = cand, f_new
        if change < tol:
            break
    return b, sweeps


@dataclass
class _Problem:
    """Standardized, row-compressed fitting problem.

    Rows sharing the same (covariates, label) are merged with summed weights;
    the objective is a weighted average, so the optimum is unchanged.
    """

    A: np.ndarray
    y: np.ndarray
    v: np.ndarray
    scale: np.ndarray
    covariate_ids: np.ndarray
    n: int
    n_events: int


def _prepare(X, y, weights=None, continuous=None) -> _Problem:
    Xm, cov_ids, cont = _as_matrix(X)
    w = np.ones(len(Xm)) if weights is None else np.asarray(weights, float)
    y = _check_labels(y, w)
    if not (np.all(np.isfinite(Xm)) and np.all(np.isfinite(w))):
        raise ValueError("non-finite values in design or weights")
    if (w < 0).any():
        raise ValueError("weights must be non-negative")
    scale = penalty_scale(Xm, cont if continuous is None else continuous)
    scale = np.where(scale > 0, scale, 1.0)
    keep = w > 0
    uniq, inv = _unique_rows(np.column_stack([Xm / scale, y])[keep])
    v = np.bincount(inv, weights=w[keep], minlength=len(uniq)) / len(y)
    return _Problem(uniq[:, :-1], uniq[:, -1], v, scale, cov_ids, len(y), int(np.sum(y)))


def _unique_rows(keys):
    """Distinct rows (in lexicographic order) and the inverse index."""
    if len(keys) == 0:
        return keys, np.zeros(0, dtype=np.int64)
    order = np.lexsort(keys.T[::-1])
    srt = keys[order]
    new = np.empty(len(srt), dtype=bool)
    new[0] = True
    new[1:] = np.any(srt[1:] != srt[:-1], axis=1)
    group = np.cumsum(new) - 1
    inv = np.empty(len(keys), dtype=np.int64)
    inv[order] = group
    return srt[new], inv


def _initial(problem: _Problem, init: SparseLinearModel | None) -> np.ndarray:
    b = np.zeros(problem.A.shape[1] + 1)
    if init is not None:
        b[0] = init.intercept
        pos = {int(c): i for i, c in enumerate(problem.covariate_ids)}
        for c, beta in init.coefficients.items():
            if c in pos:
                b[1 + pos[c]] = beta * problem.scale[pos[c]]
    else:
        ybar = np.clip(np.sum(problem.v * problem.y) / np.sum(problem.v), 1e-12, 1 - 1e-12)
        b[0] = np.log(ybar / (1 - ybar))
    return b


def _to_model(problem: _Problem, b, lam, sweeps) -> SparseLinearModel:
    beta = b[1:] / problem.scale
    coefs = {int(c): float(bj) for c, bj in zip(problem.covariate_ids, beta) if bj != 0.0}
    return SparseLinearModel(float(b[0]), coefs, float(lam),
                             {"n": problem.n, "n_events": problem.n_events, "sweeps": sweeps})


def _solve(problem, lam, b, tol, max_sweeps, debug):
    if lam < 0:
        raise ValueError("lambda must be >= 0")
    if debug is None:
        debug = bool(os.environ.get("RISKSTRAT_DEBUG"))
    return _fit_std(problem.A, problem.y, problem.v, lam, b, tol, max_sweeps, debug)


def fit_logistic_lasso(X, y, lam: float, weights=None, *, continuous=None, init=None,
                       tol: float = 1e-7, max_sweeps: int = 10_000,
                       debug: bool | None = None) -> SparseLinearModel:
    """Fit an L1-penalized logistic regression at a single penalty value.

    Args:
        X: ``Design`` or dense ``(n, p)`` array.
        y: binary labels.
        lam: penalty weight (>= 0).
        weights: optional non-negative per-row weights.
        continuous: optional mask of continuous columns (standardized for penalization).
        init: optional ``SparseLinearModel`` warm start.

    Returns:
        ``SparseLinearModel`` with coefficients in original units.
    """
    problem = _prepare(X, y, weights, continuous)
    b, sweeps = _solve(problem, lam, _initial(problem, init), tol, max_sweeps, debug)
    return _to_model(problem, b, lam, sweeps)


def fit_path(X, y, grid, weights=None, continuous=None, tol=1e-7, debug=None):
    """Warm-started fits along a descending penalty grid."""
    problem = _prepare(X, y, weights, continuous)
    b = _initial(problem, None)
    models = []
    for lam in grid:
        b, sweeps = _solve(problem, float(lam), b, tol, 10_000, debug)
        models.append(_to_model(problem, b, lam, sweeps))
    return models


def coefficient_vector(model: SparseLinearModel, covariate_ids) -> np.ndarray:
    return np.array([model.coefficients.get(int(c), 0.0) for c in covariate_ids])


def linear_predictor(model: SparseLinearModel, X, subject_ids=None) -> np.ndarray:
    """``intercept + x . beta`` per subject; covariates unknown to the data count as 0."""
    if isinstance(X, CovariateTable):
        ids = X.subject_ids if subject_ids is None else np.asarray(subject_ids, np.int64)
        out = np.full(len(ids), model.intercept)
        if not model.coefficients:
            return out
        mc = np.array(sorted(model.coefficients), dtype=np.int64)
        mb = np.array([model.coefficients[int(c)] for c in mc])
        keep = np.isin(X.entry_covariate, mc) & np.isin(X.entry_subject, ids)
        es, ec, ev = X.entry_subject[keep], X.entry_covariate[keep], X.entry_value[keep]
        order = np.argsort(ids, kind="stable")
        rows = order[np.searchsorted(ids[order], es)]
        contrib = ev * mb[np.searchsorted(mc, ec)]
        out += np.bincount(rows, weights=contrib, minlength=len(ids))
        return out
    Xm, cov_ids, _ = _as_matrix(X)
    return model.intercept + Xm @ coefficient_vector(model, cov_ids)


def predict_proba(model: SparseLinearModel, X, subject_ids=None) -> np.ndarray:
    return expit(linear_predictor(model, X, subject_ids))


# ---------------------------------------------------------------------- CV

def stratified_folds(y, k: int, seed) -> np.ndarray:
    rng = np.random.default_rng(seed)
    fold = np.empty(len(y), dtype=np.int64)
    offset = 0
    for cls in (0.0, 1.0):
        idx = np.flatnonzero(y == cls)
        idx = idx[rng.permutation(len(idx))]
        fold[idx] = (np.arange(len(idx)) + offset) % k
        offset += len(idx)
    return fold


def heldout_loglik(model, X, y, weights=None) -> float:
    """Weighted mean Bernoulli log-likelihood."""
    eta = linear_predictor(model, X)
    w = np.ones(len(y)) if weights is None else np.asarray(weights, float)
    ll = y * log_expit(eta) + (1 - y) * log_expit(-eta)
    return float(np.sum(w * ll) / np.sum(w))


def _subset(X, idx):
    if isinstance(X, Design):
        return Design(X.x[idx], X.subject_ids[idx], X.covariate_ids, X.continuous)
    return np.asarray(X)[idx]


def cv_loglik_path(X, y, folds: int = 3, grid=None, weights=None, seed=0, continuous=None):
    """Held-out log-likelihood per fold (rows) and grid value (columns)."""
    if folds < 2:
        raise ValueError("folds must be >= 2")
    y = _check_labels(y)
    w = None if weights is None else np.asarray(weights, float)
    if grid is None:
        grid = default_lambda_grid(lambda_max(X, y, w, continuous))
    grid = np.asarray(grid, float)
    for attempt in range(2):
        fold = stratified_folds(y, folds, [int(seed) & 0xFFFFFFFF, attempt])
        ok = all(np.unique(y[fold == f]).size == 2 and np.unique(y[fold != f]).size == 2
                 for f in range(folds))
        if ok:
            break
        log.warning("fold with a single label class; refolding with shifted seed")
    else:
        raise NoContrastError("no contrast: cross-validation fold with a single label class")
    ll = np.empty((folds, len(grid)))
    for f in range(folds):
        tr, te = np.flatnonzero(fold != f), np.flatnonzero(fold == f)
        wtr = None if w is None else w[tr]
        wte = None if w is None else w[te]
        for j, m in enumerate(fit_path(_subset(X, tr), y[tr], grid, wtr, continuous)):
            ll[f, j] = heldout_loglik(m, _subset(X, te), y[te], wte)
    return grid, ll


def cv_select_lambda(X, y, folds: int = 3, grid=None, weights=None, seed=0, continuous=None):
    """Grid value maximizing mean held-out log-likelihood; ties go to the larger penalty.

    Returns ``(lambda_star, fold_likelihoods)`` where the latter are the per-fold
    held-out log-likelihoods at ``lambda_star``.
    """
    grid, ll = cv_loglik_path(X, y, folds, grid, weights, seed, continuous)
    mean = ll.mean(axis=0)
    best = int(np.flatnonzero(mean == mean.max())[0])
    return float(grid[best]), ll[:, best].tolist()


def fit_lasso_cv(X, y, folds: int = 3, grid=None, weights=None, seed=0,
                 continuous=None) -> SparseLinearModel:
    """Cross-validated penalty selection followed by a warm-started refit on all rows."""
    y = _check_labels(y)
    if grid is None:
        grid = default_lambda_grid(lambda_max(X, y, weights, continuous))
    grid = np.asarray(grid, float)
    lam, fold_ll = cv_select_lambda(X, y, folds, grid, weights, seed, continuous)
    path = grid[grid >= lam]
    model = fit_path(X, y, path, weights, continuous)[-1]
    model.training_meta["fold_likelihoods"] = fold_ll
    return model


# ----------------------------------------------------------------- metrics

def c_statistic(pred, labels) -> CStatistic:
    """Concordance with midrank ties and an asymptotic rank-variance (DeLong) 95% CI."""
    pred = np.asarray(pred, float)
    labels = np.asarray(labels)
    pos, neg = pred[labels == 1], pred[labels == 0]
    n1, n0 = len(pos), len(neg)
    if n1 == 0 or n0 == 0:
        raise NoContrastError("no contrast: c-statistic needs both classes")
    ranks = stats.rankdata(np.concatenate([pos, neg]))
    r_pos = stats.rankdata(pos)
    r_neg = stats.rankdata(neg)
    v10 = (ranks[:n1] - r_pos) / n0
    v01 = 1.0 - (ranks[n1:] - r_neg) / n1
    c = float(v10.mean())
    var = (v10.var(ddof=1) / n1 if n1 > 1 else 0.0) + (v01.var(ddof=1) / n0 if n0 > 1 else 0.0)
    se = float(np.sqrt(var))
    z = stats.norm.ppf(0.975)
    return CStatistic(c, max(0.0, c - z * se), min(1.0, c + z * se), se)


def _newton_logistic(A, y, offset, max_iter=100, tol=1e-10):
    b = np.zeros(A.shape[1])

    def nll(b):
        eta = offset + A @ b
        return float(np.sum(np.logaddexp(0.0, eta) - y * eta))

    f = nll(b)
    for _ in range(max_iter):
        mu = expit(offset + A @ b)
        grad = A.T @ (mu - y)
        H = A.T @ ((mu * (1 - mu))[:, None] * A)
        step = np.linalg.solve(H + 1e-12 * np.eye(len(b)), grad)
        t = 1.0
        while True:
            cand = b - t * step
            fc = nll(cand)
            if fc <= f or t < 1e-8:
                break
            t *= 0.5
        done = np.max(np.abs(cand - b)) < tol
        b, f = cand, fc
        if done:
            break
    return b


def calibration_metrics(pred, labels) -> tuple[float, float]:
    """Calibration-in-the-large intercept (slope fixed at 1) and calibration slope."""
    pred = np.asarray(pred, float)
    y = _check_labels(labels)
    if not ((pred > 0) & (pred < 1)).all():
        raise ValueError("predictions must lie strictly inside (0, 1)")
    if np.ptp(pred) == 0:
        raise ValueError("degenerate predictions: all equal")
    lp = np.log(pred) - np.log1p(-pred)
    ones = np.ones((len(y), 1))
    slope = _newton_logistic(np.column_stack([ones, lp]), y, np.zeros(len(y)))[1]
    intercept = _newton_logistic(ones, y, lp)[0]
    return float(intercept), float(slope)


def performance_summary(pred, labels, population_label: str) -> PerformanceSummary:
    labels = np.asarray(labels)
    out = PerformanceSummary(population_label, int(len(labels)), int(np.sum(labels == 1)))
    try:
        c = c_statistic(pred, labels)
        out.c_statistic, out.c_lo, out.c_hi = c.c, c.lo, c.hi
    except NoContrastError as exc:
        out.flag = str(exc)
        return out
    try:
        out.calibration_intercept, out.calibration_slope = calibration_metrics(pred, labels)
    except ValueError as exc:
        out.flag = f"calibration: {exc}"
    return out
