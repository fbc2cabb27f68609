"""Independent reference implementations used to check the library.

Each oracle is deliberately naive (loops, brute force, grid search) and shares
no code with the package under test.
"""

import math

import numpy as np


# ---------------------------------------------------------------- LASSO

def lasso_objective(b0, beta, X, y, lam, scale, w=None):
    n = len(y)
    w = np.ones(n) if w is None else w
    eta = b0 + X @ beta
    loss = np.sum(w * (np.logaddexp(0.0, eta) - y * eta)) / n
    return float(loss + lam * np.sum(scale * np.abs(beta)))


def projected_gradient_lasso(X, y, lam, scale, w=None, iters=200000, tol=1e-13):
    """Accelerated projected gradient on the split form beta = u - v, u, v >= 0.

    Smooth objective over (b0, u, v) with the non-negativity box handled by
    projection; adaptive restart keeps the iteration monotone.
    """
    n, p = X.shape
    w = np.ones(n) if w is None else w
    A = np.hstack([np.ones((n, 1)), X, -X])
    L = 0.25 * w.max() * np.linalg.norm(A, 2) ** 2 / n
    step = 1.0 / L
    pen = np.concatenate([[0.0], lam * scale, lam * scale])

    def f(z):
        eta = A @ z
        return np.sum(w * (np.logaddexp(0.0, eta) - y * eta)) / n + pen @ z

    def grad(z):
        r = w * (1.0 / (1.0 + np.exp(-(A @ z))) - y) / n
        return A.T @ r + pen

    def project(z):
        z = z.copy()
        z[1:] = np.maximum(z[1:], 0.0)
        return z

    z = np.zeros(2 * p + 1)
    z_prev = z.copy()
    fz = f(z)
    t = 1.0
    for _ in range(iters):
        t_next = 0.5 * (1 + math.sqrt(1 + 4 * t * t))
        yk = z + ((t - 1) / t_next) * (z - z_prev)
        cand = project(yk - step * grad(yk))
        fc = f(cand)
        if fc > fz:
            # restart from the current iterate with a plain projected step
            t_next = 1.0
            cand = project(z - step * grad(z))
            fc = f(cand)
        z_prev, z, t = z, cand, t_next
        done = abs(fz - fc) < tol and np.max(np.abs(z - z_prev)) < 1e-10
        fz = fc
        if done:
            break
    return z[0], z[1:p + 1] - z[p + 1:], float(fz)


# ---------------------------------------------------------------- Cox

def efron_partial_loglik(beta, time, event, z, strata=None):
    """Efron partial log-likelihood written as explicit loops over event times."""
    time = list(time)
    event = list(event)
    z = list(z)
    strata = [0] * len(time) if strata is None else list(strata)
    ll = 0.0
    for s in set(strata):
        idx = [i for i in range(len(time)) if strata[i] == s]
        for t in sorted({time[i] for i in idx if event[i]}):
            dead = [i for i in idx if time[i] == t and event[i]]
            risk = [i for i in idx if time[i] >= t]
            d = len(dead)
            r_sum = sum(math.exp(beta * z[i]) for i in risk)
            d_sum = sum(math.exp(beta * z[i]) for i in dead)
            ll += sum(beta * z[i] for i in dead)
            for k in range(d):
                ll -= math.log(r_sum - (k / d) * d_sum)
    return ll


def grid_maximize(fun, lo, hi, points=2001, rounds=8):
    """Nested grid search for the maximizer of a unimodal function."""
    for _ in range(rounds):
        grid = np.linspace(lo, hi, points)
        vals = np.array([fun(g) for g in grid])
        k = int(np.argmax(vals))
        span = (hi - lo) / (points - 1)
        lo, hi = grid[k] - 2 * span, grid[k] + 2 * span
    return float(grid[k])


# ---------------------------------------------------------------- matching

def brute_force_match(logit_ps, treatment, width):
    """Greedy matching by explicit search: treated in descending score order,
    each takes the closest unused comparator within ``width`` (lower score on ties)."""
    treated = sorted(np.flatnonzero(treatment == 1), key=lambda i: -logit_ps[i])
    free = set(np.flatnonzero(treatment == 0).tolist())
    pairs = {}
    for t in treated:
        best, dist = None, None
        for c in sorted(free, key=lambda c: (logit_ps[c], c)):
            d = abs(logit_ps[t] - logit_ps[c])
            if dist is None or d < dist:
                best, dist = c, d
        if best is not None and dist <= width:
            pairs[int(t)] = int(best)
            free.remove(best)
    return pairs


# ---------------------------------------------------------------- c-statistic

def pairwise_concordance(pred, labels):
    num = 0.0
    den = 0
    for i in np.flatnonzero(labels == 1):
        for j in np.flatnonzero(labels == 0):
            den += 1
            if pred[i] > pred[j]:
                num += 1.0
            elif pred[i] == pred[j]:
                num += 0.5
    return num / den


# ---------------------------------------------------------------- KM

def product_limit(time, event, t):
    s = 1.0
    for u in sorted(set(tt for tt, e in zip(time, event) if e)):
        if u > t:
            break
        n = sum(1 for tt in time if tt >= u)
        d = sum(1 for tt, e in zip(time, event) if e and tt == u)
        s *= 1.0 - d / n
    return s


# ---------------------------------------------------------------- null

def grid_null_mle(y, se, mu_range=(-1.0, 1.0), sigma_max=1.0, points=401, rounds=6):
    """Two-dimensional nested grid maximizer of the N(mu, sigma^2 + se^2) likelihood."""
    y = np.asarray(y, float)
    se2 = np.asarray(se, float) ** 2

    def ll(mu, sigma):
        v = sigma ** 2 + se2
        return -0.5 * np.sum(np.log(2 * np.pi * v) + (y - mu) ** 2 / v)

    mlo, mhi = mu_range
    slo, shi = 0.0, sigma_max
    for _ in range(rounds):
        mus = np.linspace(mlo, mhi, points)
        sigs = np.linspace(slo, shi, points)
        best = max(((ll(m, s), m, s) for m in mus[::4] for s in sigs[::4]))
        # refine on the full grid around the coarse best
        _, m0, s0 = best
        dm, ds = (mhi - mlo) / 20, (shi - slo) / 20
        mlo, mhi = m0 - dm, m0 + dm
        slo, shi = max(0.0, s0 - ds), s0 + ds
    return m0, s0
