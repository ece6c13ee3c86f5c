"""Independent reference computations used as test oracles.

Nothing here imports the package under test beyond plain data types, so a
shared bug cannot make an implementation agree with its own oracle.
"""

import math

import numpy as np


def pi11_bisection(e0, e1, theta, tol=1e-15, max_iter=200):
    """Always-buyer probability by bisection on the odds-ratio equation.

    On ``[max(0, e0+e1-1), min(e0, e1)]`` the map
    ``p -> p (1 - e0 - e1 + p) - theta (e0 - p)(e1 - p)`` is nondecreasing
    (both terms of its derivative ``1 - e0 - e1 + 2p + theta (e0 + e1 - 2p)``
    are nonnegative there), negative at the left end and nonnegative at the
    right end, so the root is unique.
    """
    lo = max(0.0, e0 + e1 - 1.0)
    hi = min(e0, e1)

    def f(p):
        return p * (1.0 - e0 - e1 + p) - theta * (e0 - p) * (e1 - p)

    flo = f(lo)
    if flo >= 0:
        return lo
    for _ in range(max_iter):
        mid = 0.5 * (lo + hi)
        if hi - lo < tol:
            break
        if f(mid) < 0:
            lo = mid
        else:
            hi = mid
    return 0.5 * (lo + hi)


def central_difference(f, x, step=1e-5):
    """Central finite-difference gradient of a scalar function."""
    x = np.asarray(x, dtype=float)
    g = np.empty_like(x)
    for j in range(x.size):
        e = np.zeros_like(x)
        e[j] = step
        g[j] = (f(x + e) - f(x - e)) / (2.0 * step)
    return g


def multinomial_probs(l01, l10, eta):
    """Strata probabilities from the two logits by explicit normalisation."""
    w = np.array([1.0, math.exp(l01), math.exp(l10), math.exp(l01 + l10 + eta)])
    return w / w.sum()


def logistic_newton(X, y, iters=50):
    """Plain unweighted Newton iterations for a logistic regression."""
    beta = np.zeros(X.shape[1])
    for _ in range(iters):
        p = 1.0 / (1.0 + np.exp(-X @ beta))
        H = X.T @ (X * (p * (1 - p))[:, None])
        beta = beta + np.linalg.solve(H, X.T @ (y - p))
    return beta


def gauss_mc_mean(f, mean, n, seed):
    """Monte Carlo mean and standard error of ``f(X)`` with ``X ~ N(mean, I)``."""
    rng = np.random.default_rng(seed)
    x = np.asarray(mean) + rng.standard_normal((n, len(mean)))
    v = f(x)
    return float(np.mean(v)), float(np.std(v, ddof=1) / np.sqrt(n))
