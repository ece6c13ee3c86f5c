"""Response rates and principal-strata probabilities.

Two routes to ``pi(x) = (pi00, pi01, pi10, pi11)``:

* closed form: per-arm logistic response rates ``e0(x)``, ``e1(x)`` inverted
  through a known odds ratio ``theta``;
* a multinomial-logit latent model fitted by EM, with
  ``pi_{s0s1}(x) ∝ exp{s1 * l01(x) + s0 * l10(x) + eta * s0 * s1}``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy.special import expit, log_expit, logsumexp

from .core import Dataset, DatasetError, OddsRatioSpec, validate_dataset

RATE_CLIP = (1e-6, 1 - 1e-6)


class ConvergenceError(RuntimeError):
    """An iterative solver stopped without meeting its tolerance."""

    def __init__(self, message, last_iterate=None, grad_norm=None):
        super().__init__(message)
        self.last_iterate = last_iterate
        self.grad_norm = grad_norm


class SeparationError(ConvergenceError):
    """Logistic weights diverge: the response is (quasi-)separable."""


def design(x: np.ndarray) -> np.ndarray:
    x = np.atleast_2d(np.asarray(x, dtype=float))
    return np.hstack([np.ones((x.shape[0], 1)), x])


# ---------------------------------------------------------------------------
# Logistic regression by Newton-Raphson
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class LogisticFit:
    coef: np.ndarray
    n_iter: int
    grad_norm: float
    loglik: float


def fit_logistic(X, y, weights=None, *, tol=1e-8, max_iter=100, init=None,
                 max_coef=30.0) -> LogisticFit:
    """Weighted logistic regression of ``y`` in [0, 1] on design ``X``.

    Newton-Raphson with step halving on likelihood decrease. Stops when the
    gradient norm of the mean log-likelihood falls below ``tol``.
    """
    X = np.asarray(X, dtype=float)
    y = np.asarray(y, dtype=float)
    w = np.ones_like(y) if weights is None else np.asarray(weights, dtype=float)
    wsum = w.sum()
    if wsum <= 0:
        raise ValueError("weights must have positive sum")
    w = w / wsum
    beta = np.zeros(X.shape[1]) if init is None else np.array(init, dtype=float)

    def loglik(b):
        eta = X @ b
        return float(w @ (y * log_expit(eta) + (1 - y) * log_expit(-eta)))

    ll = loglik(beta)
    grad_norm = np.inf
    for it in range(1, max_iter + 1):
        p = expit(X @ beta)
        grad = X.T @ (w * (y - p))
        grad_norm = float(np.linalg.norm(grad))
        if grad_norm < tol:
            return LogisticFit(beta, it - 1, grad_norm, ll)
        hess = (X * (w * p * (1 - p))[:, None]).T @ X
        try:
            step = np.linalg.solve(hess + 1e-12 * np.eye(len(beta)), grad)
        except np.linalg.LinAlgError:
            step = np.linalg.lstsq(hess, grad, rcond=None)[0]
        t = 1.0
        while True:
            cand = beta + t * step
            ll_new = loglik(cand)
            if ll_new >= ll - 1e-15 or t < 1e-10:
                break
            t *= 0.5
        beta, ll = cand, ll_new
        if np.max(np.abs(beta)) > max_coef:
            raise SeparationError("logistic weights diverging (perfect separation)",
                                  last_iterate=beta, grad_norm=grad_norm)
    p = expit(X @ beta)
    grad_norm = float(np.linalg.norm(X.T @ (w * (y - p))))
    if grad_norm < tol:
        return LogisticFit(beta, max_iter, grad_norm, ll)
    raise ConvergenceError(f"Newton-Raphson did not converge in {max_iter} iterations "
                           f"(gradient norm {grad_norm:.3g})", last_iterate=beta,
                           grad_norm=grad_norm)


# ---------------------------------------------------------------------------
# Closed-form route
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class ResponseRateModel:
    """Per-arm logistic response rates ``e_z(x) = pr(S=1 | Z=z, x)``."""

    coef0: np.ndarray
    coef1: np.ndarray
    lo: float = RATE_CLIP[0]
    hi: float = RATE_CLIP[1]

    @property
    def dim(self) -> int:
        return len(self.coef0) - 1

    def predict(self, x) -> tuple[np.ndarray, np.ndarray]:
        X = design(x)
        if X.shape[1] != len(self.coef0):
            raise ValueError(f"expected {self.dim} covariates, got {X.shape[1] - 1}")
        e0 = np.clip(expit(X @ self.coef0), self.lo, self.hi)
        e1 = np.clip(expit(X @ self.coef1), self.lo, self.hi)
        return e0, e1

    def to_dict(self) -> dict:
        return {"kind": "logistic_rates", "dim": self.dim, "coef0": list(self.coef0),
                "coef1": list(self.coef1), "clip": [self.lo, self.hi]}

    @classmethod
    def from_dict(cls, data: dict) -> "ResponseRateModel":
        c0 = np.asarray(data["coef0"], dtype=float)
        c1 = np.asarray(data["coef1"], dtype=float)
        if len(c0) != data["dim"] + 1 or len(c1) != data["dim"] + 1:
            raise ValueError("response-rate coefficients do not match declared dim")
        lo, hi = data.get("clip", RATE_CLIP)
        return cls(c0, c1, lo, hi)


def fit_response_rates(d: Dataset, *, tol=1e-8, max_iter=100) -> ResponseRateModel:
    """Two logistic regressions of ``S`` on ``(1, A, C)``, one per arm."""
    validate_dataset(d).raise_if_fatal()
    X = design(d.x)
    coefs = {}
    for arm in (0, 1):
        sel = d.z == arm
        frac = d.s[sel].mean()
        if frac == 0 or frac == 1:
            raise DatasetError("degenerate response arm")
        coefs[arm] = fit_logistic(X[sel], d.s[sel], tol=tol, max_iter=max_iter).coef
    return ResponseRateModel(coefs[0], coefs[1])


_THETA_ONE_TOL = 1e-9
_DISCRIMINANT_TOL = 1e-12


def pi11_closed_form(e0, e1, theta):
    """Always-buyer probability from response margins and the odds ratio.

    Solves ``pi00 * pi11 / (pi10 * pi01) = theta`` subject to
    ``pi11 + pi10 = e0`` and ``pi11 + pi01 = e1``. The relevant root of
    ``(theta-1) p^2 - b p + theta e0 e1 = 0`` with ``b = 1 + (theta-1)(e0+e1)``
    and discriminant ``b^2 - 4 theta (theta-1) e0 e1`` is evaluated in a
    cancellation-free form; ``theta == 1`` gives ``e0 * e1``. The result is
    clamped to ``[max(0, e0+e1-1), min(e0, e1)]``. Scalars or arrays.
    """
    e0 = np.asarray(e0, dtype=float)
    e1 = np.asarray(e1, dtype=float)
    theta = np.asarray(theta, dtype=float)
    if np.any(theta <= 0) or not np.all(np.isfinite(theta)):
        raise ValueError("theta must be positive and finite")
    e0, e1, theta = np.broadcast_arrays(e0, e1, theta)
    total = e0 + e1
    indep = np.abs(theta - 1.0) < _THETA_ONE_TOL
    b = 1.0 + (theta - 1.0) * total
    disc = b * b - 4.0 * theta * (theta - 1.0) * e0 * e1
    if np.any(disc[~indep] < -_DISCRIMINANT_TOL):
        raise ValueError("negative discriminant: inconsistent margins for the odds ratio")
    root = np.sqrt(np.maximum(disc, 0.0))
    with np.errstate(divide="ignore", invalid="ignore"):
        # b >= 0: rationalised root; b < 0 only happens for theta < 1
        pos = 2.0 * theta * e0 * e1 / (b + root)
        neg = (root - b) / (2.0 * (1.0 - theta))
        general = np.where(b >= 0, pos, neg)
    out = np.where(indep, e0 * e1, general)
    out = np.where(np.isfinite(out), out, 0.0)
    lower = np.maximum(0.0, total - 1.0)
    upper = np.minimum(e0, e1)
    out = np.clip(out, lower, upper)
    return float(out) if out.ndim == 0 else out


def strata_from_margins(e0, e1, theta) -> np.ndarray:
    """``(pi00, pi01, pi10, pi11)`` along the last axis, on the simplex."""
    p11 = np.asarray(pi11_closed_form(e0, e1, theta), dtype=float)
    e0 = np.asarray(e0, dtype=float)
    e1 = np.asarray(e1, dtype=float)
    p01 = e1 - p11
    p10 = e0 - p11
    p00 = 1.0 - p11 - p01 - p10
    pi = np.clip(np.stack(np.broadcast_arrays(p00, p01, p10, p11), axis=-1), 0.0, 1.0)
    return pi / pi.sum(axis=-1, keepdims=True)


@dataclass(frozen=True)
class ClosedFormStrataModel:
    rates: ResponseRateModel
    odds: OddsRatioSpec

    @property
    def dim(self) -> int:
        return self.rates.dim

    def margins(self, x) -> tuple[np.ndarray, np.ndarray]:
        return self.rates.predict(x)

    def predict(self, x) -> np.ndarray:
        e0, e1 = self.rates.predict(x)
        return strata_from_margins(e0, e1, self.odds.theta)

    def to_dict(self) -> dict:
        return {"kind": "closed_form", "dim": self.dim, "eta": self.odds.eta,
                "rates": self.rates.to_dict()}


# ---------------------------------------------------------------------------
# Multinomial-logit latent model and EM
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class MultinomialStrataModel:
    """``pi ∝ (1, exp(l01), exp(l10), exp(l01 + l10 + eta))``.

    ``iota01`` and ``iota10`` are ``(intercept, weights...)`` over ``X = (A, C)``.
    """

    iota01: np.ndarray
    iota10: np.ndarray
    eta: float = 0.0

    def __post_init__(self):
        i01 = np.asarray(self.iota01, dtype=float).ravel()
        i10 = np.asarray(self.iota10, dtype=float).ravel()
        if i01.shape != i10.shape:
            raise ValueError("iota01 and iota10 must have equal length")
        object.__setattr__(self, "iota01", i01)
        object.__setattr__(self, "iota10", i10)

    @property
    def dim(self) -> int:
        return len(self.iota01) - 1

    @property
    def params(self) -> np.ndarray:
        return np.concatenate([self.iota01, self.iota10])

    def _linear(self, x) -> tuple[np.ndarray, np.ndarray]:
        X = design(x)
        if X.shape[1] != len(self.iota01):
            raise ValueError(f"expected {self.dim} covariates, got {X.shape[1] - 1}")
        return X @ self.iota01, X @ self.iota10

    def log_predict(self, x) -> np.ndarray:
        l01, l10 = self._linear(x)
        logits = np.stack([np.zeros_like(l01), l01, l10, l01 + l10 + self.eta], axis=-1)
        return logits - logsumexp(logits, axis=-1, keepdims=True)

    def predict(self, x) -> np.ndarray:
        pi = np.exp(self.log_predict(x))
        return pi / pi.sum(axis=-1, keepdims=True)

    def margins(self, x) -> tuple[np.ndarray, np.ndarray]:
        pi = self.predict(x)
        return pi[:, 2] + pi[:, 3], pi[:, 1] + pi[:, 3]

    def to_dict(self) -> dict:
        return {"kind": "multinomial", "dim": self.dim, "eta": self.eta,
                "iota01": list(self.iota01), "iota10": list(self.iota10)}


def strata_model_from_dict(data: dict):
    kind = data.get("kind")
    if kind == "multinomial":
        m = MultinomialStrataModel(data["iota01"], data["iota10"], float(data["eta"]))
        if m.dim != data["dim"]:
            raise ValueError("strata parameters do not match declared dim")
        return m
    if kind == "closed_form":
        rates = ResponseRateModel.from_dict(data["rates"])
        if rates.dim != data["dim"]:
            raise ValueError("strata parameters do not match declared dim")
        return ClosedFormStrataModel(rates, OddsRatioSpec(float(data["eta"])))
    raise ValueError(f"unknown strata model kind {kind!r}")


def predict_strata(model, x) -> np.ndarray:
    """Strata probabilities ``(pi00, pi01, pi10, pi11)`` per row of ``x``."""
    return model.predict(x)


# Cell index by (z, s): feasible strata and the column of pi giving the cell probability
def _cell_posteriors(log_pi: np.ndarray, z: np.ndarray, s: np.ndarray):
    """E-step: posterior over strata given ``(Z, S, X)`` plus the cell log-probabilities."""
    mask = np.zeros_like(log_pi, dtype=bool)
    # Z=1: S=1 <-> G in {01, 11}; S=0 <-> G in {00, 10}
    # Z=0: S=1 <-> G in {10, 11}; S=0 <-> G in {00, 01}
    t1 = z == 1
    mask[:, 1] = np.where(t1, s == 1, s == 0)
    mask[:, 2] = np.where(t1, s == 0, s == 1)
    mask[:, 3] = s == 1
    mask[:, 0] = s == 0
    masked = np.where(mask, log_pi, -np.inf)
    cell = logsumexp(masked, axis=1)
    post = np.exp(masked - cell[:, None])
    return post, cell


def observed_loglik(model: MultinomialStrataModel, d: Dataset) -> float:
    """Observed-data log-likelihood of ``S`` given ``(Z, X)``."""
    _, cell = _cell_posteriors(model.log_predict(d.x), d.z, d.s)
    return float(cell.sum())


def _m_step(X, post, eta, start, *, tol=1e-8, max_iter=50):
    """Maximise the expected complete-data log-likelihood over ``(iota01, iota10)``.

    The model is an exponential family in ``(s1 * x, s0 * x)``, so the target is
    concave; Newton with step halving.
    """
    k = X.shape[1]
    n = X.shape[0]
    t1 = post[:, 1] + post[:, 3]  # expected s1
    t0 = post[:, 2] + post[:, 3]  # expected s0
    theta = start.copy()

    def objective(th):
        lp = MultinomialStrataModel(th[:k], th[k:], eta).log_predict(X[:, 1:])
        return float((post * lp).sum()) / n, lp

    q, lp = objective(theta)
    for _ in range(max_iter):
        pi = np.exp(lp)
        e1 = pi[:, 1] + pi[:, 3]
        e0 = pi[:, 2] + pi[:, 3]
        grad = np.concatenate([X.T @ (t1 - e1), X.T @ (t0 - e0)]) / n
        if np.linalg.norm(grad) < tol:
            break
        v11 = e1 * (1 - e1)
        v00 = e0 * (1 - e0)
        v10 = pi[:, 3] - e0 * e1
        H = np.empty((2 * k, 2 * k))
        H[:k, :k] = (X * v11[:, None]).T @ X
        H[k:, k:] = (X * v00[:, None]).T @ X
        H[:k, k:] = H[k:, :k] = (X * v10[:, None]).T @ X
        H /= n
        try:
            step = np.linalg.solve(H + 1e-12 * np.eye(2 * k), grad)
        except np.linalg.LinAlgError:
            step = np.linalg.lstsq(H, grad, rcond=None)[0]
        # Newton decrement: predicted gain of the full step
        if 0.5 * float(grad @ step) < 1e-18:
            break
        t = 1.0
        while True:
            cand = theta + t * step
            q_new, lp_new = objective(cand)
            if q_new >= q or t < 1e-10:
                break
            t *= 0.5
        if q_new < q:
            if np.linalg.norm(grad) < 1e-6:
                break  # at the floor of floating-point resolution
            raise ConvergenceError("M-step line search failed", last_iterate=theta,
                                   grad_norm=float(np.linalg.norm(grad)))
        theta, q, lp = cand, q_new, lp_new
    else:
        raise ConvergenceError("M-step did not converge", last_iterate=theta,
                               grad_norm=float(np.linalg.norm(grad)))
    return theta


@dataclass
class EMResult:
    model: MultinomialStrataModel
    loglik: float
    trace: list[float]
    n_iter: int
    converged: bool
    restarts: list[float] = field(default_factory=list)


class LikelihoodDecreaseError(RuntimeError):
    pass


def _em_run(d: Dataset, X, eta, theta, tol, max_iter):
    k = X.shape[1]
    model = MultinomialStrataModel(theta[:k], theta[k:], eta)
    post, cell = _cell_posteriors(model.log_predict(d.x), d.z, d.s)
    ll = float(cell.sum())
    trace = [ll]
    converged = False
    it = 0
    for it in range(1, max_iter + 1):
        theta = _m_step(X, post, eta, theta)
        model = MultinomialStrataModel(theta[:k], theta[k:], eta)
        post, cell = _cell_posteriors(model.log_predict(d.x), d.z, d.s)
        ll_new = float(cell.sum())
        if ll_new - ll < -1e-10 * max(1.0, abs(ll)):
            raise LikelihoodDecreaseError(
                f"EM log-likelihood decreased by {ll - ll_new:.3g} at iteration {it}")
        trace.append(ll_new)
        rel = abs(ll_new - ll) / max(abs(ll), 1e-300)
        ll = ll_new
        if rel < tol:
            converged = True
            break
    return EMResult(model, ll, trace, it, converged)


def em_fit(d: Dataset, spec: OddsRatioSpec = OddsRatioSpec(), init=None, tol: float = 1e-10,
           max_iter: int = 1000, *, n_restarts: int = 5, seed: int = 0) -> EMResult:
    """Maximum likelihood for the multinomial-logit strata model by EM.

    ``eta`` is a fixed offset on the always-buyer logit. Without ``init``,
    the first start comes from one M-step with every feasible stratum given
    equal posterior weight; further starts perturb it. The best final
    likelihood wins.

    Parameters
    ----------
    d : Dataset
    spec : OddsRatioSpec
    init : array-like, optional
        ``concat(iota01, iota10)``; disables restarts when given.
    tol : float
        Relative log-likelihood change that stops the iteration.
    max_iter : int
    n_restarts : int
        Total number of starts (including the deterministic one).
    seed : int
        Seeds the perturbations of the random starts.
    """
    if max_iter < 1:
        raise ValueError("max_iter must be >= 1")
    validate_dataset(d).raise_if_fatal()
    X = design(d.x)
    k = X.shape[1]
    eta = float(spec.eta)
    if init is not None:
        starts = [np.asarray(init, dtype=float).ravel()]
        if starts[0].shape[0] != 2 * k:
            raise ValueError(f"init must have {2 * k} entries")
    else:
        flat = MultinomialStrataModel(np.zeros(k), np.zeros(k), 0.0)
        post, _ = _cell_posteriors(flat.log_predict(d.x), d.z, d.s)
        post = (post > 0) / (post > 0).sum(axis=1, keepdims=True)
        base = _m_step(X, post, eta, np.zeros(2 * k))
        rng = np.random.default_rng(seed)
        starts = [base] + [base + rng.normal(0.0, 0.5, size=2 * k)
                           for _ in range(max(n_restarts, 1) - 1)]
    best = None
    finals = []
    for theta in starts:
        res = _em_run(d, X, eta, theta, tol, max_iter)
        finals.append(res.loglik)
        if best is None or res.loglik > best.loglik:
            best = res
    best.restarts = finals
    return best
