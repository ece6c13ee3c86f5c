"""Stratum-specific conditional outcome means under the additive model.

For arm ``z`` the responders mix two strata. Among ``Z = S = 1`` rows,
``E[Y | x] = w1(x) L_{1,11}(x) + (1 - w1(x)) L_{1,01}(x)`` with
``w1 = pi11 / e1``; among ``Z = 0, S = 1`` rows the partner stratum is
``10`` and ``w0 = pi11 / e0``. Each arm's parameters solve the residual
moment conditions ``E[I(Z=z, S=1) B(X) {Y - mixture mean}] = 0`` by GMM.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np
from scipy.optimize import least_squares

from .core import REQUIRED_PAIRS, Dataset, StratumLabel, validate_dataset
from .strata import ConvergenceError

_EXP_CAP = 700.0


def _safe_exp(v):
    return np.exp(np.minimum(v, _EXP_CAP))


# ---------------------------------------------------------------------------
# Families
# ---------------------------------------------------------------------------

class ExponentialFamily:
    """``L(x) = exp(b0 + sum(A)) + exp(b1 + b2 . C)``.

    ``A`` enters with unit coefficient, so ``q(A) = exp(sum(A))``.
    """

    name = "exp"
    is_linear = False
    default_q = "exp"

    def n_params(self, a_dim: int, c_dim: int) -> int:
        return 2 + c_dim

    def param_names(self, a_dim: int, c_dim: int) -> list[str]:
        return ["b0_A", "b1_C"] + [f"b2_C{j + 1}" for j in range(c_dim)]

    def _parts(self, a, c, beta):
        ea = _safe_exp(beta[0] + a.sum(axis=1))
        ec = _safe_exp(beta[1] + c @ beta[2:])
        return ea, ec

    def mean(self, a, c, beta):
        ea, ec = self._parts(a, c, beta)
        return ea + ec

    def jacobian(self, a, c, beta):
        ea, ec = self._parts(a, c, beta)
        return np.column_stack([ea, ec, ec[:, None] * c])

    def weighted_hessian(self, a, c, beta, w):
        """``sum_i w_i * d2 L(x_i) / d beta^2``."""
        ea, ec = self._parts(a, c, beta)
        k = 2 + c.shape[1]
        H = np.zeros((k, k))
        H[0, 0] = w @ ea
        V = np.column_stack([np.ones(len(c)), c])
        H[1:, 1:] = (V * (w * ec)[:, None]).T @ V
        return H

    def warm_start(self, a, c, y):
        half = max(float(np.mean(y)), 1e-3) / 2.0
        b0 = np.log(half) - np.log(np.mean(_safe_exp(a.sum(axis=1))))
        return np.concatenate([[b0, np.log(half)], np.zeros(c.shape[1])])


class LinearFamily:
    """``L(x) = b . (1, C, A, C^2)`` (squares taken elementwise)."""

    name = "linear"
    is_linear = True
    default_q = "identity"

    def n_params(self, a_dim: int, c_dim: int) -> int:
        return 1 + 2 * c_dim + a_dim

    def param_names(self, a_dim: int, c_dim: int) -> list[str]:
        return (["const"] + [f"C{j + 1}" for j in range(c_dim)]
                + [f"A{j + 1}" for j in range(a_dim)] + [f"C{j + 1}^2" for j in range(c_dim)])

    def basis(self, a, c):
        return np.column_stack([np.ones(len(a)), c, a, c ** 2])

    def mean(self, a, c, beta):
        return self.basis(a, c) @ beta

    def jacobian(self, a, c, beta):
        return self.basis(a, c)

    def weighted_hessian(self, a, c, beta, w):
        k = len(beta)
        return np.zeros((k, k))

    def warm_start(self, a, c, y):
        beta = np.zeros(self.n_params(a.shape[1], c.shape[1]))
        beta[0] = float(np.mean(y))
        return beta


FAMILIES = {"exp": ExponentialFamily(), "linear": LinearFamily()}


def get_family(name) -> ExponentialFamily | LinearFamily:
    if not isinstance(name, str):
        return name
    try:
        return FAMILIES[name]
    except KeyError:
        raise ValueError(f"unknown outcome family {name!r}; choose from {sorted(FAMILIES)}") from None


def q_basis_matrix(name: str, a: np.ndarray) -> np.ndarray:
    """Known functions ``q(A)`` of the additive A-component."""
    a = np.atleast_2d(np.asarray(a, dtype=float))
    if name == "exp":
        return _safe_exp(a.sum(axis=1))[:, None]
    if name == "identity":
        return a
    if name == "constant":
        return np.ones((a.shape[0], 1))
    raise ValueError(f"unknown q basis {name!r}")


# ---------------------------------------------------------------------------
# Fitted model
# ---------------------------------------------------------------------------

# partner stratum mixed with the always-buyers among responders of each arm
PARTNER = {1: StratumLabel.S01, 0: StratumLabel.S10}


@dataclass(frozen=True)
class OutcomeModel:
    """Conditional means ``L_{z,g}(x)``; structurally zero pairs return 0."""

    family: str
    a_dim: int
    c_dim: int
    params: dict
    q_basis: str = ""

    def __post_init__(self):
        fam = get_family(self.family)
        k = fam.n_params(self.a_dim, self.c_dim)
        clean = {}
        for (z, g), beta in self.params.items():
            beta = np.asarray(beta, dtype=float).ravel()
            if beta.shape[0] != k:
                raise ValueError(f"({z},{g}) needs {k} parameters, got {beta.shape[0]}")
            beta.setflags(write=False)
            clean[(int(z), StratumLabel.parse(g))] = beta
        missing = {(z, g) for z, g in REQUIRED_PAIRS} - set(clean)
        if missing:
            raise ValueError(f"missing parameters for {sorted((z, str(g)) for z, g in missing)}")
        object.__setattr__(self, "params", clean)
        if not self.q_basis:
            object.__setattr__(self, "q_basis", fam.default_q)

    def _split(self, x):
        x = np.atleast_2d(np.asarray(x, dtype=float))
        if x.shape[1] != self.a_dim + self.c_dim:
            raise ValueError(f"expected {self.a_dim + self.c_dim} covariates, got {x.shape[1]}")
        return x[:, :self.a_dim], x[:, self.a_dim:]

    def evaluate(self, z: int, g, x) -> np.ndarray:
        a, c = self._split(x)
        g = StratumLabel.parse(g)
        beta = self.params.get((int(z), g))
        if beta is None:
            return np.zeros(a.shape[0])
        return get_family(self.family).mean(a, c, beta)

    def arm_means(self, x) -> tuple[np.ndarray, np.ndarray]:
        """``(L0, L1)``, each ``(n, 4)`` indexed by stratum."""
        a, c = self._split(x)
        n = a.shape[0]
        fam = get_family(self.family)
        L = {0: np.zeros((n, 4)), 1: np.zeros((n, 4))}
        for (z, g), beta in self.params.items():
            L[z][:, g] = fam.mean(a, c, beta)
        return L[0], L[1]

    def scaled(self, factor: float) -> "OutcomeModel":
        """Model whose means are ``factor`` times these (linear family only)."""
        if not get_family(self.family).is_linear:
            raise ValueError("scaling is only closed-form for the linear family")
        return OutcomeModel(self.family, self.a_dim, self.c_dim,
                            {k: factor * v for k, v in self.params.items()}, self.q_basis)

    def to_dict(self) -> dict:
        fam = get_family(self.family)
        return {
            "family": self.family, "a_dim": self.a_dim, "c_dim": self.c_dim,
            "q_basis": self.q_basis, "n_params": fam.n_params(self.a_dim, self.c_dim),
            "param_names": fam.param_names(self.a_dim, self.c_dim),
            "params": {f"{z},{g}": list(map(float, b)) for (z, g), b in sorted(self.params.items())},
        }

    @classmethod
    def from_dict(cls, data: dict) -> "OutcomeModel":
        params = {}
        for key, beta in data["params"].items():
            z, g = key.split(",")
            params[(int(z), StratumLabel.parse(g))] = beta
        return cls(data["family"], int(data["a_dim"]), int(data["c_dim"]), params,
                   data.get("q_basis", ""))


def evaluate_outcome(m: OutcomeModel, z: int, g, x) -> np.ndarray:
    """Mean revenue ``L_{z,g}(x)``; exactly zero for non-responding pairs."""
    return m.evaluate(z, g, x)


# ---------------------------------------------------------------------------
# Moment system
# ---------------------------------------------------------------------------

Instruments = Callable[[np.ndarray, np.ndarray, np.ndarray], np.ndarray]


@dataclass
class MomentSystem:
    """Residual moment conditions for one arm.

    Only responders of the arm enter (``a``, ``c``, ``y``, ``omega``);
    ``n_total`` is the full sample size so moments are sample means over
    all rows, as with the ``I(Z=z, S=1)`` indicator. Parameters are
    ``concat(beta_11, beta_partner)``.

    ``instruments=None`` uses ``B = d mean / d theta`` (just identified);
    otherwise a callable ``B(a, c, omega) -> (rows, m)`` with ``m`` at least
    the number of parameters.
    """

    family: object
    a: np.ndarray
    c: np.ndarray
    y: np.ndarray
    omega: np.ndarray
    n_total: int
    instruments: Instruments | None = None

    def __post_init__(self):
        self.family = get_family(self.family)
        self.k = self.family.n_params(self.a.shape[1], self.c.shape[1])
        if self.instruments is not None:
            m = self.fixed_instruments().shape[1]
            if m < 2 * self.k:
                raise ValueError(f"order condition fails: {m} instruments for {2 * self.k} parameters")

    @property
    def n_params(self) -> int:
        return 2 * self.k

    def fixed_instruments(self):
        B = np.asarray(self.instruments(self.a, self.c, self.omega), dtype=float)
        return B.reshape(len(self.y), -1)

    def mean(self, theta):
        f = self.family
        return (self.omega * f.mean(self.a, self.c, theta[:self.k])
                + (1 - self.omega) * f.mean(self.a, self.c, theta[self.k:]))

    def mean_jacobian(self, theta):
        f = self.family
        return np.hstack([self.omega[:, None] * f.jacobian(self.a, self.c, theta[:self.k]),
                          (1 - self.omega)[:, None] * f.jacobian(self.a, self.c, theta[self.k:])])

    def residuals(self, theta):
        return self.y - self.mean(theta)

    def moments(self, theta) -> np.ndarray:
        r = self.residuals(theta)
        B = self.mean_jacobian(theta) if self.instruments is None else self.fixed_instruments()
        return B.T @ r / self.n_total

    def moment_jacobian(self, theta) -> np.ndarray:
        D = self.mean_jacobian(theta)
        if self.instruments is not None:
            return -self.fixed_instruments().T @ D / self.n_total
        r = self.residuals(theta)
        k = self.k
        H = np.zeros((2 * k, 2 * k))
        H[:k, :k] = self.family.weighted_hessian(self.a, self.c, theta[:k], self.omega * r)
        H[k:, k:] = self.family.weighted_hessian(self.a, self.c, theta[k:], (1 - self.omega) * r)
        return (H - D.T @ D) / self.n_total

    def criterion(self, theta) -> float:
        g = self.moments(theta)
        return float(g @ g)

    def criterion_gradient(self, theta) -> np.ndarray:
        return 2.0 * self.moment_jacobian(theta).T @ self.moments(theta)


def _levenberg_marquardt(resid, jac, x0, *, tol=1e-10, max_nfev=1000):
    """Minimise ``||resid(x)||^2`` with MINPACK's Levenberg-Marquardt.

    Returns ``(x, n_evaluations)``; raises :class:`ConvergenceError` when
    the evaluation budget runs out or the criterion is not finite.
    """
    with np.errstate(over="ignore", invalid="ignore"):
        try:
            sol = least_squares(resid, np.asarray(x0, dtype=float), jac=jac, method="lm",
                                ftol=tol, xtol=tol, gtol=tol, max_nfev=max_nfev)
        except ValueError as exc:  # residuals not finite at the start
            raise ConvergenceError(str(exc), last_iterate=np.asarray(x0, dtype=float)) from None
    if sol.status <= 0 or not np.isfinite(sol.cost):
        raise ConvergenceError(f"Levenberg-Marquardt stopped: {sol.message}", last_iterate=sol.x,
                               grad_norm=float(np.linalg.norm(sol.grad)))
    return sol.x, int(sol.nfev)


@dataclass
class ArmFit:
    theta: np.ndarray
    criterion: float
    grad_norm: float
    n_eval: int
    n_rows: int
    ess: dict = field(default_factory=dict)


def solve_moment_system(ms: MomentSystem, *, n_restarts: int = 3, seed: int = 0,
                        tol: float = 1e-10, max_nfev: int = 1000) -> ArmFit:
    """Drive the sample moments to zero from a warm start plus random restarts."""
    fam = ms.family
    if fam.is_linear and ms.instruments is None:
        D = ms.mean_jacobian(np.zeros(ms.n_params))
        theta = np.linalg.lstsq(D, ms.y, rcond=None)[0]
        return ArmFit(theta, ms.criterion(theta), float(np.linalg.norm(ms.criterion_gradient(theta))),
                      1, len(ms.y))

    if ms.instruments is None:
        def resid(th):
            return ms.residuals(th)

        def jac(th):
            return -ms.mean_jacobian(th)
    else:
        resid, jac = ms.moments, ms.moment_jacobian

    w0 = fam.warm_start(ms.a, ms.c, ms.y)
    base = np.concatenate([w0, w0])
    rng = np.random.default_rng(seed)
    starts = [base] + [base + rng.normal(0.0, 0.3, size=base.shape) for _ in range(n_restarts)]
    best, best_f, last_err = None, np.inf, None
    for x0 in starts:
        try:
            theta, n_eval = _levenberg_marquardt(resid, jac, x0, tol=tol, max_nfev=max_nfev)
        except ConvergenceError as exc:
            last_err = exc
            continue
        with np.errstate(over="ignore", invalid="ignore"):
            r = resid(theta)
            f = float(r @ r)
        if np.isfinite(f) and f < best_f:
            best, best_f = (theta, n_eval), f
    if best is None:
        raise ConvergenceError(f"moment system not solved from any start: {last_err}",
                               last_iterate=getattr(last_err, "last_iterate", None))
    theta, n_eval = best
    return ArmFit(theta, ms.criterion(theta), float(np.linalg.norm(ms.criterion_gradient(theta))),
                  n_eval, len(ms.y))


def mixture_weights(strata, x, rates=None) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """``(pi, w0, w1)`` with ``w_z = pi11 / e_z`` clipped to ``[0, 1]``."""
    pi = strata.predict(x)
    e0, e1 = (rates.predict(x) if rates is not None else strata.margins(x))
    with np.errstate(divide="ignore", invalid="ignore"):
        w0 = np.clip(np.where(e0 > 0, pi[:, 3] / e0, 0.0), 0.0, 1.0)
        w1 = np.clip(np.where(e1 > 0, pi[:, 3] / e1, 0.0), 0.0, 1.0)
    return pi, w0, w1


@dataclass
class OutcomeFit:
    model: OutcomeModel
    arms: dict
    identification: "IdentificationReport"
    warnings: list = field(default_factory=list)

    def diagnostics(self) -> dict:
        return {
            "arms": {str(z): {"criterion": f.criterion, "gradient_norm": f.grad_norm,
                              "evaluations": f.n_eval, "responders": f.n_rows,
                              "effective_sample_size": f.ess}
                     for z, f in self.arms.items()},
            "identification": self.identification.to_dict(),
            "warnings": list(self.warnings),
        }


def fit_outcome_models(d: Dataset, strata, rates=None, family="exp", q_basis=None, *,
                       instruments: Instruments | None = None, n_restarts: int = 3,
                       seed: int = 0, tol: float = 1e-10, max_nfev: int = 1000) -> OutcomeFit:
    """Fit ``L_{z,g}`` for the four responding ``(z, g)`` pairs by GMM, arm by arm.

    Arm ``z`` uses only ``Z = z, S = 1`` rows. Identification failures are
    attached as warnings, not raised.
    """
    validate_dataset(d).raise_if_fatal()
    fam = get_family(family)
    q_basis = q_basis or fam.default_q
    x = d.x
    pi, w0, w1 = mixture_weights(strata, x, rates)
    weights = {0: w0, 1: w1}
    params, arms = {}, {}
    for z in (1, 0):
        sel = (d.z == z) & (d.s == 1)
        ms = MomentSystem(fam, d.a[sel], d.c[sel], d.y[sel], weights[z][sel], d.n, instruments)
        fit = solve_moment_system(ms, n_restarts=n_restarts, seed=seed + z, tol=tol,
                                  max_nfev=max_nfev)
        w = weights[z][sel]
        fit.ess = {str(StratumLabel.S11): _ess(w), str(PARTNER[z]): _ess(1 - w)}
        arms[z] = fit
        params[(z, StratumLabel.S11)] = fit.theta[:ms.k]
        params[(z, PARTNER[z])] = fit.theta[ms.k:]
    model = OutcomeModel(fam.name, d.a_dim, d.c_dim, params, q_basis)
    ident = check_identification(strata, q_basis, d)
    warnings = []
    for name, ok in ident.passed.items():
        if not ok:
            warnings.append(f"identification condition fails for set {name}")
    return OutcomeFit(model, arms, ident, warnings)


def _ess(w) -> float:
    s2 = float(w @ w)
    return float(w.sum() ** 2 / s2) if s2 > 0 else 0.0


# ---------------------------------------------------------------------------
# Identification condition
# ---------------------------------------------------------------------------

@dataclass
class IdentificationReport:
    min_eig: dict
    max_eig: dict
    condition_number: dict
    passed: dict
    threshold: float = 1e-8

    @property
    def ok(self) -> bool:
        return all(self.passed.values())

    def to_dict(self) -> dict:
        return {name: {"min_eigenvalue": self.min_eig[name], "max_eigenvalue": self.max_eig[name],
                       "condition_number": self.condition_number[name],
                       "passed": self.passed[name]}
                for name in self.passed}


def check_identification(strata, q_basis, d: Dataset, threshold: float = 1e-8) -> IdentificationReport:
    """Empirical Gram matrices of the two function sets that must be linearly independent.

    Set ``"11/01"``: ``{pi11, pi01, q(A) pi11, q(A) pi01}``; set ``"11/10"``:
    the same with ``pi10``. Flags a set when its smallest eigenvalue is below
    ``threshold`` times the largest.
    """
    pi = strata.predict(d.x)
    q = q_basis_matrix(q_basis, d.a) if isinstance(q_basis, str) else np.asarray(q_basis(d.a))
    out = {k: {} for k in ("min", "max", "cond", "ok")}
    for name, partner in (("11/01", 1), ("11/10", 2)):
        p11, pp = pi[:, 3], pi[:, partner]
        F = np.column_stack([p11, pp, q * p11[:, None], q * pp[:, None]])
        gram = F.T @ F / d.n
        eig = np.linalg.eigvalsh(gram)
        lo, hi = float(eig[0]), float(eig[-1])
        out["min"][name] = lo
        out["max"][name] = hi
        out["cond"][name] = hi / lo if lo > 0 else float("inf")
        out["ok"][name] = bool(lo >= threshold * hi)
    return IdentificationReport(out["min"], out["max"], out["cond"], out["ok"], threshold)
