"""Treatment rules, misclassification rewards, and pseudo-strata classifiers.

Notation: ``pi`` is an ``(n, 4)`` array of strata probabilities, ``L0`` and
``L1`` are ``(n, 4)`` arrays of arm means per stratum, columns ordered
00, 01, 10, 11. The reward matrix is indexed ``[pseudo, true]``.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .core import LABELS, CostSpec, Dataset, RewardMatrix, StratumLabel

UNDEFINED_DENOMINATOR = 1e-10
TIE_RTOL = 1e-12


class UndefinedRewardError(ValueError):
    """A reward entry needed for classification is undefined (empty stratum)."""


def _costs(costs: CostSpec | None, x):
    costs = costs or CostSpec.zero()
    return costs.c0(x), costs.c1(x)


def stratum_policies(om, costs: CostSpec | None, x) -> np.ndarray:
    """``rho(g, x)`` for all four strata, shape ``(n, 4)``; equality treats."""
    x = np.atleast_2d(np.asarray(x, dtype=float))
    L0, L1 = om.arm_means(x)
    c0, c1 = _costs(costs, x)
    return ((L1 - c1[:, None]) >= (L0 - c0[:, None])).astype(np.int64)


def treatment_rule(om, costs: CostSpec | None, g, x) -> np.ndarray:
    """1 where the stratum-``g`` net gain under treatment is at least that under control."""
    return stratum_policies(om, costs, x)[:, StratumLabel.parse(g)]


def reward_entries(pi, L0, L1, c0, c1, rho, weights=None):
    """Reward matrix entries from per-point arrays.

    ``R[t, s] = mean(pi_s * net_s(rho_t)) / mean(pi_s)`` with
    ``net_s(r) = r (L1_s - c1) + (1 - r)(L0_s - c0)``. Means are weighted by
    ``weights`` (quadrature) when given. Columns whose denominator falls
    below 1e-10 are NaN. Returns ``(entries, denominators)``.
    """
    n = pi.shape[0]
    w = np.full(n, 1.0 / n) if weights is None else np.asarray(weights, dtype=float)
    g1 = L1 - c1[:, None]
    g0 = L0 - c0[:, None]
    den = w @ pi
    R = np.empty((4, 4))
    for t in range(4):
        r = rho[:, t][:, None]
        R[t] = w @ (pi * (r * g1 + (1 - r) * g0))
    with np.errstate(divide="ignore", invalid="ignore"):
        R = R / den[None, :]
    R[:, den < UNDEFINED_DENOMINATOR] = np.nan
    return R, den


def reward_matrix(d: Dataset, strata, om, costs: CostSpec | None = None) -> RewardMatrix:
    """Plug-in misclassification rewards averaged over the rows of ``d``."""
    x = d.x
    pi = strata.predict(x)
    L0, L1 = om.arm_means(x)
    c0, c1 = _costs(costs, x)
    R, _ = reward_entries(pi, L0, L1, c0, c1, stratum_policies(om, costs, x))
    return RewardMatrix(R)


def _argmax_with_ties(scores: np.ndarray, pi: np.ndarray) -> np.ndarray:
    """Row-wise argmax; near-ties go to the most probable stratum, then label order."""
    best = scores.max(axis=1, keepdims=True)
    tied = scores >= best - TIE_RTOL * np.maximum(1.0, np.abs(best))
    key = np.where(tied, pi, -np.inf)
    # np.argmax returns the first maximiser, i.e. the earliest label
    return np.argmax(key, axis=1)


def bayes_scores(rm: RewardMatrix, pi: np.ndarray) -> np.ndarray:
    """``h_t(x) = sum_s R(t | s) pi_s(x)``, shape ``(n, 4)``."""
    R = np.asarray(rm.entries, dtype=float)
    bad = np.isnan(R).any(axis=0)
    if bad.any():
        reach = pi[:, bad].max(initial=0.0) > 0
        if reach:
            names = [str(LABELS[s]) for s in np.flatnonzero(bad)]
            raise UndefinedRewardError(f"reward entries undefined for true strata {names}")
        R = np.where(np.isnan(R), 0.0, R)
    return pi @ R.T


def classify_bayes(rm: RewardMatrix, strata, x) -> np.ndarray:
    """Pseudo-stratum maximising the expected reward at each ``x``."""
    pi = strata.predict(np.atleast_2d(x))
    return _argmax_with_ties(bayes_scores(rm, pi), pi)


def classify_posterior_mode(strata, x) -> np.ndarray:
    """Most probable stratum at each ``x``; ties go to the earliest label."""
    pi = strata.predict(np.atleast_2d(x))
    return np.argmax(pi, axis=1)


@dataclass(frozen=True)
class DecisionRule:
    """Map from covariates to labels.

    ``source`` is ``"bayes"`` (needs ``strata`` and ``rewards``),
    ``"posterior"`` (needs ``strata``) or ``"partition"`` (needs
    ``partition``, a callable ``x -> labels``).
    """

    source: str
    strata: object = None
    rewards: RewardMatrix | None = None
    partition: Callable | None = None

    def __post_init__(self):
        if self.source == "bayes" and (self.strata is None or self.rewards is None):
            raise ValueError("bayes rule needs strata and rewards")
        if self.source == "posterior" and self.strata is None:
            raise ValueError("posterior rule needs strata")
        if self.source == "partition" and self.partition is None:
            raise ValueError("partition rule needs a partition")
        if self.source not in ("bayes", "posterior", "partition"):
            raise ValueError(f"unknown rule source {self.source!r}")

    def classify(self, x) -> np.ndarray:
        x = np.atleast_2d(np.asarray(x, dtype=float))
        if self.source == "bayes":
            return classify_bayes(self.rewards, self.strata, x)
        if self.source == "posterior":
            return classify_posterior_mode(self.strata, x)
        return np.asarray(self.partition(x), dtype=np.int64)

    def scores(self, x) -> np.ndarray:
        """``h`` for bayes rules, ``pi`` for posterior rules."""
        pi = self.strata.predict(np.atleast_2d(x))
        if self.source == "bayes":
            return bayes_scores(self.rewards, pi)
        return pi

    @classmethod
    def constant(cls, label) -> "DecisionRule":
        g = int(StratumLabel.parse(label))
        return cls("partition", partition=lambda x: np.full(np.atleast_2d(x).shape[0], g))


@dataclass(frozen=True)
class PseudoStrataPolicy:
    """Treat ``x`` with the stratum policy of its pseudo-stratum."""

    rule: DecisionRule
    outcome: object
    costs: CostSpec = field(default_factory=CostSpec)

    def treat(self, x) -> np.ndarray:
        x = np.atleast_2d(np.asarray(x, dtype=float))
        labels = self.rule.classify(x)
        rho = stratum_policies(self.outcome, self.costs, x)
        return rho[np.arange(x.shape[0]), labels]

    __call__ = treat


# ---------------------------------------------------------------------------
# Value functions and baselines
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class PolicyEvaluation:
    value: float
    revenue_ratio: float
    per_stratum: np.ndarray
    treated_share: float = float("nan")

    def to_dict(self) -> dict:
        return {"value": self.value, "revenue_ratio": self.revenue_ratio,
                "per_stratum": {str(g): float(v) for g, v in zip(LABELS, self.per_stratum)},
                "treated_share": self.treated_share}


def _policy_values(policy, x) -> np.ndarray:
    if hasattr(policy, "treat"):
        return np.asarray(policy.treat(x), dtype=float)
    if callable(policy):
        return np.asarray(policy(x), dtype=float)
    return np.broadcast_to(np.asarray(policy, dtype=float), (x.shape[0],))


def value_function(d_policy, strata, om, costs: CostSpec | None, d: Dataset) -> PolicyEvaluation:
    """Plug-in expected net revenue of a (possibly randomised) policy.

    ``d_policy`` returns treatment probabilities in ``[0, 1]``; it may be a
    callable, an object with ``treat``, an array, or a scalar.
    """
    x = d.x
    dx = _policy_values(d_policy, x)
    pi = strata.predict(x)
    L0, L1 = om.arm_means(x)
    c0, c1 = _costs(costs, x)
    per_row = pi * (dx[:, None] * (L1 - c1[:, None]) + (1 - dx[:, None]) * (L0 - c0[:, None]))
    per_stratum = per_row.mean(axis=0)
    value = float(per_stratum.sum())
    base = float(np.mean(d.y))
    ratio = value / base if base != 0 else float("nan")
    return PolicyEvaluation(value, ratio, per_stratum, float(np.mean(dx)))


@dataclass(frozen=True)
class GridSpec:
    """Candidate linear rules ``I{b0 + u . x > 0}`` with ``|u| = 1``.

    Directions come from an angular grid of ``angle_step`` degrees for up
    to three covariates, and from ``n_random`` seeded uniform directions
    beyond that.
    """

    intercepts: tuple = tuple(np.round(np.linspace(-2.0, 2.0, 41), 10))
    angle_step: float = 5.0
    n_random: int = 2000
    seed: int = 0
    directions: tuple | None = None

    def direction_grid(self, dim: int) -> np.ndarray:
        if self.directions is not None:
            u = np.atleast_2d(np.asarray(self.directions, dtype=float))
            if u.shape[1] != dim:
                raise ValueError(f"directions have dimension {u.shape[1]}, covariates {dim}")
            return u
        step = np.deg2rad(self.angle_step)
        if dim == 1:
            return np.array([[1.0], [-1.0]])
        if dim == 2:
            phi = np.arange(0.0, 2 * np.pi - 1e-12, step)
            return np.column_stack([np.cos(phi), np.sin(phi)])
        if dim == 3:
            out = [np.array([0.0, 0.0, 1.0])]
            for theta in np.arange(step, np.pi - 1e-12, step):
                phi = np.arange(0.0, 2 * np.pi - 1e-12, step)
                out.extend(np.column_stack([np.sin(theta) * np.cos(phi), np.sin(theta) * np.sin(phi),
                                            np.full(phi.shape, np.cos(theta))]))
            out.append(np.array([0.0, 0.0, -1.0]))
            return np.vstack(out)
        rng = np.random.default_rng(self.seed)
        u = rng.standard_normal((self.n_random, dim))
        return u / np.linalg.norm(u, axis=1, keepdims=True)


def direct_policy_search(strata, om, costs: CostSpec | None, d: Dataset, grid_spec: GridSpec | None = None):
    """Best linear indicator rule by exhaustive search of ``grid_spec``.

    Returns ``(beta, evaluation)`` with ``beta = (b0, u)``. Candidates are
    scanned direction by direction, intercepts in order; the first
    maximiser wins.
    """
    gs = grid_spec or GridSpec()
    x = d.x
    b0 = np.asarray(gs.intercepts, dtype=float)
    U = gs.direction_grid(x.shape[1])
    if b0.size == 0 or U.shape[0] == 0:
        raise ValueError("empty policy grid")
    pi = strata.predict(x)
    L0, L1 = om.arm_means(x)
    c0, c1 = _costs(costs, x)
    gain = (pi * ((L1 - c1[:, None]) - (L0 - c0[:, None]))).sum(axis=1)
    n = x.shape[0]
    best_val, best = -np.inf, None
    for j, u in enumerate(U):
        proj = x @ u
        vals = ((proj[None, :] + b0[:, None]) > 0) @ gain / n
        i = int(np.argmax(vals))
        if vals[i] > best_val:
            best_val, best = vals[i], (j, i)
    j, i = best
    beta = np.concatenate([[b0[i]], U[j]])
    ev = value_function(lambda z: linear_rule(beta, z), strata, om, costs, d)
    return beta, ev


def linear_rule(beta, x) -> np.ndarray:
    x = np.atleast_2d(np.asarray(x, dtype=float))
    return ((beta[0] + x @ np.asarray(beta[1:])) > 0).astype(np.int64)


def principal_effect(strata, om, d: Dataset, z: int, g) -> float:
    """``mean(L_{z,g} pi_g) / mean(pi_g)``; NaN when the stratum is empty."""
    g = StratumLabel.parse(g)
    from .core import responds
    if not responds(z, g):
        raise ValueError(f"stratum {g} has no revenue under arm {z}")
    x = d.x
    pi = strata.predict(x)[:, g]
    den = float(np.mean(pi))
    if den < UNDEFINED_DENOMINATOR:
        return float("nan")
    return float(np.mean(om.evaluate(z, g, x) * pi) / den)


# ---------------------------------------------------------------------------
# Evaluation against population truth (simulation only)
# ---------------------------------------------------------------------------

def population_points(truth, method: str = "mc", n_mc: int = 100_000, seed: int = 0):
    """Evaluation points and weights: seeded draws or the truth's quadrature grid."""
    if method == "grid":
        x, w = truth.grid()
        return x, np.asarray(w, dtype=float)
    if method != "mc":
        raise ValueError(f"unknown evaluation method {method!r}")
    x = truth.sample_x(np.random.default_rng(seed), int(n_mc))
    return x, np.full(x.shape[0], 1.0 / x.shape[0])


def true_reward_matrix(truth, costs: CostSpec | None = None, *, method: str = "mc",
                       n_mc: int = 100_000, seed: int = 0):
    """Population rewards and their Monte Carlo standard errors.

    Returns ``(RewardMatrix, se)`` where ``se[t, s]`` is the delta-method SE
    of each ratio (zero in grid mode), and a third array ``se_diag_gap``
    with the SE of ``R(s|s) - R(t|s)``.
    """
    x, w = population_points(truth, method, n_mc, seed)
    pi = truth.strata(x)
    L0, L1 = truth.outcome_means(x)
    c0, c1 = _costs(costs, x)
    rho = stratum_policies(truth.outcome_model, costs, x)
    R, den = reward_entries(pi, L0, L1, c0, c1, rho, w)
    se = np.zeros((4, 4))
    gap_se = np.zeros((4, 4))
    if method == "mc":
        n = x.shape[0]
        nets = []
        for t in range(4):
            r = rho[:, t][:, None]
            nets.append(pi * (r * (L1 - c1[:, None]) + (1 - r) * (L0 - c0[:, None])))
        for s in range(4):
            for t in range(4):
                infl = (nets[t][:, s] - R[t, s] * pi[:, s]) / den[s]
                se[t, s] = np.std(infl, ddof=1) / np.sqrt(n)
                gap = (nets[s][:, s] - nets[t][:, s] - (R[s, s] - R[t, s]) * pi[:, s]) / den[s]
                gap_se[t, s] = np.std(gap, ddof=1) / np.sqrt(n)
    return RewardMatrix(R), se, gap_se


def evaluate_partition_reward(rule, truth, costs: CostSpec | None = None, *, method: str = "mc",
                              n_mc: int = 100_000, seed: int = 0, rewards: RewardMatrix | None = None) -> float:
    """Average misclassification reward of a labelling rule at the truth.

    ``V = E[sum_s pi_s(X) R(rule(X) | s)]``, which equals
    ``sum_s pr(G=s) sum_t pr(rule=t | G=s) R(t|s)``. ``rewards`` defaults to
    the population matrix evaluated on the same points.
    """
    x, w = population_points(truth, method, n_mc, seed)
    pi = truth.strata(x)
    if rewards is None:
        rewards = true_reward_matrix(truth, costs, method=method, n_mc=n_mc, seed=seed)[0]
    R = np.asarray(rewards.entries, dtype=float)
    labels = _labels(rule, x)
    per_point = (pi * R[labels]).sum(axis=1)
    return float(w @ per_point)


def bayes_rule_at_truth(truth, costs: CostSpec | None = None, **kw) -> DecisionRule:
    rm = true_reward_matrix(truth, costs, **kw)[0]
    return DecisionRule("bayes", strata=truth.strata_model, rewards=rm)


def _labels(rule, x) -> np.ndarray:
    if hasattr(rule, "classify"):
        return np.asarray(rule.classify(x), dtype=np.int64)
    return np.asarray(rule(x), dtype=np.int64)


def misclassification_table(rule, truth, *, method: str = "mc", n_mc: int = 100_000,
                            seed: int = 0) -> np.ndarray:
    """``table[s, t] = pr(rule(X) = t | G = s)``; rows of empty strata are NaN."""
    x, w = population_points(truth, method, n_mc, seed)
    pi = truth.strata(x)
    labels = _labels(rule, x)
    onehot = np.zeros((x.shape[0], 4))
    onehot[np.arange(x.shape[0]), labels] = 1.0
    joint = (pi * w[:, None]).T @ onehot
    den = joint.sum(axis=1, keepdims=True)
    with np.errstate(invalid="ignore", divide="ignore"):
        out = joint / den
    out[den[:, 0] <= 0] = np.nan
    return out


def misclassification_probability(rule, truth, s, s_tilde, **kw) -> float:
    """``pr(rule(X) = s_tilde | G = s)`` under the generator."""
    return float(misclassification_table(rule, truth, **kw)[StratumLabel.parse(s),
                                                           StratumLabel.parse(s_tilde)])
