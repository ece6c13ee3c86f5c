"""Data-generating processes, labelled datasets, and the replication harness.

Two generators share the multinomial-logit strata model with

    iota01 = (0.4, A: 1, C: -1),   iota10 = (-0.3, A: -1, C: 0.5),

and the always-buyer logit ``iota01 + iota10 + eta``. They differ in the
covariate means, the outcome family, and the noise:

* ``exp``: ``X ~ N((0.25, -0.25), I)``, additive-exponential means, noise
  ``U(-1, 1)``.
* ``linear``: ``A ~ N(-0.25, 1)``, ``C ~ N(0.25, 1)``, means linear in
  ``(1, C, A, C^2)``, noise ``N(0, 1)``.

Treatment is ``expit(0.15 - delta*A - delta*C)`` in both.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from functools import cached_property

import numpy as np
from numpy.polynomial.hermite_e import hermegauss
from scipy.special import expit

from .core import REQUIRED_PAIRS, CostSpec, Dataset, StratumLabel
from .outcome import OutcomeModel
from .strata import MultinomialStrataModel

G = StratumLabel

IOTA01 = (0.4, 1.0, -1.0)
IOTA10 = (-0.3, -1.0, 0.5)

TRUE_BETA = {
    "exp": {
        (1, G.S11): (1.0, 1.0, 0.5),
        (1, G.S01): (1.0, 1.5, 1.15),
        (0, G.S11): (1.5, 1.0, 1.2),
        (0, G.S10): (1.5, 0.5, -1.1),
    },
    # basis (1, C, A, C^2)
    "linear": {
        (0, G.S10): (5.3, -1.1, 1.5, -1.2),
        (1, G.S01): (7.0, 1.15, -1.25, 1.15),
        (0, G.S11): (6.0, 1.2, 1.4, 1.4),
        (1, G.S11): (6.5, 1.2, 1.4, -1.25),
    },
}

COVARIATE_MEAN = {"exp": (0.25, -0.25), "linear": (-0.25, 0.25)}

ESTIMANDS = tuple(REQUIRED_PAIRS)


def estimand_name(z: int, g) -> str:
    return f"L{z}_{str(StratumLabel.parse(g))}"


@dataclass(frozen=True)
class SimulationConfig:
    n: int = 2000
    delta: float = 0.0
    eta: float = 0.0
    family: str = "exp"
    seed: int = 0
    reps: int = 50

    def __post_init__(self):
        if int(self.n) < 1:
            raise ValueError("n must be at least 1")
        if self.family not in TRUE_BETA:
            raise ValueError(f"unknown family {self.family!r}")
        if int(self.reps) < 1:
            raise ValueError("reps must be at least 1")

    def to_dict(self) -> dict:
        return {"n": int(self.n), "delta": float(self.delta), "eta": float(self.eta),
                "family": self.family, "seed": int(self.seed), "reps": int(self.reps)}

    @classmethod
    def from_dict(cls, data: dict) -> "SimulationConfig":
        keys = cls.__dataclass_fields__
        unknown = set(data) - set(keys)
        if unknown:
            raise ValueError(f"unknown simulation keys {sorted(unknown)}")
        return cls(**data)


class Population:
    """Population truth for one generator: strata, outcome means, propensity.

    Expectations over ``X`` use a tensor Gauss-Hermite rule, exact for
    the Gaussian covariate law up to quadrature error (about 1e-12 here).
    """

    def __init__(self, family: str = "exp", eta: float = 0.0, delta: float = 0.0,
                 n_nodes: int = 80):
        self.family = family
        self.eta = float(eta)
        self.delta = float(delta)
        self.mean = np.asarray(COVARIATE_MEAN[family], dtype=float)
        self.strata_model = MultinomialStrataModel(np.array(IOTA01), np.array(IOTA10), self.eta)
        self.outcome_model = OutcomeModel(family, 1, 1, TRUE_BETA[family])
        self.n_nodes = n_nodes

    @classmethod
    def from_config(cls, cfg: SimulationConfig) -> "Population":
        return cls(cfg.family, cfg.eta, cfg.delta)

    # covariate law ------------------------------------------------------
    def sample_x(self, rng: np.random.Generator, n: int) -> np.ndarray:
        return self.mean + rng.standard_normal((n, 2))

    @cached_property
    def _quadrature(self):
        t, w = hermegauss(self.n_nodes)
        w = w / w.sum()
        ta, tc = np.meshgrid(t, t, indexing="ij")
        x = np.column_stack([self.mean[0] + ta.ravel(), self.mean[1] + tc.ravel()])
        return x, np.outer(w, w).ravel()

    def grid(self) -> tuple[np.ndarray, np.ndarray]:
        """Quadrature nodes ``(m, 2)`` and weights summing to one."""
        x, w = self._quadrature
        return x.copy(), w.copy()

    def expectation(self, f) -> np.ndarray:
        """``E[f(X)]`` for a vectorised ``f`` returning ``(m,)`` or ``(m, k)``."""
        x, w = self._quadrature
        return np.tensordot(w, np.asarray(f(x)), axes=(0, 0))

    # truth --------------------------------------------------------------
    def propensity(self, x) -> np.ndarray:
        x = np.atleast_2d(x)
        return expit(0.15 - self.delta * x[:, 0] - self.delta * x[:, 1])

    def strata(self, x) -> np.ndarray:
        return self.strata_model.predict(x)

    def outcome_means(self, x) -> tuple[np.ndarray, np.ndarray]:
        return self.outcome_model.arm_means(x)

    def stratum_shares(self) -> np.ndarray:
        return self.expectation(self.strata)

    def true_estimand(self, z: int, g) -> float:
        """``E[pi_g(X) L_{z,g}(X)] / E[pi_g(X)]``."""
        g = StratumLabel.parse(g)
        num = self.expectation(lambda x: self.strata(x)[:, g] * self.outcome_model.evaluate(z, g, x))
        return float(num / self.stratum_shares()[g])

    def true_estimands(self) -> dict:
        return {estimand_name(z, g): self.true_estimand(z, g) for z, g in ESTIMANDS}

    def noise(self, rng: np.random.Generator, n: int) -> np.ndarray:
        if self.family == "exp":
            # inverse transform of U(-1, 1)
            return 2.0 * rng.random(n) - 1.0
        return rng.standard_normal(n)


@dataclass(frozen=True)
class LabeledDataset:
    """Observable data plus the latent truth that generated it."""

    data: Dataset
    g: np.ndarray
    s0: np.ndarray
    s1: np.ndarray
    y0: np.ndarray
    y1: np.ndarray
    config: SimulationConfig | None = None

    @property
    def n(self) -> int:
        return self.data.n

    def observable(self) -> Dataset:
        return self.data

    def check(self) -> None:
        """Assert consistency and stratum feasibility."""
        d = self.data
        assert np.array_equal(d.s, np.where(d.z == 1, self.s1, self.s0))
        assert np.array_equal(d.y, np.where(d.z == 1, self.y1, self.y0))
        assert np.array_equal(self.s0, self.g // 2) and np.array_equal(self.s1, self.g % 2)
        assert np.all(self.y0[self.s0 == 0] == 0) and np.all(self.y1[self.s1 == 0] == 0)


def generate(cfg: SimulationConfig, rep: int = 0, population: Population | None = None) -> LabeledDataset:
    """Draw one dataset; the RNG stream is keyed by ``(cfg.seed, rep)``."""
    pop = population or Population.from_config(cfg)
    rng = np.random.default_rng([int(cfg.seed), int(rep)])
    n = int(cfg.n)
    x = pop.sample_x(rng, n)
    pi = pop.strata(x)
    u = rng.random(n)
    cum = np.cumsum(pi, axis=1)
    g = np.minimum((u[:, None] >= cum[:, :3]).sum(axis=1), 3).astype(np.int64)
    z = (rng.random(n) < pop.propensity(x)).astype(np.int64)
    eps0 = pop.noise(rng, n)
    eps1 = pop.noise(rng, n)
    L0, L1 = pop.outcome_means(x)
    rows = np.arange(n)
    s0, s1 = g // 2, g % 2
    y0 = np.where(s0 == 1, L0[rows, g] + eps0, 0.0)
    y1 = np.where(s1 == 1, L1[rows, g] + eps1, 0.0)
    s = np.where(z == 1, s1, s0)
    y = np.where(z == 1, y1, y0)
    data = Dataset(z=z, s=s, y=y, a=x[:, :1], c=x[:, 1:], a_names=("a_1",), c_names=("c_1",))
    return LabeledDataset(data, g, s0, s1, y0, y1, cfg)


# Application-style design: one binary A (a product attribute) and eight
# integer-coded categorical C columns, revenue on the scale of tens to hundreds.
APPLICATION_LEVELS = (3, 3, 4, 5, 5, 6, 6, 4)


def generate_application(n: int = 20000, seed: int = 0, eta: float = 1.0) -> LabeledDataset:
    """Synthetic data in the application schema ``z,s,y,a_1,c_1..c_8``.

    Category codes are small nonnegative integers stored as reals. Strata
    follow the multinomial-logit model with log odds ratio ``eta``; stratum
    revenue follows the exponential family with noise ``U(-1, 1)``. All
    coefficients are drawn once from a fixed stream, so only ``seed``
    changes the sample.
    """
    coef = np.random.default_rng(20240)
    c_dim = len(APPLICATION_LEVELS)
    scale = np.array([1.0 / (k - 1) for k in APPLICATION_LEVELS])
    iota01 = np.concatenate([[-0.5, 1.0], coef.normal(0.0, 1.5, c_dim) * scale])
    iota10 = np.concatenate([[-0.5, -1.0], coef.normal(0.0, 1.5, c_dim) * scale])
    params = {}
    for z, g in REQUIRED_PAIRS:
        params[(z, g)] = np.concatenate([[coef.uniform(3.5, 4.5), coef.uniform(3.5, 4.5)],
                                         coef.normal(0.0, 0.3, c_dim) * scale])
    strata_model = MultinomialStrataModel(iota01, iota10, float(eta))
    outcome = OutcomeModel("exp", 1, c_dim, params)

    rng = np.random.default_rng([int(seed), 7])
    a = (rng.random((n, 1)) < 0.45).astype(float)
    c = np.column_stack([rng.integers(0, k, n) for k in APPLICATION_LEVELS]).astype(float)
    x = np.hstack([a, c])
    pi = strata_model.predict(x)
    cum = np.cumsum(pi, axis=1)
    g = np.minimum((rng.random(n)[:, None] >= cum[:, :3]).sum(axis=1), 3).astype(np.int64)
    z = (rng.random(n) < 0.5).astype(np.int64)
    L0, L1 = outcome.arm_means(x)
    rows = np.arange(n)
    s0, s1 = g // 2, g % 2
    y0 = np.where(s0 == 1, L0[rows, g] + 2.0 * rng.random(n) - 1.0, 0.0)
    y1 = np.where(s1 == 1, L1[rows, g] + 2.0 * rng.random(n) - 1.0, 0.0)
    data = Dataset(z=z, s=np.where(z == 1, s1, s0), y=np.where(z == 1, y1, y0), a=a, c=c,
                   a_names=("a_1",), c_names=tuple(f"c_{j + 1}" for j in range(c_dim)))
    return LabeledDataset(data, g, s0, s1, y0, y1)


def _labels_of(rule, x) -> np.ndarray:
    if hasattr(rule, "classify"):
        return np.asarray(rule.classify(x))
    if callable(rule):
        return np.asarray(rule(x))
    return np.asarray(rule)


def classification_accuracy(rule, ld: LabeledDataset) -> float:
    """Share of rows whose label matches the true stratum.

    ``rule`` may be a label array, a callable ``x -> labels``, or an object
    with ``classify(x)``; only observable covariates are passed to it.
    """
    labels = _labels_of(rule, ld.data.x)
    return float(np.mean(labels == ld.g))


def policy_revenue(policy, ld: LabeledDataset, costs: CostSpec | None = None) -> float:
    """Realised revenue under ``policy`` divided by the observed revenue.

    ``policy`` is a 0/1 array, a callable ``x -> 0/1``, or an object with a
    ``treat(x)`` method. Returns NaN when observed revenue averages zero.
    """
    x = ld.data.x
    if hasattr(policy, "treat"):
        d = np.asarray(policy.treat(x), dtype=float)
    elif callable(policy):
        d = np.asarray(policy(x), dtype=float)
    else:
        d = np.asarray(policy, dtype=float)
    costs = costs or CostSpec.zero()
    gain = d * (ld.y1 - costs.c1(x)) + (1 - d) * (ld.y0 - costs.c0(x))
    denom = float(np.mean(ld.data.y))
    if denom == 0.0:
        return float("nan")
    return float(np.mean(gain) / denom)


def oracle_policy(pop: Population, ld: LabeledDataset, costs: CostSpec | None = None) -> np.ndarray:
    """Treat iff the true stratum's mean gain from treatment is nonnegative."""
    costs = costs or CostSpec.zero()
    x = ld.data.x
    L0, L1 = pop.outcome_means(x)
    rows = np.arange(ld.n)
    return ((L1[rows, ld.g] - costs.c1(x)) >= (L0[rows, ld.g] - costs.c0(x))).astype(int)


# ---------------------------------------------------------------------------
# Replication harness
# ---------------------------------------------------------------------------

METHODS = ("proposed", "posterior", "direct")


def _one_replication(cfg: SimulationConfig, rep: int, methods, pipeline_config, truth: dict):
    # imported here: pipeline depends on this module's types
    from .pipeline import fit_pipeline

    rows = []
    ld = generate(cfg, rep)
    base = {"n": int(cfg.n), "delta": float(cfg.delta), "eta": float(cfg.eta),
            "family": cfg.family, "rep": int(rep)}
    try:
        fitted = fit_pipeline(ld.data, replace(pipeline_config, eta=cfg.eta, family=cfg.family,
                                               seed=int(cfg.seed) * 100003 + int(rep)))
    except Exception as exc:  # recorded, excluded from summaries
        return [dict(base, method=m, metric="failed", value=1.0, error=repr(exc)) for m in methods]
    for name, value in fitted.estimands().items():
        rows.append(dict(base, method="proposed", metric=f"est_{name}", value=value))
        rows.append(dict(base, method="proposed", metric=f"bias_{name}", value=value - truth[name]))
    for method in methods:
        if method == "direct":
            policy = fitted.direct_policy()
            rows.append(dict(base, method=method, metric="revenue_ratio",
                             value=policy_revenue(policy, ld, fitted.config.costs)))
            continue
        rule = fitted.rule(method)
        rows.append(dict(base, method=method, metric="accuracy",
                         value=classification_accuracy(rule, ld)))
        rows.append(dict(base, method=method, metric="revenue_ratio",
                         value=policy_revenue(fitted.policy(method), ld, fitted.config.costs)))
    return rows


def run_experiment(configs, methods=METHODS, pipeline_config=None, *, workers: int = 1):
    """Run every replication of every configuration.

    Returns a tidy :class:`pandas.DataFrame` with columns ``n, delta, eta,
    family, rep, method, metric, value, error``. Replications are seeded by
    ``(seed, rep)`` so the table does not depend on ``workers``.
    """
    import pandas as pd

    from .pipeline import PipelineConfig

    if isinstance(configs, SimulationConfig):
        configs = [configs]
    pipeline_config = pipeline_config or PipelineConfig()
    unknown = set(methods) - set(METHODS)
    if unknown:
        raise ValueError(f"unknown methods {sorted(unknown)}")
    tasks = []
    for cfg in configs:
        truth = Population.from_config(cfg).true_estimands()
        tasks.extend((cfg, rep, tuple(methods), pipeline_config, truth) for rep in range(cfg.reps))
    if workers > 1:
        from concurrent.futures import ProcessPoolExecutor
        with ProcessPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(_one_replication_star, tasks))
    else:
        results = [_one_replication(*t) for t in tasks]
    rows = [row for chunk in results for row in chunk]
    df = pd.DataFrame(rows, columns=["n", "delta", "eta", "family", "rep", "method",
                                     "metric", "value", "error"])
    df["error"] = df["error"].fillna("")
    return df


def _one_replication_star(args):
    return _one_replication(*args)


def summarize_estimands(df, scale: float = 100.0):
    """Bias and Monte Carlo SE per configuration and estimand.

    ``bias`` and ``se`` are multiplied by ``scale`` (Table-1 convention);
    ``mc_se`` is the standard error of the bias, ``se / sqrt(reps)``.
    """
    import pandas as pd

    sub = df[df["metric"].str.startswith("bias_")].copy()
    sub["estimand"] = sub["metric"].str[len("bias_"):]
    keys = ["family", "delta", "eta", "n", "estimand"]
    out = []
    for key, grp in sub.groupby(keys, sort=True):
        v = grp.sort_values("rep")["value"].to_numpy()
        sd = float(np.std(v, ddof=1)) if len(v) > 1 else float("nan")
        out.append(dict(zip(keys, key), reps=len(v), bias=scale * float(np.mean(v)),
                        se=scale * sd, mc_se=scale * sd / np.sqrt(len(v))))
    return pd.DataFrame(out)


def summarize_methods(df):
    """Median accuracy and revenue ratio per configuration and method."""
    import pandas as pd

    sub = df[df["metric"].isin(["accuracy", "revenue_ratio"])]
    keys = ["family", "delta", "eta", "n", "method", "metric"]
    out = []
    for key, grp in sub.groupby(keys, sort=True):
        v = grp["value"].to_numpy()
        out.append(dict(zip(keys, key), reps=len(v), median=float(np.median(v)),
                        mean=float(np.mean(v))))
    return pd.DataFrame(out)


def failure_counts(df) -> dict:
    failed = df[df["metric"] == "failed"]
    return {k: int(v) for k, v in failed.groupby("method")["rep"].count().items()}


def format_table(df, scale: float = 100.0) -> str:
    """Plain-text table: one line per estimand, ``bias (se)`` per sample size."""
    summ = summarize_estimands(df, scale)
    if summ.empty:
        return "no successful replications\n"
    lines = []
    for (family, delta, eta), block in summ.groupby(["family", "delta", "eta"], sort=True):
        ns = sorted(block["n"].unique())
        lines.append(f"family={family} delta={delta:g} eta={eta:g}  bias x{scale:g} (se x{scale:g})")
        lines.append("estimand  " + "".join(f"{'n=' + str(n):>18}" for n in ns))
        for est in [estimand_name(z, g) for z, g in ESTIMANDS]:
            cells = []
            for n in ns:
                r = block[(block["estimand"] == est) & (block["n"] == n)]
                cells.append(f"{r['bias'].iloc[0]:8.2f} ({r['se'].iloc[0]:6.2f})" if len(r) else " " * 18)
            lines.append(f"{est:<10}" + "".join(f"{c:>18}" for c in cells))
        lines.append("")
    return "\n".join(lines)
