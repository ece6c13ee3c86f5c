"""End-to-end estimation: strata probabilities, outcome means, rewards, rules."""

from __future__ import annotations

from dataclasses import dataclass, field, fields
from functools import cached_property

import numpy as np

from .core import (LABELS, REQUIRED_PAIRS, CostSpec, Dataset, OddsRatioSpec, RewardMatrix, StratumLabel,
                   validate_dataset)
from .decision import (DecisionRule, GridSpec, PseudoStrataPolicy, direct_policy_search, linear_rule,
                       principal_effect, reward_matrix, value_function)
from .outcome import OutcomeFit, fit_outcome_models, get_family
from .strata import ClosedFormStrataModel, em_fit, fit_response_rates

STRATA_METHODS = ("em", "closed_form")
RULES = {"proposed": "bayes", "bayes": "bayes", "posterior": "posterior"}


def estimand_name(z: int, g) -> str:
    return f"L{z}_{str(StratumLabel.parse(g))}"


@dataclass(frozen=True)
class PipelineConfig:
    """Estimation settings shared by the CLI, sweeps, bootstrap and experiments."""

    eta: float = 0.0
    family: str = "exp"
    q_basis: str | None = None
    strata_method: str = "em"
    costs: CostSpec = field(default_factory=CostSpec)
    em_restarts: int = 5
    em_tol: float = 1e-10
    em_max_iter: int = 1000
    gmm_restarts: int = 3
    seed: int = 0
    identity_rewards: bool = False

    def __post_init__(self):
        if self.strata_method not in STRATA_METHODS:
            raise ValueError(f"strata_method must be one of {STRATA_METHODS}")
        get_family(self.family)

    def to_dict(self) -> dict:
        out = {f.name: getattr(self, f.name) for f in fields(self)}
        out["costs"] = self.costs.to_dict()
        return out

    @classmethod
    def from_dict(cls, data: dict) -> "PipelineConfig":
        data = dict(data)
        known = {f.name for f in fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise ValueError(f"unknown pipeline keys {sorted(unknown)}")
        if "costs" in data:
            data["costs"] = CostSpec.from_dict(data["costs"])
        return cls(**data)


def fit_strata(d: Dataset, cfg: PipelineConfig):
    """Strata probabilities by EM or closed form. Returns ``(strata_model, rates_or_None, diagnostics)``."""
    spec = OddsRatioSpec(cfg.eta)
    if cfg.strata_method == "closed_form":
        rates = fit_response_rates(d)
        return ClosedFormStrataModel(rates, spec), rates, {"method": "closed_form"}
    res = em_fit(d, spec, tol=cfg.em_tol, max_iter=cfg.em_max_iter,
                 n_restarts=cfg.em_restarts, seed=cfg.seed)
    diag = {"method": "em", "loglik": res.loglik, "iterations": res.n_iter,
            "converged": res.converged, "restart_logliks": list(res.restarts)}
    return res.model, None, diag


@dataclass
class FittedPipeline:
    config: PipelineConfig
    data: Dataset
    strata: object
    rates: object
    outcome_fit: OutcomeFit
    strata_diagnostics: dict

    @property
    def outcome(self):
        return self.outcome_fit.model

    @cached_property
    def rewards(self) -> RewardMatrix:
        if self.config.identity_rewards:
            return RewardMatrix.identity()
        return reward_matrix(self.data, self.strata, self.outcome, self.config.costs)

    def rule(self, method: str = "proposed") -> DecisionRule:
        try:
            source = RULES[method]
        except KeyError:
            raise ValueError(f"no classification rule for method {method!r}") from None
        if source == "bayes":
            return DecisionRule("bayes", strata=self.strata, rewards=self.rewards)
        return DecisionRule("posterior", strata=self.strata)

    def policy(self, method: str = "proposed"):
        if method == "direct":
            return self.direct_policy()
        return PseudoStrataPolicy(self.rule(method), self.outcome, self.config.costs)

    @cached_property
    def direct(self):
        return direct_policy_search(self.strata, self.outcome, self.config.costs, self.data, GridSpec())

    def direct_policy(self):
        beta = self.direct[0]
        return lambda x: linear_rule(beta, x)

    def evaluate(self, method: str = "proposed"):
        return value_function(self.policy(method), self.strata, self.outcome, self.config.costs, self.data)

    def estimands(self) -> dict:
        return {estimand_name(z, g): principal_effect(self.strata, self.outcome, self.data, z, g)
                for z, g in REQUIRED_PAIRS}

    def strata_shares(self) -> dict:
        pi = self.strata.predict(self.data.x).mean(axis=0)
        return {f"pi_{g}": float(p) for g, p in zip(LABELS, pi)}

    def label_shares(self, method: str = "proposed") -> dict:
        labels = self.rule(method).classify(self.data.x)
        return {f"share_{g}": float(np.mean(labels == g)) for g in LABELS}

    def summary(self) -> dict:
        out = {"estimands": self.estimands(), "strata_shares": self.strata_shares(),
               "reward_matrix": self.rewards.to_dict(),
               "strata": self.strata_diagnostics, "outcome": self.outcome_fit.diagnostics()}
        return out


def fit_pipeline(d: Dataset, cfg: PipelineConfig | None = None) -> FittedPipeline:
    """Fit strata and outcome models; rewards, rules and policies are derived lazily."""
    cfg = cfg or PipelineConfig()
    validate_dataset(d).raise_if_fatal()
    strata, rates, diag = fit_strata(d, cfg)
    of = fit_outcome_models(d, strata, rates, cfg.family, cfg.q_basis,
                            n_restarts=cfg.gmm_restarts, seed=cfg.seed)
    return FittedPipeline(cfg, d, strata, rates, of, diag)


# ---------------------------------------------------------------------------
# Serialisation
# ---------------------------------------------------------------------------

MODEL_FORMAT = "pseudostrata-model"


def pipeline_to_dict(fp: FittedPipeline) -> dict:
    """Everything needed to classify and evaluate policies on new data."""
    d = fp.data
    return {
        "format": MODEL_FORMAT, "version": 1,
        "a_dim": d.a_dim, "c_dim": d.c_dim,
        "a_names": list(d.a_names), "c_names": list(d.c_names),
        "config": fp.config.to_dict(),
        "strata": fp.strata.to_dict(),
        "outcome": fp.outcome.to_dict(),
        "reward_matrix": fp.rewards.to_dict(),
        "identification": fp.outcome_fit.identification.to_dict(),
        "diagnostics": {"strata": fp.strata_diagnostics, "outcome": fp.outcome_fit.diagnostics()},
    }


@dataclass
class LoadedModel:
    """Fitted components read back from :func:`pipeline_to_dict` output."""

    config: PipelineConfig
    strata: object
    outcome: object
    rewards: RewardMatrix
    a_dim: int
    c_dim: int

    @classmethod
    def from_dict(cls, data: dict) -> "LoadedModel":
        from .outcome import OutcomeModel
        from .strata import strata_model_from_dict

        if data.get("format") != MODEL_FORMAT:
            raise ValueError("not a model file")
        return cls(PipelineConfig.from_dict(data["config"]), strata_model_from_dict(data["strata"]),
                   OutcomeModel.from_dict(data["outcome"]), RewardMatrix.from_dict(data["reward_matrix"]),
                   int(data["a_dim"]), int(data["c_dim"]))

    def check(self, d: Dataset) -> None:
        from .core import DatasetError

        if d.a_dim != self.a_dim:
            raise DatasetError(f"model expects a_dim={self.a_dim} A covariates, data has {d.a_dim}")
        if d.c_dim != self.c_dim:
            raise DatasetError(f"model expects c_dim={self.c_dim} C covariates, data has {d.c_dim}")

    def rule(self, method: str = "proposed", identity_rewards: bool = False) -> DecisionRule:
        source = RULES.get(method)
        if source is None:
            raise ValueError(f"no classification rule for method {method!r}")
        if source == "bayes":
            rm = RewardMatrix.identity() if identity_rewards else self.rewards
            return DecisionRule("bayes", strata=self.strata, rewards=rm)
        return DecisionRule("posterior", strata=self.strata)

    def policy(self, method: str = "proposed"):
        return PseudoStrataPolicy(self.rule(method), self.outcome, self.config.costs)
