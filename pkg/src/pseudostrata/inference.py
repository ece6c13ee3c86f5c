"""Bootstrap intervals, sensitivity sweeps over eta, and rate diagnostics."""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Callable, Mapping, Sequence

import numpy as np

from .core import Dataset, validate_dataset
from .pipeline import PipelineConfig, fit_pipeline

MAX_FAILURE_SHARE = 0.2


class BootstrapError(RuntimeError):
    """Too many resamples failed for the interval to be trusted."""


def _as_mapping(value) -> dict:
    if isinstance(value, Mapping):
        return {str(k): float(v) for k, v in value.items()}
    return {"estimate": float(value)}


@dataclass
class BootstrapResult:
    """Replicates of one or more scalar estimands.

    ``replicates[b, j]`` is NaN for failed resamples; ``failures`` maps
    replicate index to the error text.
    """

    names: list
    point: dict
    replicates: np.ndarray
    failures: dict = field(default_factory=dict)
    level: float = 0.95
    seed: int = 0

    @property
    def B(self) -> int:
        return self.replicates.shape[0]

    @property
    def n_failed(self) -> int:
        return len(self.failures)

    def _column(self, name: str) -> np.ndarray:
        v = self.replicates[:, self.names.index(name)]
        return v[np.isfinite(v)]

    def percentile_interval(self, name: str | None = None) -> tuple[float, float]:
        """Type-1 empirical quantiles: both endpoints are replicate values."""
        v = self._column(name or self.names[0])
        a = (1.0 - self.level) / 2.0
        lo, hi = np.quantile(v, [a, 1.0 - a], method="inverted_cdf")
        return float(lo), float(hi)

    def se(self, name: str | None = None) -> float:
        v = self._column(name or self.names[0])
        with np.errstate(over="ignore", invalid="ignore"):
            return float(np.std(v, ddof=1)) if v.size > 1 else 0.0

    def normal_interval(self, name: str | None = None) -> tuple[float, float]:
        """``point -/+ z * bootstrap SE``."""
        name = name or self.names[0]
        z = _normal_quantile(0.5 + self.level / 2.0)
        p, s = self.point[name], self.se(name)
        return p - z * s, p + z * s

    def median(self, name: str | None = None) -> float:
        return float(np.median(self._column(name or self.names[0])))

    def summary(self) -> dict:
        out = {}
        for name in self.names:
            lo, hi = self.percentile_interval(name)
            nlo, nhi = self.normal_interval(name)
            out[name] = {"point": self.point[name], "se": self.se(name), "median": self.median(name),
                         "percentile_interval": [lo, hi], "normal_interval": [nlo, nhi],
                         "formatted": format_interval(self.point[name], lo, hi)}
        return {"B": self.B, "failed": self.n_failed, "level": self.level, "seed": self.seed,
                "estimands": out}

    def tidy_rows(self) -> list[dict]:
        rows = []
        for b in range(self.B):
            for j, name in enumerate(self.names):
                rows.append({"replicate": b, "estimand": name, "value": float(self.replicates[b, j]),
                             "failed": int(b in self.failures)})
        return rows


def _normal_quantile(p: float) -> float:
    from scipy.stats import norm
    return float(norm.ppf(p))


def _replicate(args):
    d, estimator, seed, b = args
    rng = np.random.default_rng([int(seed), int(b)])
    idx = rng.integers(0, d.n, d.n)
    try:
        return _as_mapping(estimator(d.take(idx))), None
    except Exception as exc:  # recorded per replicate
        return None, f"{type(exc).__name__}: {exc}"


def bootstrap(d: Dataset, estimator: Callable, B: int = 200, seed: int = 0, *,
              level: float = 0.95, workers: int = 1) -> BootstrapResult:
    """Nonparametric row bootstrap of ``estimator`` (``Dataset -> float | dict``).

    Resample ``b`` draws its indices from ``default_rng([seed, b])``, so the
    result does not depend on ``workers``. Raises :class:`BootstrapError`
    when more than 20% of resamples fail.
    """
    if B < 2:
        raise ValueError("B must be at least 2")
    point = _as_mapping(estimator(d))
    names = list(point)
    tasks = [(d, estimator, seed, b) for b in range(B)]
    if workers > 1:
        from concurrent.futures import ProcessPoolExecutor
        with ProcessPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(_replicate, tasks))
    else:
        results = [_replicate(t) for t in tasks]
    reps = np.full((B, len(names)), np.nan)
    failures = {}
    for b, (val, err) in enumerate(results):
        if err is not None:
            failures[b] = err
            continue
        reps[b] = [val.get(k, np.nan) for k in names]
    if len(failures) > MAX_FAILURE_SHARE * B:
        first = failures[min(failures)]
        raise BootstrapError(f"{len(failures)} of {B} resamples failed (first: {first})")
    return BootstrapResult(names, point, reps, failures, level, seed)


def format_interval(point: float, lo: float, hi: float, digits: int = 2) -> str:
    """``'143.44 (29.70, 257.18)'`` style: point estimate then interval.

    Magnitudes of 1e6 and above switch to scientific notation.
    """
    def f(v):
        return f"{v:.{digits}f}" if abs(v) < 1e6 else f"{v:.{digits + 2}g}"
    return f"{f(point)} ({f(lo)}, {f(hi)})"


def pipeline_estimator(cfg: PipelineConfig | None = None) -> Callable[[Dataset], dict]:
    """Closure refitting the whole pipeline and returning its estimands and strata shares."""
    cfg = cfg or PipelineConfig()

    def estimate(d: Dataset) -> dict:
        fp = fit_pipeline(d, cfg)
        out = dict(fp.estimands())
        out["L1_11_minus_L0_11"] = out["L1_11"] - out["L0_11"]
        out.update(fp.strata_shares())
        return out

    return estimate


# ---------------------------------------------------------------------------
# Sensitivity sweep
# ---------------------------------------------------------------------------

@dataclass
class SensitivityGrid:
    etas: list
    results: list
    errors: dict = field(default_factory=dict)

    def __post_init__(self):
        if any(b <= a for a, b in zip(self.etas, self.etas[1:])):
            raise ValueError("eta values must be strictly increasing")

    def column(self, eta: float) -> dict | None:
        return self.results[self.etas.index(eta)]

    def series(self, quantity: str) -> np.ndarray:
        return np.array([r.get(quantity, np.nan) if r else np.nan for r in self.results])

    def tidy_rows(self) -> list[dict]:
        rows = []
        for eta, res in zip(self.etas, self.results):
            if res is None:
                rows.append({"eta": eta, "quantity": "failed", "value": 1.0})
                continue
            for k, v in res.items():
                rows.append({"eta": eta, "quantity": k, "value": float(v)})
        return rows


def sweep_point(d: Dataset, cfg: PipelineConfig, methods: Sequence[str] = ("proposed", "posterior")) -> dict:
    """All reported quantities for one fitted pipeline."""
    fp = fit_pipeline(d, cfg)
    out = dict(fp.estimands())
    out.update(fp.strata_shares())
    for m in methods:
        ev = fp.evaluate(m)
        out[f"value_{m}"] = ev.value
        out[f"revenue_ratio_{m}"] = ev.revenue_ratio
        if m != "direct":
            out.update({f"{m}_{k}": v for k, v in fp.label_shares(m).items()})
    return out


def _sweep_task(args):
    d, cfg, methods = args
    try:
        return sweep_point(d, cfg, methods), None
    except Exception as exc:
        return None, f"{type(exc).__name__}: {exc}"


def sensitivity_sweep(d: Dataset, etas: Sequence[float], cfg: PipelineConfig | None = None, *,
                      methods: Sequence[str] = ("proposed", "posterior"), workers: int = 1) -> SensitivityGrid:
    """Refit the pipeline at each ``eta``; failures are recorded and skipped."""
    validate_dataset(d).raise_if_fatal()
    cfg = cfg or PipelineConfig()
    etas = [float(e) for e in etas]
    if any(b <= a for a, b in zip(etas, etas[1:])):
        raise ValueError("eta values must be strictly increasing")
    tasks = [(d, replace(cfg, eta=e), tuple(methods)) for e in etas]
    if workers > 1:
        from concurrent.futures import ProcessPoolExecutor
        with ProcessPoolExecutor(max_workers=workers) as pool:
            out = list(pool.map(_sweep_task, tasks))
    else:
        out = [_sweep_task(t) for t in tasks]
    results = [r for r, _ in out]
    errors = {e: err for e, (_, err) in zip(etas, out) if err is not None}
    return SensitivityGrid(etas, results, errors)


# ---------------------------------------------------------------------------
# Convergence rates
# ---------------------------------------------------------------------------

@dataclass
class ConvergenceTable:
    ns: np.ndarray
    rmse: np.ndarray
    bias: np.ndarray
    sd: np.ndarray
    slope: float
    failures: dict

    def to_rows(self) -> list[dict]:
        return [{"n": int(n), "rmse": float(r), "bias": float(b), "sd": float(s)}
                for n, r, b, s in zip(self.ns, self.rmse, self.bias, self.sd)]


def convergence_diagnostic(generator: Callable, ns: Sequence[int], reps: int,
                           estimand: Callable, truth: float | None = None) -> ConvergenceTable:
    """Error of ``estimand(generator(n, rep))`` against ``truth`` across sample sizes.

    Without ``truth`` the replicate mean stands in, so ``rmse`` is the
    standard deviation. ``slope`` is the least-squares slope of
    ``log rmse`` on ``log n``.
    """
    ns = np.asarray(ns, dtype=int)
    rmse, bias, sd, fails = [], [], [], {}
    for n in ns:
        vals = []
        for rep in range(reps):
            try:
                vals.append(float(estimand(generator(int(n), rep))))
            except Exception as exc:
                fails.setdefault(int(n), []).append(repr(exc))
        v = np.asarray(vals)
        center = float(np.mean(v)) if truth is None else float(truth)
        rmse.append(float(np.sqrt(np.mean((v - center) ** 2))))
        bias.append(float(np.mean(v) - center))
        sd.append(float(np.std(v, ddof=1)) if v.size > 1 else float("nan"))
    rmse = np.asarray(rmse)
    slope = float(np.polyfit(np.log(ns), np.log(rmse), 1)[0])
    return ConvergenceTable(ns, rmse, np.asarray(bias), np.asarray(sd), slope, fails)


# ---------------------------------------------------------------------------
# Writers
# ---------------------------------------------------------------------------

def _clean(obj):
    if isinstance(obj, dict):
        return {str(k): _clean(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_clean(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return _clean(obj.tolist())
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if isinstance(obj, (float, np.floating)):
        f = float(obj)
        return f if math.isfinite(f) else None
    return obj


def write_json(obj, path: str | Path) -> None:
    """Sorted-key JSON; non-finite floats become ``null``."""
    Path(path).write_text(json.dumps(_clean(obj), indent=2, sort_keys=True) + "\n")


def write_rows_csv(rows: list[dict], path: str | Path, columns: Sequence[str] | None = None) -> None:
    columns = list(columns or (rows[0].keys() if rows else []))
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(columns)
        for r in rows:
            w.writerow([_cell(r.get(c, "")) for c in columns])


def _cell(v) -> str:
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    return str(v)
