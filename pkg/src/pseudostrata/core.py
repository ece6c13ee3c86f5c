"""Shared domain types: stratum labels, datasets, odds-ratio and cost specs."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from enum import IntEnum
from pathlib import Path
from typing import Iterable, Iterator, Sequence

import numpy as np


class StratumLabel(IntEnum):
    """Principal stratum ``s0s1``: potential responses under control and treatment.

    The integer value doubles as the column index used by every 4-vector in
    the package (``pi``, ``h``, reward columns), so ``00 < 01 < 10 < 11``.
    """

    S00 = 0
    S01 = 1
    S10 = 2
    S11 = 3

    @property
    def s0(self) -> int:
        return self.value >> 1

    @property
    def s1(self) -> int:
        return self.value & 1

    @classmethod
    def from_pair(cls, s0: int, s1: int) -> "StratumLabel":
        if s0 not in (0, 1) or s1 not in (0, 1):
            raise ValueError(f"potential responses must be binary, got ({s0}, {s1})")
        return cls(2 * s0 + s1)

    @classmethod
    def parse(cls, text: str | int | "StratumLabel") -> "StratumLabel":
        if isinstance(text, StratumLabel):
            return text
        if isinstance(text, (int, np.integer)) and not isinstance(text, bool):
            return cls(int(text))
        text = str(text).strip()
        if len(text) != 2 or any(ch not in "01" for ch in text):
            raise ValueError(f"not a stratum label: {text!r}")
        return cls.from_pair(int(text[0]), int(text[1]))

    def __str__(self) -> str:
        return f"{self.s0}{self.s1}"


def label_policy_order() -> list[StratumLabel]:
    """Fixed label order used for tie-breaking: ``[00, 01, 10, 11]``."""
    return [StratumLabel.S00, StratumLabel.S01, StratumLabel.S10, StratumLabel.S11]


LABELS = tuple(label_policy_order())
LABEL_NAMES = tuple(str(g) for g in LABELS)

# (z, stratum) pairs whose conditional outcome mean is not structurally zero
REQUIRED_PAIRS = (
    (1, StratumLabel.S11),
    (1, StratumLabel.S01),
    (0, StratumLabel.S11),
    (0, StratumLabel.S10),
)


def responds(z: int, g: StratumLabel) -> bool:
    """Whether stratum ``g`` purchases under arm ``z``."""
    return bool(g.s1 if z == 1 else g.s0)


class DatasetError(ValueError):
    """Raised when a dataset violates a fatal structural invariant."""


@dataclass(frozen=True)
class Observation:
    z: int
    s: int
    y: float
    a: tuple[float, ...]
    c: tuple[float, ...]


@dataclass(frozen=True)
class Dataset:
    """Column-oriented container for ``(Z, S, Y, A, C)``.

    Arrays are copied and made read-only on construction.
    """

    z: np.ndarray
    s: np.ndarray
    y: np.ndarray
    a: np.ndarray
    c: np.ndarray
    a_names: tuple[str, ...] = ()
    c_names: tuple[str, ...] = ()

    def __post_init__(self):
        z = np.asarray(self.z, dtype=np.int64).ravel()
        n = z.shape[0]
        s = np.asarray(self.s, dtype=np.int64).ravel()
        y = np.asarray(self.y, dtype=float).ravel()
        a = np.asarray(self.a, dtype=float).reshape(n, -1)
        c = np.asarray(self.c, dtype=float).reshape(n, -1)
        if not (s.shape[0] == y.shape[0] == n):
            raise DatasetError("z, s and y must have the same length")
        for name, arr in (("z", z), ("s", s), ("y", y), ("a", a), ("c", c)):
            arr = arr.copy()
            arr.setflags(write=False)
            object.__setattr__(self, name, arr)
        if not self.a_names:
            object.__setattr__(self, "a_names", tuple(f"a_{j + 1}" for j in range(a.shape[1])))
        if not self.c_names:
            object.__setattr__(self, "c_names", tuple(f"c_{j + 1}" for j in range(c.shape[1])))

    @property
    def n(self) -> int:
        return int(self.z.shape[0])

    def __len__(self) -> int:
        return self.n

    @property
    def a_dim(self) -> int:
        return int(self.a.shape[1])

    @property
    def c_dim(self) -> int:
        return int(self.c.shape[1])

    @property
    def x(self) -> np.ndarray:
        """Full covariate matrix ``X = (A, C)``."""
        return np.hstack([self.a, self.c])

    def rows(self) -> Iterator[Observation]:
        for i in range(self.n):
            yield Observation(int(self.z[i]), int(self.s[i]), float(self.y[i]),
                              tuple(self.a[i]), tuple(self.c[i]))

    @classmethod
    def from_rows(cls, rows: Iterable[Observation]) -> "Dataset":
        rows = list(rows)
        if not rows:
            raise DatasetError("dataset is empty")
        a_dim, c_dim = len(rows[0].a), len(rows[0].c)
        if any(len(r.a) != a_dim or len(r.c) != c_dim for r in rows):
            raise DatasetError("covariate dimensions differ across rows")
        return cls(
            z=[r.z for r in rows], s=[r.s for r in rows], y=[r.y for r in rows],
            a=np.array([r.a for r in rows], dtype=float).reshape(len(rows), a_dim),
            c=np.array([r.c for r in rows], dtype=float).reshape(len(rows), c_dim),
        )

    def take(self, index: np.ndarray | Sequence[int]) -> "Dataset":
        index = np.asarray(index)
        return Dataset(self.z[index], self.s[index], self.y[index], self.a[index],
                       self.c[index], self.a_names, self.c_names)

    def split_x(self, x: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """Split a covariate matrix laid out like :attr:`x` into ``(A, C)``."""
        x = np.atleast_2d(np.asarray(x, dtype=float))
        if x.shape[1] != self.a_dim + self.c_dim:
            raise ValueError(f"expected {self.a_dim + self.c_dim} covariates, got {x.shape[1]}")
        return x[:, :self.a_dim], x[:, self.a_dim:]


@dataclass
class ValidationReport:
    errors: list[str] = field(default_factory=list)
    warnings: list[str] = field(default_factory=list)

    @property
    def ok(self) -> bool:
        return not self.errors

    def raise_if_fatal(self) -> None:
        if self.errors:
            raise DatasetError("; ".join(self.errors))


def validate_dataset(d: Dataset) -> ValidationReport:
    """Check the observation and dataset invariants without modifying ``d``.

    Fatal: empty data, non-binary ``z``/``s``, non-finite values, an absent
    arm, revenue recorded without a response, or an arm with a constant
    response. Negative revenue is only a warning because the linear-outcome
    simulation design produces it.
    """
    report = ValidationReport()
    if d.n == 0:
        report.errors.append("dataset is empty")
        return report
    if not np.isin(d.z, (0, 1)).all():
        report.errors.append("treatment z must be 0/1")
    if not np.isin(d.s, (0, 1)).all():
        report.errors.append("response s must be 0/1")
    for name, arr in (("y", d.y), ("a", d.a), ("c", d.c)):
        if not np.isfinite(arr).all():
            report.errors.append(f"non-finite values in {name}")
    if not (d.z == 1).any():
        report.errors.append("treatment arm absent")
    if not (d.z == 0).any():
        report.errors.append("control arm absent")
    bad = (d.s == 0) & (d.y != 0)
    if bad.any():
        report.errors.append(f"revenue without response in {int(bad.sum())} row(s)")
    for arm, name in ((1, "treatment"), (0, "control")):
        sel = d.z == arm
        if sel.any():
            frac = d.s[sel].mean()
            if frac == 0 or frac == 1:
                report.errors.append(f"degenerate response arm: {name} responses are constant")
    neg = (d.y < 0).sum()
    if neg:
        report.warnings.append(f"negative revenue in {int(neg)} row(s)")
    if d.a_dim + d.c_dim == 0:
        report.warnings.append("no covariates")
    return report


@dataclass(frozen=True)
class OddsRatioSpec:
    """Constant odds ratio ``theta = exp(eta)`` linking ``S0`` and ``S1``."""

    eta: float = 0.0

    def __post_init__(self):
        if not math.isfinite(self.eta):
            raise ValueError("eta must be finite")

    @property
    def theta(self) -> float:
        return math.exp(self.eta)


@dataclass(frozen=True)
class AffineCost:
    """``c(x) = intercept + weights . x`` over the full covariate vector."""

    intercept: float = 0.0
    weights: tuple[float, ...] = ()

    def __call__(self, x: np.ndarray) -> np.ndarray:
        x = np.atleast_2d(np.asarray(x, dtype=float))
        out = np.full(x.shape[0], float(self.intercept))
        if self.weights:
            w = np.asarray(self.weights, dtype=float)
            if w.shape[0] != x.shape[1]:
                raise ValueError(f"cost has {w.shape[0]} weights but x has {x.shape[1]} columns")
            out = out + x @ w
        return out

    @property
    def is_zero(self) -> bool:
        return self.intercept == 0 and not any(self.weights)


@dataclass(frozen=True)
class CostSpec:
    c1: AffineCost = AffineCost()
    c0: AffineCost = AffineCost()

    @classmethod
    def zero(cls) -> "CostSpec":
        return cls()

    @classmethod
    def from_dict(cls, data: dict | None) -> "CostSpec":
        if not data:
            return cls()
        def one(key):
            spec = data.get(key) or {}
            return AffineCost(float(spec.get("intercept", 0.0)),
                              tuple(float(v) for v in spec.get("weights", ())))
        return cls(c1=one("c1"), c0=one("c0"))

    def to_dict(self) -> dict:
        return {k: {"intercept": v.intercept, "weights": list(v.weights)}
                for k, v in (("c1", self.c1), ("c0", self.c0))}


@dataclass(frozen=True)
class RewardMatrix:
    """Conditional misclassification rewards ``R(pseudo | true)``.

    ``entries[t, s]`` is the expected net revenue of a true-``s`` individual
    treated by the rule tailored to label ``t``. Undefined entries (empty
    true stratum) are NaN.
    """

    entries: np.ndarray

    def __post_init__(self):
        e = np.array(self.entries, dtype=float)
        if e.shape != (4, 4):
            raise ValueError("reward matrix must be 4x4")
        if np.isinf(e).any():
            raise ValueError("reward entries must be finite or NaN (undefined)")
        e.setflags(write=False)
        object.__setattr__(self, "entries", e)

    @property
    def undefined(self) -> np.ndarray:
        return np.isnan(self.entries)

    def __getitem__(self, key: tuple) -> float:
        t, s = key
        return float(self.entries[StratumLabel.parse(t), StratumLabel.parse(s)])

    @classmethod
    def identity(cls) -> "RewardMatrix":
        return cls(np.eye(4))

    def to_dict(self) -> dict:
        return {
            "index": "entries[pseudo][true]",
            "labels": list(LABEL_NAMES),
            "entries": [[None if np.isnan(v) else float(v) for v in row] for row in self.entries],
        }

    @classmethod
    def from_dict(cls, data: dict) -> "RewardMatrix":
        return cls(np.array([[np.nan if v is None else v for v in row] for row in data["entries"]],
                            dtype=float))


# ---------------------------------------------------------------------------
# CSV ingestion
# ---------------------------------------------------------------------------

def _parse_columns(header: list[str], a_cols, c_cols) -> tuple[list[int], list[int]]:
    def resolve(spec):
        out = []
        for item in spec:
            if isinstance(item, int) or (isinstance(item, str) and item.isdigit()):
                idx = int(item)
                if not 0 <= idx < len(header):
                    raise DatasetError(f"column index {idx} out of range")
                out.append(idx)
            else:
                if item not in header:
                    raise DatasetError(f"column {item!r} not in header")
                out.append(header.index(item))
        return out

    if a_cols is None:
        a_idx = [i for i, h in enumerate(header) if h.startswith("a_")]
    else:
        a_idx = resolve(a_cols)
    if c_cols is None:
        c_idx = [i for i, h in enumerate(header) if h.startswith("c_")]
    else:
        c_idx = resolve(c_cols)
    if set(a_idx) & set(c_idx):
        raise DatasetError("A and C column sets overlap")
    reserved = {header.index(k) for k in ("z", "s", "y")}
    if reserved & (set(a_idx) | set(c_idx)):
        raise DatasetError("z, s, y cannot be covariates")
    return a_idx, c_idx


def read_csv(path: str | Path, a_cols=None, c_cols=None) -> Dataset:
    """Read a dataset with header ``z,s,y,a_1..a_p,c_1..c_q``.

    ``a_cols``/``c_cols`` override the covariate partition with column names
    or zero-based indices. Rows with empty fields are rejected.
    """
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = [h.strip() for h in next(reader)]
        except StopIteration:
            raise DatasetError(f"{path}: empty file") from None
        for key in ("z", "s", "y"):
            if key not in header:
                raise DatasetError(f"{path}: header lacks column {key!r}")
        a_idx, c_idx = _parse_columns(header, a_cols, c_cols)
        iz, is_, iy = header.index("z"), header.index("s"), header.index("y")
        z, s, y, a, c = [], [], [], [], []
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != len(header) or any(v.strip() == "" for v in row):
                raise DatasetError(f"{path}:{lineno}: missing field")
            try:
                z.append(int(float(row[iz])))
                s.append(int(float(row[is_])))
                y.append(float(row[iy]))
                a.append([float(row[i]) for i in a_idx])
                c.append([float(row[i]) for i in c_idx])
            except ValueError as exc:
                raise DatasetError(f"{path}:{lineno}: {exc}") from None
    if not z:
        raise DatasetError(f"{path}: dataset is empty")
    n = len(z)
    return Dataset(z, s, y, np.array(a).reshape(n, len(a_idx)), np.array(c).reshape(n, len(c_idx)),
                   tuple(header[i] for i in a_idx), tuple(header[i] for i in c_idx))


def write_csv(path: str | Path, d: Dataset, extra: dict[str, np.ndarray] | None = None) -> None:
    extra = extra or {}
    header = ["z", "s", "y", *d.a_names, *d.c_names, *extra]
    cols = [d.z, d.s, d.y, *d.a.T, *d.c.T, *extra.values()]
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for i in range(d.n):
            w.writerow([_fmt(col[i]) for col in cols])


def _fmt(v) -> str:
    if isinstance(v, str):
        return v
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    v = float(v)
    if v.is_integer() and abs(v) < 1e15:
        return str(int(v))
    return repr(v)
