"""Trial dataset container, CSV round-tripping and schema-driven ingestion."""
from __future__ import annotations

import enum
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
import pandas as pd


class Outcome(str, enum.Enum):
    CONTINUOUS = "continuous"
    BINARY = "binary"


class SchemaError(ValueError):
    """Raised when a CSV file does not conform to its declared schema."""


@dataclass
class TrialDataset:
    """Covariates ``X`` (n x p), treatment indicators ``t`` and outcomes ``y``."""

    X: np.ndarray
    t: np.ndarray
    y: np.ndarray
    outcome: Outcome
    feature_names: Optional[list[str]] = None

    def __post_init__(self):
        self.X = np.asarray(self.X, dtype=float)
        if self.X.ndim != 2:
            raise ValueError("X must be a 2-d array")
        self.t = np.asarray(self.t).astype(np.int8)
        self.y = np.asarray(self.y, dtype=float)
        self.outcome = Outcome(self.outcome)
        n = self.X.shape[0]
        if self.t.shape != (n,) or self.y.shape != (n,):
            raise ValueError(
                f"length mismatch: X has {n} rows, t has {self.t.shape}, y has {self.y.shape}"
            )
        if not np.isin(self.t, (0, 1)).all():
            raise ValueError("treatment indicators must be 0/1")
        if self.outcome is Outcome.BINARY and not np.isin(self.y, (0.0, 1.0)).all():
            raise ValueError("binary outcomes must be 0/1")
        if self.feature_names is None:
            self.feature_names = [f"x{j + 1}" for j in range(self.X.shape[1])]
        elif len(self.feature_names) != self.X.shape[1]:
            raise ValueError("feature_names length does not match X columns")

    @property
    def n(self) -> int:
        return self.X.shape[0]

    @property
    def p(self) -> int:
        return self.X.shape[1]

    def subset(self, idx) -> "TrialDataset":
        idx = np.asarray(idx)
        return TrialDataset(self.X[idx], self.t[idx], self.y[idx], self.outcome,
                            list(self.feature_names))

    def columns(self, names: Sequence[str]) -> np.ndarray:
        pos = [self.feature_names.index(nm) for nm in names]
        return self.X[:, pos]

    def to_frame(self) -> pd.DataFrame:
        df = pd.DataFrame(self.X, columns=self.feature_names)
        df["t"] = self.t.astype(int)
        df["y"] = self.y.astype(int) if self.outcome is Outcome.BINARY else self.y
        return df

    def to_csv(self, path) -> None:
        self.to_frame().to_csv(path, index=False, float_format="%.17g")

    @classmethod
    def from_csv(cls, path, outcome: Outcome | str) -> "TrialDataset":
        """Read the plain export format (covariate columns, then ``t`` and ``y``)."""
        df = pd.read_csv(path, comment="#", float_precision="round_trip")
        covs = [c for c in df.columns if c not in ("t", "y")]
        return cls(df[covs].to_numpy(float), df["t"].to_numpy(), df["y"].to_numpy(float),
                   Outcome(outcome), covs)


@dataclass
class ColumnSpec:
    name: str
    role: str  # covariate | confounder | treatment | outcome
    kind: str = "numeric"  # numeric | categorical
    reference: Optional[str] = None
    levels: Optional[list[str]] = None


_ROLES = ("covariate", "confounder", "treatment", "outcome")


@dataclass
class DatasetSchema:
    """Column roles for a user-supplied CSV.

    Categorical columns are reference-coded: one indicator per non-reference
    level. Confounders enter the Stage-2 adjustment and are held at their
    reference level when prognostic scores are computed.
    """

    columns: list[ColumnSpec]
    outcome: Outcome = Outcome.BINARY
    standardize_at: dict = field(default_factory=dict)

    def __post_init__(self):
        self.outcome = Outcome(self.outcome)
        for c in self.columns:
            if c.role not in _ROLES:
                raise SchemaError(f"column {c.name!r}: unknown role {c.role!r}")
            if c.kind not in ("numeric", "categorical"):
                raise SchemaError(f"column {c.name!r}: unknown kind {c.kind!r}")
        for role in ("treatment", "outcome"):
            found = [c.name for c in self.columns if c.role == role]
            if len(found) != 1:
                raise SchemaError(f"schema needs exactly one {role} column, found {found}")

    @classmethod
    def from_dict(cls, d: dict) -> "DatasetSchema":
        unknown = set(d) - {"columns", "outcome", "standardize_at"}
        if unknown:
            raise SchemaError(f"unknown schema keys: {sorted(unknown)}")
        cols = []
        for c in d["columns"]:
            extra = set(c) - {"name", "role", "kind", "reference", "levels"}
            if extra:
                raise SchemaError(f"column {c.get('name')!r}: unknown keys {sorted(extra)}")
            cols.append(ColumnSpec(**c))
        return cls(cols, d.get("outcome", "binary"), dict(d.get("standardize_at", {})))

    @property
    def treatment(self) -> str:
        return next(c.name for c in self.columns if c.role == "treatment")

    @property
    def response(self) -> str:
        return next(c.name for c in self.columns if c.role == "outcome")


@dataclass
class LoadedData:
    data: TrialDataset
    adjust_columns: list[str]
    standardize_at: dict[str, float]
    n_read: int
    n_dropped: int


def _numeric(col: pd.Series) -> pd.Series:
    """Parse strings exactly (``pd.to_numeric`` can be off by one ulp); bad cells become NaN."""
    def conv(v):
        try:
            return float(v)
        except ValueError:
            return np.nan
    return col.map(conv).astype(float)


def load_with_schema(path, schema: DatasetSchema) -> LoadedData:
    """Read a CSV, keep complete cases, validate roles and encode categoricals."""
    path = Path(path)
    raw = pd.read_csv(path, comment="#", dtype=str, keep_default_na=True)
    used = [c.name for c in schema.columns]
    missing = [nm for nm in used if nm not in raw.columns]
    if missing:
        raise SchemaError(f"{path}: missing column(s) {missing}")
    raw = raw[used]
    n_read = len(raw)
    complete = raw.notna().all(axis=1)
    df = raw[complete].reset_index(drop=True)
    # original 1-based data row numbers (header is line 1)
    rownum = np.flatnonzero(complete.to_numpy()) + 2

    tcol = schema.treatment
    t = _numeric(df[tcol])
    bad = ~t.isin([0, 1])
    if bad.any():
        i = int(np.flatnonzero(bad.to_numpy())[0])
        raise SchemaError(
            f"column {tcol!r}, row {rownum[i]}: treatment value {df[tcol].iloc[i]!r} not in {{0,1}}"
        )
    ycol = schema.response
    y = _numeric(df[ycol])
    if y.isna().any():
        i = int(np.flatnonzero(y.isna().to_numpy())[0])
        raise SchemaError(f"column {ycol!r}, row {rownum[i]}: non-numeric outcome {df[ycol].iloc[i]!r}")
    if schema.outcome is Outcome.BINARY and not y.isin([0, 1]).all():
        i = int(np.flatnonzero((~y.isin([0, 1])).to_numpy())[0])
        raise SchemaError(f"column {ycol!r}, row {rownum[i]}: binary outcome must be 0/1")

    blocks, names, adjust, std_at = [], [], [], {}
    for c in schema.columns:
        if c.role not in ("covariate", "confounder"):
            continue
        if c.kind == "numeric":
            v = _numeric(df[c.name])
            if v.isna().any():
                i = int(np.flatnonzero(v.isna().to_numpy())[0])
                raise SchemaError(
                    f"column {c.name!r}, row {rownum[i]}: non-numeric value {df[c.name].iloc[i]!r}"
                )
            blocks.append(v.to_numpy(float)[:, None])
            names.append(c.name)
            if c.role == "confounder":
                adjust.append(c.name)
                if c.name in schema.standardize_at:
                    std_at[c.name] = float(schema.standardize_at[c.name])
            continue
        levels = list(c.levels) if c.levels else list(dict.fromkeys(df[c.name]))
        unseen = set(df[c.name]) - set(levels)
        if unseen:
            raise SchemaError(f"column {c.name!r}: undeclared level(s) {sorted(unseen)}")
        ref = c.reference if c.reference is not None else levels[0]
        if ref not in levels:
            raise SchemaError(f"column {c.name!r}: reference level {ref!r} not among levels")
        for lev in levels:
            if lev == ref:
                continue
            nm = f"{c.name}[{lev}]"
            blocks.append((df[c.name] == lev).to_numpy(float)[:, None])
            names.append(nm)
            if c.role == "confounder":
                adjust.append(nm)
                std_at[nm] = 0.0
    X = np.hstack(blocks) if blocks else np.empty((len(df), 0))
    data = TrialDataset(X, t.to_numpy(int), y.to_numpy(float), schema.outcome, names)
    return LoadedData(data, adjust, std_at, n_read, n_read - len(df))


def reference_code(values: Sequence, reference=None) -> tuple[np.ndarray, list]:
    """Indicator matrix for the non-reference levels of a categorical vector.

    The reference defaults to the first level in data order.
    """
    levels = list(dict.fromkeys(values))
    ref = levels[0] if reference is None else reference
    if ref not in levels:
        raise ValueError(f"reference level {ref!r} not present")
    others = [lv for lv in levels if lv != ref]
    arr = np.asarray(values, dtype=object)
    Z = np.column_stack([(arr == lv).astype(float) for lv in others]) if others else np.empty((len(arr), 0))
    return Z, others
