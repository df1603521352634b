"""Domain types, CSV ingestion, fold assignment, and probability clipping.

Terminology used throughout the package: the *source* population contributes
records with covariates X, a binary treatment A, and an outcome Y; the
*target* population contributes records carrying only the shared covariate
subset V (selected out of X by ``v_index_map``). Generalization averages over
the pooled population, transportation over the target population only.
"""

from __future__ import annotations

import csv
import json
import warnings
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np
from scipy.stats import norm

from .errors import ConfigError, DataError

Z_975 = float(norm.ppf(0.975))

KINDS = ("generalization", "transportation")
_KIND_ALIASES = {"ge": "generalization", "tr": "transportation",
                 "generalization": "generalization",
                 "transportation": "transportation"}

MISSING_TOKENS = {"", "na", "nan", "null", "none", "."}


class MissingDataWarning(UserWarning):
    """Rows dropped during CSV ingestion; message carries the row indices."""


@dataclass(frozen=True)
class SurveyInfo:
    stratum: int
    cluster: int
    weight: float

    def __post_init__(self):
        if not self.weight > 0:
            raise DataError(f"survey weight must be positive, got {self.weight}")


@dataclass(frozen=True)
class SourceRecord:
    x: np.ndarray
    a: int
    y: float

    def __post_init__(self):
        if self.a not in (0, 1):
            raise DataError(f"treatment must be 0 or 1, got {self.a}")


@dataclass(frozen=True)
class TargetRecord:
    v: np.ndarray
    survey: Optional[SurveyInfo] = None


def _freeze(arr: np.ndarray) -> np.ndarray:
    arr = np.ascontiguousarray(arr)
    arr.flags.writeable = False
    return arr


@dataclass(frozen=True)
class CombinedSample:
    """Pooled source + target dataset with the V-within-X column map.

    Arrays are read-only after construction; the type is safe to share
    across parallel workers.
    """

    x: np.ndarray                 # (n1, d) source covariates
    a: np.ndarray                 # (n1,) binary treatment
    y: np.ndarray                 # (n1,) outcome
    v_target: np.ndarray          # (n2, d_v) target covariates
    v_index_map: tuple            # d_v distinct column indices into X
    target_stratum: Optional[np.ndarray] = None
    target_cluster: Optional[np.ndarray] = None
    target_weight: Optional[np.ndarray] = None
    source_ids: Optional[np.ndarray] = None   # global record ids, set by subset()
    target_ids: Optional[np.ndarray] = None

    def __post_init__(self):
        x = np.atleast_2d(np.asarray(self.x, dtype=float))
        if x.size == 0:
            x = x.reshape(0, len(self.v_index_map) if x.shape[-1] == 0 else x.shape[-1])
        a = np.asarray(self.a, dtype=int).reshape(-1)
        y = np.asarray(self.y, dtype=float).reshape(-1)
        v = np.atleast_2d(np.asarray(self.v_target, dtype=float))
        if v.size == 0:
            v = v.reshape(0, len(self.v_index_map))
        idx = tuple(int(i) for i in self.v_index_map)
        d = x.shape[1]
        if len(set(idx)) != len(idx):
            raise ConfigError(f"v_index_map entries must be distinct, got {idx}")
        if idx and (min(idx) < 0 or (x.shape[0] > 0 and max(idx) >= d)):
            raise ConfigError(f"v_index_map {idx} out of range for d={d}")
        if v.shape[1] != len(idx):
            raise ConfigError(
                f"target covariates have {v.shape[1]} columns, v_index_map selects {len(idx)}")
        if a.shape[0] != x.shape[0] or y.shape[0] != x.shape[0]:
            raise ConfigError("source arrays must share the same length")
        if not np.isin(a, (0, 1)).all():
            bad = np.flatnonzero(~np.isin(a, (0, 1)))[0]
            raise DataError(f"treatment must be binary; source row {bad} has A={a[bad]}")
        for name, col in (("stratum", self.target_stratum),
                          ("cluster", self.target_cluster),
                          ("weight", self.target_weight)):
            if col is not None and len(np.asarray(col)) != v.shape[0]:
                raise ConfigError(f"survey column '{name}' does not match target length")
        if self.target_weight is not None and not (np.asarray(self.target_weight) > 0).all():
            raise DataError("survey weights must all be positive")
        object.__setattr__(self, "x", _freeze(x))
        object.__setattr__(self, "a", _freeze(a))
        object.__setattr__(self, "y", _freeze(y))
        object.__setattr__(self, "v_target", _freeze(v))
        object.__setattr__(self, "v_index_map", idx)
        for name in ("target_stratum", "target_cluster", "target_weight",
                     "source_ids", "target_ids"):
            val = getattr(self, name)
            if val is not None:
                object.__setattr__(self, name, _freeze(np.asarray(val)))

    @property
    def n1(self) -> int:
        return self.x.shape[0]

    @property
    def n2(self) -> int:
        return self.v_target.shape[0]

    @property
    def n(self) -> int:
        return self.n1 + self.n2

    @property
    def d(self) -> int:
        return self.x.shape[1]

    @property
    def d_v(self) -> int:
        return len(self.v_index_map)

    @property
    def v_source(self) -> np.ndarray:
        """V columns of the source records."""
        return self.x[:, list(self.v_index_map)]

    @property
    def is_v_equal_x(self) -> bool:
        return self.v_index_map == tuple(range(self.d))

    @property
    def has_survey(self) -> bool:
        return (self.target_stratum is not None and self.target_cluster is not None
                and self.target_weight is not None)

    @property
    def source(self) -> list:
        return [SourceRecord(self.x[i], int(self.a[i]), float(self.y[i]))
                for i in range(self.n1)]

    @property
    def target(self) -> list:
        out = []
        for i in range(self.n2):
            survey = None
            if self.has_survey:
                survey = SurveyInfo(int(self.target_stratum[i]),
                                    int(self.target_cluster[i]),
                                    float(self.target_weight[i]))
            out.append(TargetRecord(self.v_target[i], survey))
        return out

    def subset(self, source_idx: Sequence[int], target_idx: Sequence[int]) -> "CombinedSample":
        """Row subset carrying global record ids (source ids, then n1+target ids)."""
        si = np.asarray(source_idx, dtype=int)
        ti = np.asarray(target_idx, dtype=int)
        pick = lambda col, ix: None if col is None else col[ix]
        base_s = self.source_ids if self.source_ids is not None else np.arange(self.n1)
        base_t = self.target_ids if self.target_ids is not None else self.n1 + np.arange(self.n2)
        return CombinedSample(
            x=self.x[si], a=self.a[si], y=self.y[si],
            v_target=self.v_target[ti], v_index_map=self.v_index_map,
            target_stratum=pick(self.target_stratum, ti),
            target_cluster=pick(self.target_cluster, ti),
            target_weight=pick(self.target_weight, ti),
            source_ids=base_s[si], target_ids=base_t[ti])


@dataclass(frozen=True)
class FoldAssignment:
    """Deterministic fold id per record over the combined index [0, n)."""

    fold_ids: np.ndarray
    n_folds: int

    def __post_init__(self):
        ids = np.asarray(self.fold_ids, dtype=int)
        if self.n_folds < 1:
            raise ValueError("n_folds must be >= 1")
        counts = np.bincount(ids, minlength=self.n_folds)
        if (ids < 0).any() or (ids >= self.n_folds).any():
            raise ValueError("fold ids must lie in [0, n_folds)")
        if (counts == 0).any():
            raise ValueError("every fold must be nonempty")
        object.__setattr__(self, "fold_ids", _freeze(ids))

    @property
    def n(self) -> int:
        return len(self.fold_ids)

    def members(self, fold: int) -> np.ndarray:
        return np.flatnonzero(self.fold_ids == fold)


@dataclass(frozen=True)
class EstimandSpec:
    """Which functional: generalization vs transportation, and which arm."""

    kind: str
    arm: object  # 0, 1, or "contrast"

    def __post_init__(self):
        kind = _KIND_ALIASES.get(str(self.kind).lower())
        if kind is None:
            raise ConfigError(f"kind must be one of {sorted(_KIND_ALIASES)}, got {self.kind!r}")
        arm = self.arm
        if arm not in (0, 1, "contrast"):
            raise ConfigError(f"arm must be 0, 1 or 'contrast', got {arm!r}")
        object.__setattr__(self, "kind", kind)
        object.__setattr__(self, "arm", arm)


@dataclass(frozen=True)
class EffectEstimate:
    point: float
    se: float
    ci_lower: float
    ci_upper: float
    n_used: int
    spec: EstimandSpec
    method: str  # plugin | dr | qr
    naive: bool = False
    survey: bool = False

    def __post_init__(self):
        if self.se < 0:
            raise ValueError("se must be nonnegative")
        if not (self.ci_lower <= self.point <= self.ci_upper):
            raise ValueError("confidence interval must contain the point estimate")

    @classmethod
    def from_point_se(cls, point, se, n_used, spec, method, **kw) -> "EffectEstimate":
        point, se = float(point), float(se)
        return cls(point=point, se=se, ci_lower=point - Z_975 * se,
                   ci_upper=point + Z_975 * se, n_used=int(n_used),
                   spec=spec, method=method, **kw)

    def to_dict(self) -> dict:
        out = {"point": self.point, "se": self.se,
               "ci_lower": self.ci_lower, "ci_upper": self.ci_upper,
               "n_used": self.n_used, "kind": self.spec.kind,
               "arm": self.spec.arm, "method": self.method}
        if self.naive:
            out["naive"] = True
        if self.survey:
            out["survey"] = True
        return out


@dataclass(frozen=True)
class CsvSchema:
    """Name-based column schema: V columns are declared by sharing X names."""

    treatment: str
    outcome: str
    x_columns: tuple
    v_columns: tuple
    stratum: Optional[str] = None
    cluster: Optional[str] = None
    weight: Optional[str] = None

    def __post_init__(self):
        object.__setattr__(self, "x_columns", tuple(self.x_columns))
        object.__setattr__(self, "v_columns", tuple(self.v_columns))
        missing = [c for c in self.v_columns if c not in self.x_columns]
        if missing:
            raise ConfigError(
                f"V columns must be a subset of X columns; not in X: {missing}")
        if len(set(self.x_columns)) != len(self.x_columns):
            raise ConfigError("duplicate X column names")

    @property
    def v_index_map(self) -> tuple:
        return tuple(self.x_columns.index(c) for c in self.v_columns)

    @property
    def survey_columns(self) -> Optional[tuple]:
        cols = (self.stratum, self.cluster, self.weight)
        if all(c is None for c in cols):
            return None
        if any(c is None for c in cols):
            raise ConfigError("stratum, cluster and weight must be given together")
        return cols

    @classmethod
    def from_json(cls, path) -> "CsvSchema":
        with open(path, "r", encoding="utf-8") as fh:
            raw = json.load(fh)
        try:
            return cls(treatment=raw["treatment"], outcome=raw["outcome"],
                       x_columns=tuple(raw["x"]), v_columns=tuple(raw["v"]),
                       stratum=raw.get("stratum"), cluster=raw.get("cluster"),
                       weight=raw.get("weight"))
        except KeyError as exc:
            raise ConfigError(f"schema file {path} is missing key {exc}") from exc


def _is_missing(token: str) -> bool:
    return token is None or token.strip().lower() in MISSING_TOKENS


def _parse_float(token: str, row: int, column: str, path) -> float:
    try:
        return float(token)
    except ValueError:
        raise DataError(
            f"{path}: row {row}, column '{column}': cannot parse {token!r} as a number")


def load_combined_csv(source_path, target_path, schema: CsvSchema) -> CombinedSample:
    """Read source and target CSVs (UTF-8, header row, '.' decimals).

    Rows with missing required fields are dropped and reported through a
    single ``MissingDataWarning`` per file listing 1-based data row indexes.
    Structural problems raise: absent columns -> ConfigError, non-binary
    treatment values -> DataError naming the row.
    """
    xs, as_, ys = [], [], []
    rejected_src = []
    with open(source_path, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        header = reader.fieldnames or []
        needed = (schema.treatment, schema.outcome, *schema.x_columns)
        absent = [c for c in needed if c not in header]
        if absent:
            raise ConfigError(f"{source_path}: missing required columns {absent}")
        for row_no, row in enumerate(reader, start=1):
            tokens = [row.get(c) for c in needed]
            if any(_is_missing(t) for t in tokens):
                rejected_src.append(row_no)
                continue
            a_val = _parse_float(row[schema.treatment], row_no, schema.treatment, source_path)
            if a_val not in (0.0, 1.0):
                raise DataError(
                    f"{source_path}: row {row_no}: treatment value {row[schema.treatment]!r}"
                    " is not binary (expected 0 or 1)")
            xs.append([_parse_float(row[c], row_no, c, source_path) for c in schema.x_columns])
            as_.append(int(a_val))
            ys.append(_parse_float(row[schema.outcome], row_no, schema.outcome, source_path))

    vs, strat, clus, wgt = [], [], [], []
    survey_cols = schema.survey_columns
    rejected_tgt = []
    with open(target_path, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        header = reader.fieldnames or []
        absent = [c for c in schema.v_columns if c not in header]
        if absent:
            raise ConfigError(f"{target_path}: missing required columns {absent}")
        has_survey = survey_cols is not None and all(c in header for c in survey_cols)
        for row_no, row in enumerate(reader, start=1):
            tokens = [row.get(c) for c in schema.v_columns]
            if has_survey:
                tokens += [row.get(c) for c in survey_cols]
            if any(_is_missing(t) for t in tokens):
                rejected_tgt.append(row_no)
                continue
            vs.append([_parse_float(row[c], row_no, c, target_path) for c in schema.v_columns])
            if has_survey:
                strat.append(int(_parse_float(row[survey_cols[0]], row_no, survey_cols[0], target_path)))
                clus.append(int(_parse_float(row[survey_cols[1]], row_no, survey_cols[1], target_path)))
                w = _parse_float(row[survey_cols[2]], row_no, survey_cols[2], target_path)
                if w <= 0:
                    raise DataError(f"{target_path}: row {row_no}: weight must be positive")
                wgt.append(w)

    for path, rejected in ((source_path, rejected_src), (target_path, rejected_tgt)):
        if rejected:
            warnings.warn(
                f"{path}: dropped {len(rejected)} row(s) with missing required "
                f"fields at data rows {rejected}", MissingDataWarning, stacklevel=2)

    d = len(schema.x_columns)
    return CombinedSample(
        x=np.asarray(xs, dtype=float).reshape(-1, d),
        a=np.asarray(as_, dtype=int),
        y=np.asarray(ys, dtype=float),
        v_target=np.asarray(vs, dtype=float).reshape(-1, len(schema.v_columns)),
        v_index_map=schema.v_index_map,
        target_stratum=np.asarray(strat, dtype=int) if strat else None,
        target_cluster=np.asarray(clus, dtype=int) if clus else None,
        target_weight=np.asarray(wgt, dtype=float) if wgt else None)


def write_combined_csv(sample: CombinedSample, source_path, target_path,
                       schema: CsvSchema) -> None:
    """Inverse of :func:`load_combined_csv` (round-trips exactly via repr floats)."""
    if len(schema.x_columns) != sample.d:
        raise ConfigError("schema X columns do not match sample dimension")
    if schema.v_index_map != sample.v_index_map:
        raise ConfigError("schema V columns do not match the sample's v_index_map")
    with open(source_path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow([schema.treatment, schema.outcome, *schema.x_columns])
        for i in range(sample.n1):
            writer.writerow([int(sample.a[i]), repr(float(sample.y[i])),
                             *[repr(float(v)) for v in sample.x[i]]])
    survey_cols = schema.survey_columns if sample.has_survey else None
    with open(target_path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        head = list(schema.v_columns)
        if survey_cols:
            head += list(survey_cols)
        writer.writerow(head)
        for i in range(sample.n2):
            row = [repr(float(v)) for v in sample.v_target[i]]
            if survey_cols:
                row += [int(sample.target_stratum[i]), int(sample.target_cluster[i]),
                        repr(float(sample.target_weight[i]))]
            writer.writerow(row)


def default_schema(sample: CombinedSample, with_survey: bool = False) -> CsvSchema:
    """Generic x0..x{d-1} column names for exporting simulated samples."""
    x_cols = tuple(f"x{i}" for i in range(sample.d))
    v_cols = tuple(x_cols[i] for i in sample.v_index_map)
    survey = {}
    if with_survey or sample.has_survey:
        survey = {"stratum": "stratum", "cluster": "cluster", "weight": "weight"}
    return CsvSchema(treatment="treatment", outcome="outcome",
                     x_columns=x_cols, v_columns=v_cols, **survey)


def clip_probabilities(values, eps: float) -> np.ndarray:
    """Clamp into [eps, 1 - eps]; idempotent and order preserving."""
    if not 0.0 < eps < 0.5:
        raise ValueError(f"eps must lie in (0, 0.5), got {eps}")
    return np.clip(np.asarray(values, dtype=float), eps, 1.0 - eps)


def split_folds(n: int, k_folds: int, seed: int) -> FoldAssignment:
    """Balanced random partition of [0, n); deterministic in (n, k_folds, seed)."""
    if k_folds < 2:
        raise ValueError(f"k_folds must be at least 2, got {k_folds}")
    if k_folds > n:
        raise ValueError(f"k_folds={k_folds} exceeds the number of records n={n}")
    rng = np.random.default_rng(np.random.SeedSequence((int(seed), n, k_folds)))
    perm = rng.permutation(n)
    ids = np.empty(n, dtype=int)
    ids[perm] = np.arange(n) % k_folds
    return FoldAssignment(fold_ids=ids, n_folds=k_folds)
