"""Tabular data model, CSV ingestion, standardization and masking.

Missing cells are NaN in every value matrix. Masks are boolean arrays with
``True`` meaning *observed* (``M``) or *corrupted* (``M_c``).
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import AmputationError, ParseError, ShapeError

MISSING_TOKENS = frozenset({"", "na", "?", "nan"})
TARGET_KINDS = ("continuous", "binary", "multiclass")


@dataclass(frozen=True)
class ColumnKind:
    kind: str = "continuous"  # "continuous" | "categorical"
    cardinality: int = 0

    @property
    def is_categorical(self) -> bool:
        return self.kind == "categorical"


@dataclass
class Dataset:
    values: np.ndarray
    column_kinds: list[ColumnKind]
    names: list[str]
    target: int | None = None
    target_kind: str | None = None
    codebooks: dict[int, list[str]] = field(default_factory=dict)
    name: str = "dataset"

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        if self.values.ndim != 2:
            raise ShapeError("dataset values must be a 2-D matrix")
        n, d = self.values.shape
        if n < 2 or d < 2:
            raise ShapeError(f"dataset must be at least 2x2, got {n}x{d}")
        if len(self.column_kinds) != d or len(self.names) != d:
            raise ShapeError("column_kinds and names must have one entry per column")
        if self.target_kind is not None and self.target_kind not in TARGET_KINDS:
            raise ValueError(f"unknown target kind {self.target_kind!r}")

    @property
    def shape(self) -> tuple[int, int]:
        return self.values.shape

    @property
    def feature_columns(self) -> list[int]:
        return [j for j in range(self.values.shape[1]) if j != self.target]

    def features(self) -> np.ndarray:
        return self.values[:, self.feature_columns]

    def feature_kinds(self) -> list[ColumnKind]:
        return [self.column_kinds[j] for j in self.feature_columns]

    def target_values(self) -> np.ndarray:
        if self.target is None:
            raise ValueError("dataset has no target column")
        return self.values[:, self.target]

    def with_values(self, values: np.ndarray) -> "Dataset":
        return Dataset(values, list(self.column_kinds), list(self.names), self.target,
                       self.target_kind, dict(self.codebooks), self.name)


@dataclass
class ColumnStats:
    mean: np.ndarray
    std: np.ndarray

    def to_json(self, kinds: list[ColumnKind], names: list[str], codebooks: dict | None = None) -> list[dict]:
        codebooks = codebooks or {}
        out = []
        for j, (kind, name) in enumerate(zip(kinds, names)):
            out.append({
                "column": name,
                "kind": kind.kind,
                "cardinality": kind.cardinality,
                "mean": float(self.mean[j]),
                "std": float(self.std[j]),
                "codes": codebooks.get(j, []),
            })
        return out

    @classmethod
    def from_json(cls, rows: list[dict]) -> "ColumnStats":
        return cls(np.array([r["mean"] for r in rows], dtype=np.float64),
                   np.array([r["std"] for r in rows], dtype=np.float64))


@dataclass
class CorruptionSet:
    variants: np.ndarray  # (v, n, d)
    masks: np.ndarray  # (v, n, d) bool, True = corrupted

    def __len__(self):
        return self.variants.shape[0]


# ---------------------------------------------------------------------------
# CSV


def _is_missing(token: str) -> bool:
    return token.strip().lower() in MISSING_TOKENS


def _as_float(token: str) -> float | None:
    try:
        value = float(token)
    except ValueError:
        return None
    return value if math.isfinite(value) else None


def load_csv(path, schema_hints: dict | None = None) -> Dataset:
    """Read a headered CSV into a :class:`Dataset`.

    ``schema_hints`` may contain ``target`` (column name), ``target_kind``,
    ``categorical`` (column names forced categorical) and ``name``.
    Non-numeric columns are ordinal-encoded by order of first appearance.
    """
    hints = dict(schema_hints or {})
    path = Path(path)
    try:
        with path.open(newline="", encoding="utf-8") as fh:
            rows = list(csv.reader(fh))
    except OSError as exc:
        raise ParseError(f"cannot read {path}: {exc}") from exc
    rows = [r for r in rows if r]
    if not rows:
        raise ParseError(f"{path}: empty file")
    header = [h.strip() for h in rows[0]]
    body = rows[1:]
    d = len(header)
    for lineno, row in enumerate(body, start=2):
        if len(row) != d:
            raise ParseError(f"{path}: row {lineno} has {len(row)} fields, expected {d}")

    forced = set(hints.get("categorical", ()))
    n = len(body)
    values = np.full((n, d), np.nan)
    kinds: list[ColumnKind] = []
    codebooks: dict[int, list[str]] = {}
    for j, name in enumerate(header):
        tokens = [row[j].strip() for row in body]
        present = [t for t in tokens if not _is_missing(t)]
        if not present:
            raise ParseError(f"{path}: column {name!r} has no observed values")
        numeric = [_as_float(t) for t in present]
        if name not in forced and all(v is not None for v in numeric):
            for i, t in enumerate(tokens):
                if not _is_missing(t):
                    values[i, j] = float(t)
            kinds.append(ColumnKind("continuous"))
            continue
        codes: dict[str, int] = {}
        for i, t in enumerate(tokens):
            if _is_missing(t):
                continue
            values[i, j] = codes.setdefault(t, len(codes))
        if len(codes) < 2:
            raise ParseError(f"{path}: categorical column {name!r} has a single level")
        kinds.append(ColumnKind("categorical", len(codes)))
        codebooks[j] = list(codes)

    target = None
    target_kind = hints.get("target_kind")
    if hints.get("target") is not None:
        tname = hints["target"]
        if tname not in header:
            raise ParseError(f"{path}: target column {tname!r} not found")
        target = header.index(tname)
        if target_kind is None:
            target_kind = _infer_target_kind(values[:, target], kinds[target])
    return Dataset(values, kinds, header, target, target_kind, codebooks, hints.get("name", path.stem))


def _infer_target_kind(column: np.ndarray, kind: ColumnKind) -> str:
    observed = column[~np.isnan(column)]
    levels = np.unique(observed)
    integral = np.all(observed == np.round(observed))
    if kind.is_categorical or (integral and len(levels) <= 10):
        return "binary" if len(levels) == 2 else "multiclass"
    return "continuous"


def format_value(v: float) -> str:
    if isinstance(v, float) and math.isnan(v):
        return ""
    v = float(v)
    if v.is_integer() and abs(v) < 1e15:
        return str(int(v))
    return repr(v)


def dataset_rows(ds: Dataset, values: np.ndarray | None = None) -> list[list[str]]:
    """Serialize values (default ``ds.values``) to CSV tokens, decoding categoricals."""
    values = ds.values if values is None else values
    out = []
    for row in values:
        tokens = []
        for j, v in enumerate(row):
            if np.isnan(v):
                tokens.append("")
            elif j in ds.codebooks:
                tokens.append(ds.codebooks[j][int(v)])
            else:
                tokens.append(format_value(float(v)))
        out.append(tokens)
    return out


def write_csv(path, ds: Dataset, values: np.ndarray | None = None) -> None:
    with Path(path).open("w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(ds.names)
        writer.writerows(dataset_rows(ds, values))


def write_mask(path, mask: np.ndarray) -> None:
    with Path(path).open("w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerows(np.asarray(mask, dtype=int).tolist())


def read_mask(path) -> np.ndarray:
    with Path(path).open(newline="", encoding="utf-8") as fh:
        rows = [r for r in csv.reader(fh) if r]
    if len({len(r) for r in rows}) > 1:
        raise ParseError(f"{path}: mask rows differ in length")
    if any(t.strip() not in ("0", "1") for r in rows for t in r):
        raise ParseError(f"{path}: mask must contain only 0/1")
    return np.array([[t.strip() == "1" for t in r] for r in rows], dtype=bool)


def write_sidecar(path, stats: ColumnStats, ds: Dataset, extra: dict | None = None) -> None:
    payload = {"columns": stats.to_json(ds.column_kinds, ds.names, ds.codebooks)}
    if extra:
        payload.update(extra)
    Path(path).write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n", encoding="utf-8")


# ---------------------------------------------------------------------------
# masks


def observe_mask(ds) -> np.ndarray:
    values = ds.values if isinstance(ds, Dataset) else np.asarray(ds, dtype=np.float64)
    return ~np.isnan(values)


def ampute_mcar(mask_in: np.ndarray, rate: float, rng: np.random.Generator) -> np.ndarray:
    """Drop each observed cell with probability ``rate``, then repair.

    Repair puts back uniformly chosen removed cells so that every row keeps at
    least one observed cell and every column at least two.
    """
    if not 0.0 <= rate < 1.0:
        raise AmputationError(f"missing rate must lie in [0, 1), got {rate}")
    mask_in = np.asarray(mask_in, dtype=bool)
    if rate == 0.0:
        return mask_in.copy()
    if np.any(mask_in.sum(axis=0) < 2):
        raise AmputationError("a column has fewer than 2 observed cells before amputation")
    if np.any(mask_in.sum(axis=1) < 1):
        raise AmputationError("a row has no observed cells before amputation")
    drop = (rng.random(mask_in.shape) < rate) & mask_in
    mask = mask_in & ~drop

    for i in np.flatnonzero(mask.sum(axis=1) < 1):
        j = rng.choice(np.flatnonzero(drop[i]))
        mask[i, j] = True
        drop[i, j] = False
    for j in np.flatnonzero(mask.sum(axis=0) < 2):
        need = 2 - int(mask[:, j].sum())
        candidates = np.flatnonzero(drop[:, j])
        back = rng.choice(candidates, size=need, replace=False)
        mask[back, j] = True
        drop[back, j] = False
    return mask


# ---------------------------------------------------------------------------
# scaling


def standardize(values, mask: np.ndarray) -> tuple[np.ndarray, ColumnStats]:
    """Per-column z-score using observed cells only (population std; 0 std -> 1)."""
    x = values.values if isinstance(values, Dataset) else np.asarray(values, dtype=np.float64)
    mask = np.asarray(mask, dtype=bool)
    counts = mask.sum(axis=0)
    if np.any(counts < 2):
        bad = np.flatnonzero(counts < 2).tolist()
        raise ValueError(f"columns {bad} have fewer than 2 observed cells")
    xz = np.where(mask, x, 0.0)
    mean = xz.sum(axis=0) / counts
    var = (np.where(mask, x - mean, 0.0) ** 2).sum(axis=0) / counts
    std = np.sqrt(var)
    std = np.where(std > 0, std, 1.0)
    out = np.where(mask, (x - mean) / std, np.nan)
    return out, ColumnStats(mean, std)


def destandardize(x_std: np.ndarray, stats: ColumnStats, kinds: list[ColumnKind] | None = None) -> np.ndarray:
    out = np.asarray(x_std, dtype=np.float64) * stats.std + stats.mean
    for j, kind in enumerate(kinds or []):
        if kind.is_categorical:
            out[:, j] = np.clip(np.round(out[:, j]), 0, kind.cardinality - 1)
    return out


def zero_fill(x_std: np.ndarray, mask: np.ndarray) -> np.ndarray:
    return np.where(mask, x_std, 0.0)


def corrupt(x0: np.ndarray, mask: np.ndarray, rate: float, v: int, rng: np.random.Generator) -> CorruptionSet:
    """``v`` independent copies of ``x0`` with ``round(rate * |observed|)`` observed cells zeroed."""
    if not 0.0 <= rate < 1.0:
        raise ValueError(f"corruption rate must lie in [0, 1), got {rate}")
    if v < 1:
        raise ValueError("need at least one corruption variant")
    x0 = np.asarray(x0, dtype=np.float64)
    observed = np.flatnonzero(np.asarray(mask, dtype=bool).ravel())
    count = int(math.floor(rate * observed.size + 0.5))
    variants = np.repeat(x0[None], v, axis=0)
    masks = np.zeros((v, x0.size), dtype=bool)
    for i in range(v):
        masks[i, rng.choice(observed, size=count, replace=False)] = True
    masks = masks.reshape(variants.shape)
    variants[masks] = 0.0
    order = rng.permutation(v)
    return CorruptionSet(variants[order], masks[order])
