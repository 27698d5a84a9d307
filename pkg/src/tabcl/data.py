"""Tabular dataset loading, preprocessing, corruption and row subsetting."""

from __future__ import annotations

import csv
import enum
import hashlib
import json
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Sequence

import numpy as np

MISSING_TOKENS = {"", "?", "na", "nan", "null", "none"}


class DataError(ValueError):
    """Malformed input data."""


class NormKind(str, enum.Enum):
    L1 = "l1"
    L2 = "l2"


@dataclass(frozen=True)
class Task:
    kind: str  # "classification" | "regression"
    n_classes: int = 0

    @property
    def is_classification(self) -> bool:
        return self.kind == "classification"

    def __post_init__(self):
        if self.kind not in ("classification", "regression"):
            raise ValueError(f"unknown task kind {self.kind!r}")


@dataclass(frozen=True)
class Column:
    name: str
    kind: str  # "numeric" | "categorical"
    categories: tuple[str, ...] = ()

    @property
    def category_count(self) -> int:
        return len(self.categories)

    @property
    def width(self) -> int:
        return 1 if self.kind == "numeric" else len(self.categories)


@dataclass
class SchemaHint:
    target: str
    task: str = "classification"
    kinds: dict[str, str] = field(default_factory=dict)
    drop: list[str] = field(default_factory=list)


@dataclass(frozen=True, eq=False)
class Dataset:
    features: np.ndarray
    target: np.ndarray
    task: Task
    columns: tuple[Column, ...]
    norm_applied: NormKind | None = None
    standardized: bool = False
    target_names: tuple[str, ...] = ()

    def __post_init__(self):
        if self.features.ndim != 2:
            raise DataError("features must be a 2-d matrix")
        if len(self.target) != self.features.shape[0]:
            raise DataError(f"{self.features.shape[0]} rows but {len(self.target)} targets")
        if self.features.shape[1] != sum(c.width for c in self.columns):
            raise DataError("feature width does not match the column schema")
        if self.task.is_classification and len(self.target):
            t = self.target
            if t.min() < 0 or t.max() >= self.task.n_classes:
                raise DataError("classification targets outside 0..K-1")

    @property
    def n(self) -> int:
        return self.features.shape[0]

    @property
    def d(self) -> int:
        return self.features.shape[1]

    def blocks(self) -> list[slice]:
        """Feature slice of every source column."""
        out, start = [], 0
        for c in self.columns:
            out.append(slice(start, start + c.width))
            start += c.width
        return out

    def fingerprint(self) -> str:
        payload = {
            "columns": [[c.name, c.kind, list(c.categories)] for c in self.columns],
            "norm": self.norm_applied.value if self.norm_applied else None,
            "standardized": self.standardized,
        }
        return hashlib.sha256(json.dumps(payload, sort_keys=True).encode()).hexdigest()[:16]


def _is_float(s: str) -> bool:
    try:
        float(s)
    except ValueError:
        return False
    return True


def load_csv(path: str | Path, schema: SchemaHint) -> Dataset:
    """Read a headered CSV into a Dataset.

    Numeric columns are parsed as floats; categorical columns (declared in
    ``schema.kinds`` or inferred from unparseable cells) are one-hot coded
    with categories in sorted order.
    """
    path = Path(path)
    with open(path, newline="") as fh:
        rows = [[cell.strip() for cell in r] for r in csv.reader(fh, skipinitialspace=True)]
    rows = [r for r in rows if r]
    if not rows:
        raise DataError(f"{path}: empty file (no header row)")
    header, body = rows[0], rows[1:]
    if schema.target not in header:
        raise DataError(f"{path}: target column {schema.target!r} not in header {header}")
    problems = []
    for i, r in enumerate(body):
        if len(r) != len(header):
            problems.append(f"row {i}: expected {len(header)} cells, got {len(r)}")
        else:
            missing = [header[j] for j, cell in enumerate(r) if cell.lower() in MISSING_TOKENS]
            if missing:
                problems.append(f"row {i}: missing value in {missing}")
    if problems:
        raise DataError(f"{path}: " + "; ".join(problems[:10])
                        + (f" (+{len(problems) - 10} more)" if len(problems) > 10 else ""))

    t_idx = header.index(schema.target)
    feature_idx = [j for j, h in enumerate(header) if j != t_idx and h not in schema.drop]
    columns, blocks = [], []
    for j in feature_idx:
        name = header[j]
        cells = [r[j] for r in body]
        kind = schema.kinds.get(name) or ("numeric" if all(_is_float(c) for c in cells)
                                          else "categorical")
        if kind == "numeric":
            bad = [i for i, c in enumerate(cells) if not _is_float(c)]
            if bad:
                raise DataError(f"{path}: column {name!r} unparseable at rows {bad[:10]}")
            columns.append(Column(name, "numeric"))
            blocks.append(np.array([float(c) for c in cells]).reshape(-1, 1))
        elif kind == "categorical":
            cats = tuple(sorted(set(cells)))
            lookup = {c: k for k, c in enumerate(cats)}
            onehot = np.zeros((len(cells), len(cats)))
            onehot[np.arange(len(cells)), [lookup[c] for c in cells]] = 1.0
            columns.append(Column(name, "categorical", cats))
            blocks.append(onehot)
        else:
            raise DataError(f"unknown column kind {kind!r} for {name!r}")
    features = np.hstack(blocks) if blocks else np.zeros((len(body), 0))
    if len(body) == 0:
        features = np.zeros((0, sum(c.width for c in columns)))
    if not np.isfinite(features).all():
        bad = sorted(set(np.nonzero(~np.isfinite(features))[0].tolist()))
        raise DataError(f"{path}: non-finite values at rows {bad[:10]}")

    raw_target = [r[t_idx] for r in body]
    if schema.task == "classification":
        names = tuple(sorted(set(raw_target)))
        lookup = {c: k for k, c in enumerate(names)}
        target = np.array([lookup[c] for c in raw_target], dtype=np.int64)
        task = Task("classification", len(names))
    elif schema.task == "regression":
        bad = [i for i, c in enumerate(raw_target) if not _is_float(c)]
        if bad:
            raise DataError(f"{path}: regression target unparseable at rows {bad[:10]}")
        target = np.array([float(c) for c in raw_target])
        names = ()
        task = Task("regression")
    else:
        raise DataError(f"unknown task {schema.task!r}")
    return Dataset(features, target, task, tuple(columns), target_names=names)


def write_csv(ds: Dataset, path: str | Path, target_name: str = "target") -> None:
    """Inverse of :func:`load_csv` for an unnormalized dataset."""
    header = [c.name for c in ds.columns] + [target_name]
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        for i in range(ds.n):
            row = []
            for c, sl in zip(ds.columns, ds.blocks()):
                block = ds.features[i, sl]
                row.append(repr(float(block[0])) if c.kind == "numeric"
                           else c.categories[int(np.argmax(block))])
            t = ds.target[i]
            row.append(ds.target_names[int(t)] if ds.target_names else repr(float(t)))
            w.writerow(row)


def standardize(ds: Dataset, stats: tuple[np.ndarray, np.ndarray] | None = None) -> Dataset:
    """Z-score the numeric columns; one-hot blocks are left as they are."""
    num = np.array([j for c, sl in zip(ds.columns, ds.blocks()) if c.kind == "numeric"
                    for j in range(sl.start, sl.stop)], dtype=np.int64)
    x = ds.features.copy()
    if stats is None:
        mean = x[:, num].mean(axis=0) if ds.n else np.zeros(len(num))
        std = x[:, num].std(axis=0) if ds.n else np.ones(len(num))
        std = np.where(std > 0, std, 1.0)
    else:
        mean, std = stats
    if len(num):
        x[:, num] = (x[:, num] - mean) / std
    return replace(ds, features=x, standardized=True)


def normalize(ds: Dataset, kind: NormKind | str) -> Dataset:
    """Rescale every row to unit L1 or L2 norm; all-zero rows pass through."""
    kind = NormKind(kind)
    if ds.norm_applied is not None:
        raise ValueError(f"dataset already normalized ({ds.norm_applied.value})")
    x = ds.features
    norms = np.abs(x).sum(axis=1) if kind is NormKind.L1 else np.sqrt((x * x).sum(axis=1))
    safe = np.where(norms > 0, norms, 1.0)
    return replace(ds, features=x / safe[:, None], norm_applied=kind)


@dataclass(frozen=True)
class CorruptionConfig:
    rate: float
    seed: int = 0

    def __post_init__(self):
        if not 0.0 <= self.rate <= 1.0:
            raise ValueError(f"corruption rate must lie in [0, 1], got {self.rate}")


@dataclass(frozen=True)
class Marginals:
    """Empirical value pools, one (pool_size x width) array per source column."""

    blocks: tuple[slice, ...]
    pools: tuple[np.ndarray, ...]

    @classmethod
    def from_features(cls, x: np.ndarray, blocks: Sequence[slice] | None = None) -> "Marginals":
        if blocks is None:
            blocks = [slice(j, j + 1) for j in range(x.shape[1])]
        return cls(tuple(blocks), tuple(x[:, sl].copy() for sl in blocks))

    @classmethod
    def from_dataset(cls, ds: Dataset) -> "Marginals":
        return cls.from_features(ds.features, ds.blocks())


def corrupt(batch: np.ndarray, marginals: Marginals, rate: float,
            rng: np.random.Generator | int) -> np.ndarray:
    """Replace each source-column cell, with probability ``rate``, by a draw
    from that column's empirical pool.  Categorical blocks move as a unit."""
    if not 0.0 <= rate <= 1.0:
        raise ValueError(f"corruption rate must lie in [0, 1], got {rate}")
    rng = np.random.default_rng(rng)
    for sl, pool in zip(marginals.blocks, marginals.pools):
        if len(pool) == 0:
            raise DataError(f"empty marginal pool for feature block {sl}")
    covered = sum(sl.stop - sl.start for sl in marginals.blocks)
    if covered != batch.shape[1]:
        raise DataError(f"marginals cover {covered} of {batch.shape[1]} columns")
    m = batch.shape[0]
    out = batch.copy()
    n_cols = len(marginals.blocks)
    mask = rng.random((m, n_cols)) < rate
    for j, (sl, pool) in enumerate(zip(marginals.blocks, marginals.pools)):
        draws = rng.integers(len(pool), size=m)
        rows = mask[:, j]
        out[rows, sl] = pool[draws[rows]]
    return out


def take(ds: Dataset, indices) -> Dataset:
    idx = np.asarray(indices, dtype=np.int64).reshape(-1)
    if idx.size and (idx.min() < 0 or idx.max() >= ds.n):
        raise IndexError(f"row index out of range for dataset of {ds.n} rows")
    return replace(ds, features=ds.features[idx], target=ds.target[idx])


def concat(a: Dataset, b: Dataset) -> Dataset:
    if a.columns != b.columns or a.task != b.task:
        raise DataError("cannot concatenate datasets with different schemas")
    return replace(a, features=np.vstack([a.features, b.features]),
                   target=np.concatenate([a.target, b.target]))


def subsample(ds: Dataset, max_rows: int, seed: int) -> Dataset:
    """Seeded row subsample without replacement, original order kept."""
    if ds.n <= max_rows:
        return ds
    idx = np.sort(np.random.default_rng(seed).choice(ds.n, size=max_rows, replace=False))
    return take(ds, idx)


def quantile_bins(y: np.ndarray, n_bins: int) -> np.ndarray:
    """Integer pseudo-classes from quantile bins of a real target."""
    edges = np.quantile(y, np.linspace(0, 1, n_bins + 1)[1:-1])
    labels = np.searchsorted(edges, y, side="right")
    # drop empty bins so labels stay contiguous
    _, labels = np.unique(labels, return_inverse=True)
    return labels.astype(np.int64)


def from_arrays(x: np.ndarray, y: np.ndarray, task: str = "classification",
                names: Sequence[str] | None = None) -> Dataset:
    """All-numeric Dataset from in-memory arrays."""
    x = np.asarray(x, dtype=np.float64)
    names = names or [f"x{j}" for j in range(x.shape[1])]
    cols = tuple(Column(nm, "numeric") for nm in names)
    if task == "classification":
        y = np.asarray(y, dtype=np.int64)
        k = int(y.max()) + 1 if len(y) else 0
        return Dataset(x, y, Task("classification", k), cols,
                       target_names=tuple(str(i) for i in range(k)))
    return Dataset(x, np.asarray(y, dtype=np.float64), Task("regression"), cols)


def bundled_path(name: str) -> Path:
    return Path(__file__).parent / "fixtures" / name


ADULT_SCHEMA = SchemaHint(target="income", task="classification")


def load_adult(max_rows: int | None = None, seed: int = 0) -> Dataset:
    """The bundled 5,000-row Adult census sample."""
    ds = load_csv(bundled_path("adult_5000.csv"), ADULT_SCHEMA)
    return subsample(ds, max_rows, seed) if max_rows else ds
