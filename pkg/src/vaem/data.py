"""Schema-driven ingestion of mixed-type tabular data.

Columns are continuous, categorical, discrete-continuous (continuous values
recorded on a finite grid), or ordinal. Cells are stored normalized:
continuous kinds affinely mapped to [0,1], categorical/ordinal as class
indices. A boolean mask marks observed cells; empty CSV fields are missing.
"""

from __future__ import annotations

import csv
import json
import logging
import math
from dataclasses import dataclass, replace

import numpy as np

log = logging.getLogger("vaem.data")

SCHEMA_VERSION = 1

CONTINUOUS = "continuous"
CATEGORICAL = "categorical"
DISCRETE = "discrete_continuous"
ORDINAL = "ordinal"

KINDS = (CONTINUOUS, CATEGORICAL, DISCRETE, ORDINAL)
CONTINUOUS_KINDS = (CONTINUOUS, DISCRETE)
INDEX_KINDS = (CATEGORICAL, ORDINAL)


class DataError(ValueError):
    """Schema or cell-level ingestion failure."""


@dataclass(frozen=True)
class ColumnSpec:
    """Type, bounds, and role of one column.

    Categorical class labels are stored sorted so label-to-index assignment
    is stable regardless of declaration order.
    """

    name: str
    kind: str
    min: float = 0.0
    max: float = 1.0
    class_labels: tuple = ()
    level_count: int = 0
    grid: tuple = ()  # raw-unit representable values for discrete_continuous
    is_target: bool = False

    def __post_init__(self):
        if self.kind not in KINDS:
            raise DataError(f"column {self.name!r}: unknown kind {self.kind!r}")
        if self.kind in CONTINUOUS_KINDS and not self.min < self.max:
            raise DataError(f"column {self.name!r}: requires min < max")
        if self.kind == CATEGORICAL:
            if len(self.class_labels) < 2:
                raise DataError(f"column {self.name!r}: needs at least 2 classes")
            object.__setattr__(self, "class_labels", tuple(sorted(self.class_labels)))
        if self.kind == ORDINAL and self.level_count < 2:
            raise DataError(f"column {self.name!r}: needs at least 2 levels")
        if self.kind == DISCRETE and self.grid:
            object.__setattr__(self, "grid", tuple(sorted(float(g) for g in self.grid)))

    @property
    def class_count(self) -> int:
        if self.kind == CATEGORICAL:
            return len(self.class_labels)
        if self.kind == ORDINAL:
            return self.level_count
        return 0

    @property
    def one_hot_width(self) -> int:
        """Input/probability width V: 1 for continuous kinds, class count otherwise."""
        return self.class_count if self.kind in INDEX_KINDS else 1

    @property
    def span(self) -> float:
        return self.max - self.min

    def normalize(self, raw: float) -> float:
        if self.kind in INDEX_KINDS:
            return float(raw)
        return (raw - self.min) / self.span

    def denormalize(self, value: float):
        """Back to raw units; continuous overshoot is clamped with a warning."""
        if self.kind in INDEX_KINDS:
            idx = int(round(value))
            if not 0 <= idx < self.class_count:
                raise DataError(f"column {self.name!r}: index {value} out of range")
            return self.class_labels[idx] if self.kind == CATEGORICAL else idx
        if value < 0.0 or value > 1.0:
            log.warning("column %r: clamping out-of-range normalized value %.4f",
                        self.name, value)
            value = min(max(value, 0.0), 1.0)
        raw = value * self.span + self.min
        if self.kind == DISCRETE and self.grid:
            raw = min(self.grid, key=lambda g: abs(g - raw))
        return raw

    def normalized_grid(self) -> np.ndarray:
        return np.array([(g - self.min) / self.span for g in self.grid])


def validate_schema(schema) -> tuple:
    schema = tuple(schema)
    names = [c.name for c in schema]
    if len(set(names)) != len(names):
        raise DataError("duplicate column names in schema")
    targets = [c for c in schema if c.is_target]
    if len(targets) != 1:
        raise DataError(f"schema must mark exactly one target column, found {len(targets)}")
    return schema


def target_index(schema) -> int:
    for i, c in enumerate(schema):
        if c.is_target:
            return i
    raise DataError("schema has no target column")


def schema_to_json(schema) -> dict:
    cols = []
    for c in schema:
        params = {}
        if c.kind == CATEGORICAL:
            params["classes"] = list(c.class_labels)
        elif c.kind == ORDINAL:
            params["levels"] = c.level_count
        elif c.kind == DISCRETE and c.grid:
            params["grid"] = list(c.grid)
        cols.append({
            "name": c.name, "kind": c.kind, "params": params,
            "min": c.min, "max": c.max, "is_target": c.is_target,
        })
    return {"schema_version": SCHEMA_VERSION, "columns": cols}


def schema_from_json(doc: dict) -> tuple:
    if doc.get("schema_version") != SCHEMA_VERSION:
        raise DataError(f"unsupported schema_version {doc.get('schema_version')!r}")
    cols = []
    for entry in doc["columns"]:
        params = entry.get("params", {})
        cols.append(ColumnSpec(
            name=entry["name"],
            kind=entry["kind"],
            min=float(entry.get("min", 0.0)),
            max=float(entry.get("max", 1.0)),
            class_labels=tuple(params.get("classes", ())),
            level_count=int(params.get("levels", 0)),
            grid=tuple(params.get("grid", ())),
            is_target=bool(entry.get("is_target", False)),
        ))
    return validate_schema(cols)


def load_schema(path) -> tuple:
    with open(path, encoding="utf-8") as fh:
        return schema_from_json(json.load(fh))


def save_schema(schema, path):
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(schema_to_json(schema), fh, indent=2, sort_keys=True)
        fh.write("\n")


@dataclass(frozen=True)
class Dataset:
    """Normalized cells plus observation mask; treat as immutable."""

    schema: tuple
    cells: np.ndarray  # (N, D) float64
    mask: np.ndarray   # (N, D) bool, True = observed

    def __post_init__(self):
        object.__setattr__(self, "schema", validate_schema(self.schema))
        cells = np.asarray(self.cells, dtype=np.float64)
        mask = np.asarray(self.mask, dtype=bool)
        if cells.shape != mask.shape or cells.ndim != 2 or cells.shape[1] != len(self.schema):
            raise DataError(f"cells {cells.shape} / mask {mask.shape} / "
                            f"schema width {len(self.schema)} mismatch")
        for d, col in enumerate(self.schema):
            seen = cells[mask[:, d], d]
            if col.kind in CONTINUOUS_KINDS:
                if seen.size and (seen.min() < -1e-9 or seen.max() > 1.0 + 1e-9):
                    raise DataError(f"column {col.name!r}: normalized cells outside [0,1]")
            elif seen.size and (np.any(seen != np.round(seen))
                                or seen.min() < 0 or seen.max() >= col.class_count):
                raise DataError(f"column {col.name!r}: invalid class indices")
        object.__setattr__(self, "cells", cells)
        object.__setattr__(self, "mask", mask)

    @property
    def n_rows(self) -> int:
        return self.cells.shape[0]

    @property
    def n_cols(self) -> int:
        return self.cells.shape[1]

    def with_mask(self, mask: np.ndarray) -> "Dataset":
        return Dataset(self.schema, self.cells, mask)

    def rows(self, idx) -> "Dataset":
        return Dataset(self.schema, self.cells[idx], self.mask[idx])

    def equals(self, other: "Dataset") -> bool:
        return (self.schema == other.schema
                and np.array_equal(self.cells, other.cells)
                and np.array_equal(self.mask, other.mask))


def load_csv(path, schema) -> Dataset:
    schema = validate_schema(schema)
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise DataError(f"{path}: empty file") from None
        if header != [c.name for c in schema]:
            raise DataError(f"{path}: header {header} does not match schema names")
        cells, mask = [], []
        label_index = {
            c.name: {lab: i for i, lab in enumerate(c.class_labels)}
            for c in schema if c.kind == CATEGORICAL
        }
        for rownum, row in enumerate(reader, start=2):
            if len(row) != len(schema):
                raise DataError(f"{path}:{rownum}: expected {len(schema)} fields, got {len(row)}")
            crow, mrow = [], []
            for col, raw in zip(schema, row):
                raw = raw.strip()
                if raw == "":
                    crow.append(0.0)
                    mrow.append(False)
                    continue
                try:
                    if col.kind == CATEGORICAL:
                        value = float(label_index[col.name][raw])
                    elif col.kind == ORDINAL:
                        level = int(raw)
                        if not 0 <= level < col.level_count:
                            raise ValueError(f"level {level} outside [0, {col.level_count})")
                        value = float(level)
                    else:
                        x = float(raw)
                        if not col.min - 1e-9 <= x <= col.max + 1e-9:
                            raise ValueError(f"value {x} outside [{col.min}, {col.max}]")
                        value = col.normalize(x)
                except KeyError:
                    raise DataError(f"{path}:{rownum}: column {col.name!r}: "
                                    f"unknown category label {raw!r}") from None
                except ValueError as exc:
                    raise DataError(f"{path}:{rownum}: column {col.name!r}: {exc}") from None
                crow.append(value)
                mrow.append(True)
            cells.append(crow)
            mask.append(mrow)
    if not cells:
        raise DataError(f"{path}: no data rows")
    return Dataset(schema, np.array(cells), np.array(mask))


def write_csv(dataset: Dataset, path):
    """Raw-unit CSV; missing cells become empty fields."""
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow([c.name for c in dataset.schema])
        for n in range(dataset.n_rows):
            row = []
            for d, col in enumerate(dataset.schema):
                if not dataset.mask[n, d]:
                    row.append("")
                elif col.kind == CATEGORICAL:
                    row.append(col.class_labels[int(dataset.cells[n, d])])
                elif col.kind == ORDINAL:
                    row.append(str(int(dataset.cells[n, d])))
                else:
                    row.append(repr(float(col.denormalize(dataset.cells[n, d]))))
            writer.writerow(row)


def split(dataset: Dataset, train_fraction: float = 0.9, seed: int = 0):
    """Deterministic disjoint row partition (train, test)."""
    n = dataset.n_rows
    if n < 10:
        raise DataError(f"need at least 10 rows to split, got {n}")
    perm = np.random.default_rng(seed).permutation(n)
    n_train = math.floor(n * train_fraction + 1e-9)
    return dataset.rows(np.sort(perm[:n_train])), dataset.rows(np.sort(perm[n_train:]))


@dataclass
class MissingnessSampler:
    """Per-epoch artificial missingness: one drop rate ~ U(0,1) per epoch."""

    seed: int
    rate_override: float | None = None

    def sample_epoch_mask(self, base_mask: np.ndarray, epoch: int) -> np.ndarray:
        rng = np.random.default_rng(np.random.SeedSequence([self.seed, epoch]))
        rate = rng.uniform() if self.rate_override is None else self.rate_override
        drop = rng.uniform(size=base_mask.shape) < rate
        return base_mask & ~drop


def sample_epoch_mask(sampler: MissingnessSampler, base_mask: np.ndarray,
                      epoch: int) -> np.ndarray:
    return sampler.sample_epoch_mask(base_mask, epoch)


def one_hot(value: int, count: int) -> np.ndarray:
    if not 0 <= value < count:
        raise DataError(f"one_hot: index {value} out of range for {count} classes")
    v = np.zeros(count)
    v[value] = 1.0
    return v


def one_hot_rows(values: np.ndarray, count: int) -> np.ndarray:
    values = np.asarray(values, dtype=np.int64)
    if values.size and (values.min() < 0 or values.max() >= count):
        raise DataError(f"one_hot: indices outside [0, {count})")
    out = np.zeros((values.shape[0], count))
    out[np.arange(values.shape[0]), values] = 1.0
    return out


def encoder_input(col: ColumnSpec, values: np.ndarray) -> np.ndarray:
    """Network input block for one column: (N, V).

    Scalar kinds are centered onto [-1, 1]: with nonnegative inputs and
    zero-started biases half of a relu layer never fires, which skews
    the learned latent layout onto one side of the prior.
    """
    if col.kind in INDEX_KINDS:
        return one_hot_rows(values, col.class_count)
    return 2.0 * np.asarray(values, dtype=np.float64)[:, None] - 1.0


def unit_scale(col: ColumnSpec, values: np.ndarray) -> np.ndarray:
    """Map normalized cell values onto a single [0, 1] scalar axis.

    Scalar kinds pass through; class-indexed kinds land on evenly spaced
    grid points (a lone class sits at 0.5).
    """
    values = np.asarray(values, dtype=np.float64)
    if col.kind not in INDEX_KINDS:
        return values
    count = col.class_count
    if count == 1:
        return np.full_like(values, 0.5)
    return np.round(values) / (count - 1)


def with_inferred_grids(dataset: Dataset) -> Dataset:
    """Fill empty discrete_continuous grids from distinct observed values."""
    new_schema = []
    for d, col in enumerate(dataset.schema):
        if col.kind == DISCRETE and not col.grid:
            seen = dataset.cells[dataset.mask[:, d], d]
            raw = sorted({round(v * col.span + col.min, 12) for v in seen})
            col = replace(col, grid=tuple(raw))
        new_schema.append(col)
    return Dataset(tuple(new_schema), dataset.cells, dataset.mask)


def drop_cells(dataset: Dataset, fraction: float = 0.5, seed: int = 0,
               protect_target: bool = False) -> Dataset:
    """Hide an exact fraction of observed cells, uniformly at random."""
    mask = dataset.mask.copy()
    eligible = np.argwhere(mask)
    if protect_target:
        t = target_index(dataset.schema)
        eligible = eligible[eligible[:, 1] != t]
    k = int(round(eligible.shape[0] * fraction))
    rng = np.random.default_rng(seed)
    chosen = eligible[rng.choice(eligible.shape[0], size=k, replace=False)]
    mask[chosen[:, 0], chosen[:, 1]] = False
    return dataset.with_mask(mask)
