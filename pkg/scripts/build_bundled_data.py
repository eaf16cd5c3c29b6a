#!/usr/bin/env python3
"""Write the bundled datasets under data/ and, when raw files are given,
normalize the real housing and energy tables into the same layout.

Without flags the script regenerates the deterministic synthetic tables:

    data/housing.csv      + data/housing.schema.json
    data/efficiency.csv   + data/efficiency.schema.json

With --boston-raw (the 506-row whitespace-separated housing.data file)
and/or --energy-raw (a CSV export of the 768-row efficiency table with
columns X1..X8,Y1,Y2) it additionally writes:

    data/boston.csv       + data/boston.schema.json
    data/energy.csv       + data/energy.schema.json

The evaluation and acceptance suites prefer boston/energy when present
and fall back to the synthetic stand-ins otherwise.
"""
import argparse
import csv
import sys
from pathlib import Path

import numpy as np

from vaem.data import CATEGORICAL, CONTINUOUS, ColumnSpec, Dataset, save_schema, write_csv
from vaem.datasets import make_efficiency, make_housing

BOSTON_NAMES = ("CRIM", "ZN", "INDUS", "CHAS", "NOX", "RM", "AGE",
                "DIS", "RAD", "TAX", "PTRATIO", "B", "LSTAT", "MEDV")


def _continuous(name, values, is_target=False) -> ColumnSpec:
    return ColumnSpec(name=name, kind=CONTINUOUS, min=float(values.min()),
                      max=float(values.max()), is_target=is_target)


def _categorical(name, values) -> tuple[ColumnSpec, np.ndarray]:
    """Distinct raw values become sorted string labels; cells become indices."""
    levels = sorted(set(values.tolist()))
    labels = tuple(format(v, "g") for v in levels)
    index = {v: i for i, v in enumerate(levels)}
    return (ColumnSpec(name=name, kind=CATEGORICAL, class_labels=labels),
            np.array([index[v] for v in values], dtype=np.float64))


def normalize_boston(raw_path: Path) -> Dataset:
    rows = []
    for line in raw_path.read_text().splitlines():
        if line.strip():
            rows.append([float(tok) for tok in line.split()])
    table = np.asarray(rows, dtype=np.float64)
    if table.shape != (506, 14):
        raise SystemExit(f"{raw_path}: expected 506x14 values, got {table.shape}")
    cols, specs = [], []
    for j, name in enumerate(BOSTON_NAMES):
        if name == "CHAS":
            spec, cells = _categorical(name, table[:, j])
        else:
            spec = _continuous(name, table[:, j], is_target=(name == "MEDV"))
            cells = table[:, j]
        specs.append(spec)
        cols.append(cells)
    cells = np.column_stack(cols)
    return Dataset(tuple(specs), cells, np.ones_like(cells, dtype=bool))


def normalize_energy(raw_path: Path) -> Dataset:
    with open(raw_path, newline="", encoding="utf-8-sig") as fh:
        reader = csv.reader(fh)
        header = [h.strip() for h in next(reader)]
        body = [[float(v) for v in row[:len(header)]] for row in reader if any(row)]
    table = np.asarray(body, dtype=np.float64)
    pick = {name: header.index(name) for name in
            ("X1", "X2", "X3", "X4", "X5", "X6", "X7", "X8", "Y1")}
    if table.shape[0] != 768:
        raise SystemExit(f"{raw_path}: expected 768 rows, got {table.shape[0]}")
    cols, specs = [], []
    for name, j in pick.items():
        if name in ("X5", "X6", "X8"):    # height, orientation, glazing layout
            spec, cells = _categorical(name, table[:, j])
        else:
            spec = _continuous(name, table[:, j], is_target=(name == "Y1"))
            cells = table[:, j]
        specs.append(spec)
        cols.append(cells)
    cells = np.column_stack(cols)
    return Dataset(tuple(specs), cells, np.ones_like(cells, dtype=bool))


def emit(dataset: Dataset, out_dir: Path, stem: str):
    out_dir.mkdir(parents=True, exist_ok=True)
    write_csv(dataset, out_dir / f"{stem}.csv")
    save_schema(dataset.schema, out_dir / f"{stem}.schema.json")
    print(f"wrote {out_dir / f'{stem}.csv'} ({dataset.n_rows} rows, "
          f"{len(dataset.schema)} columns)")


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("--out", default="data", type=Path)
    parser.add_argument("--boston-raw", type=Path,
                        help="whitespace-separated 506x14 housing.data file")
    parser.add_argument("--energy-raw", type=Path,
                        help="CSV with columns X1..X8,Y1,Y2")
    args = parser.parse_args(argv)

    emit(make_housing(), args.out, "housing")
    emit(make_efficiency(), args.out, "efficiency")
    if args.boston_raw:
        emit(normalize_boston(args.boston_raw), args.out, "boston")
    if args.energy_raw:
        emit(normalize_energy(args.energy_raw), args.out, "energy")
    return 0


if __name__ == "__main__":
    sys.exit(main())
