"""Experiment harness: repeated-seed runs, likelihood tables, data exports.

Every reported likelihood goes through the models' shared per-cell scoring
path, so numbers are comparable across model kinds.  Suites train each
requested kind from independent seeds on one split and score generation
likelihood, conditional likelihood under random missingness, and
imputation error on the held-out rows.
"""

from __future__ import annotations

import hashlib
import time
from dataclasses import dataclass

import numpy as np

from .baselines import train_flat_vae
from .data import (CONTINUOUS_KINDS, DataError, Dataset, drop_cells,
                   one_hot_rows, split, unit_scale)
from .model import canonical_json, train_two_stage

MODEL_KINDS = ("vaem", "flat", "flat-extended", "flat-balanced")

DEFAULT_CONFIG = {
    "master_seed": 0,
    "train_fraction": 0.9,
    "missing_fraction": 0.5,
    "importance_samples": 1000,
    "batch_size": 100,
    "lr": 1e-3,
    "noise_variance": 0.02,
    "k_prior": 50,
    "mc_samples": 1,
    "epochs_stage1": 1000,
    "epochs_stage2": 1000,
    "lr_stage2": None,
    "epochs": 1000,
}


@dataclass
class RunReport:
    """Aggregated scores for one model kind on one dataset.

    Standard errors are None when the suite ran a single seed.
    """

    dataset_id: str
    model_kind: str
    seeds: list
    generation_nll: float
    generation_nll_se: float
    conditional_nll: float
    conditional_nll_se: float
    imputation_rmse: float
    imputation_rmse_se: float
    wall_clock_seconds: float
    config_hash: str

    def to_json(self) -> dict:
        return {
            "dataset_id": self.dataset_id,
            "model_kind": self.model_kind,
            "seeds": [int(s) for s in self.seeds],
            "generation_nll": self.generation_nll,
            "generation_nll_se": self.generation_nll_se,
            "conditional_nll": self.conditional_nll,
            "conditional_nll_se": self.conditional_nll_se,
            "imputation_rmse": self.imputation_rmse,
            "imputation_rmse_se": self.imputation_rmse_se,
            "wall_clock_seconds": self.wall_clock_seconds,
            "config_hash": self.config_hash,
        }


def _train_one(kind: str, train_set: Dataset, seed: int, cfg: dict):
    shared = dict(master_seed=seed, batch_size=cfg["batch_size"],
                  lr=cfg["lr"], noise_variance=cfg["noise_variance"],
                  k_prior=cfg["k_prior"], mc_samples=cfg["mc_samples"])
    if kind == "vaem":
        return train_two_stage(train_set, epochs_stage1=cfg["epochs_stage1"],
                               epochs_stage2=cfg["epochs_stage2"],
                               lr_stage2=cfg["lr_stage2"], **shared)
    variant = {"flat": "plain", "flat-extended": "extended",
               "flat-balanced": "balanced"}[kind]
    return train_flat_vae(train_set, variant, epochs=cfg["epochs"], **shared)


def run_suite(dataset: Dataset, kinds=MODEL_KINDS, n_seeds: int = 5,
              config: dict = None, dataset_id: str = "dataset") -> list:
    """Train and score each model kind over independent seeds.

    Needs fully observed rows so held-out cells always have ground truth.
    Returns one report per kind, reproducible bit for bit from the master
    seed in the config.
    """
    for kind in kinds:
        if kind not in MODEL_KINDS:
            raise ValueError(f"unknown model kind {kind!r}")
    cfg = dict(DEFAULT_CONFIG)
    cfg.update(config or {})
    if not dataset.mask.all():
        raise DataError("run_suite needs fully observed rows")
    train_set, test_set = split(dataset, cfg["train_fraction"],
                                seed=cfg["master_seed"])
    reports = []
    for ki, kind in enumerate(kinds):
        gen, cond, imp, seeds = [], [], [], []
        t0 = time.perf_counter()
        for s in range(n_seeds):
            seed = int(np.random.SeedSequence(
                [cfg["master_seed"], 41, ki, s]).generate_state(1)[0])
            seeds.append(seed)
            model = _train_one(kind, train_set, seed, cfg)
            rng = np.random.default_rng(np.random.SeedSequence([seed, 47]))
            gen.append(model.is_nll(
                test_set.cells, test_set.mask, mode="generation",
                importance_samples=cfg["importance_samples"], rng=rng))
            held = drop_cells(test_set, cfg["missing_fraction"], seed=seed)
            cond.append(model.is_nll(
                test_set.cells, held.mask, mode="conditional",
                importance_samples=cfg["importance_samples"], rng=rng))
            imputed = model.impute(test_set.cells, held.mask)
            imp.append(imputation_rmse(test_set.cells, imputed,
                                       ~held.mask, dataset.schema))
        payload = {"dataset": dataset_id, "kind": kind, "n_seeds": n_seeds,
                   "config": cfg}
        digest = hashlib.sha256(
            canonical_json(payload).encode()).hexdigest()[:12]
        reports.append(RunReport(
            dataset_id, kind, seeds,
            _mean(gen), _stderr(gen), _mean(cond), _stderr(cond),
            _mean(imp), _stderr(imp),
            float(time.perf_counter() - t0), digest))
    return reports


def _mean(values) -> float:
    return float(np.mean(values))


def _stderr(values) -> float:
    if len(values) < 2:
        return None
    return float(np.std(values, ddof=1) / np.sqrt(len(values)))


def imputation_rmse(truth, predictions, masks, schema) -> float:
    """Per-variable imputation error over the cells flagged in ``masks``.

    Each column's squared errors are averaged over that column's imputed
    cells, the per-column averages are summed under one square root, and
    the result is divided by the number of columns.  Continuous errors use
    normalized cell values; class-valued errors use one-hot encodings.
    Columns with no imputed cells contribute nothing to the sum.
    """
    truth = np.atleast_2d(np.asarray(truth, dtype=np.float64))
    predictions = np.atleast_2d(np.asarray(predictions, dtype=np.float64))
    masks = np.atleast_2d(np.asarray(masks, dtype=bool))
    if not (truth.shape == predictions.shape == masks.shape):
        raise DataError(
            f"imputation coverage mismatch: truth {truth.shape}, "
            f"predictions {predictions.shape}, masks {masks.shape}")
    if truth.shape[1] != len(schema):
        raise DataError(f"imputation coverage mismatch: {truth.shape[1]} "
                        f"columns vs schema width {len(schema)}")
    if masks.sum() == 0:
        raise DataError("no imputed cells to score")
    total = 0.0
    for d, col in enumerate(schema):
        sel = masks[:, d]
        n_d = int(sel.sum())
        if n_d == 0:
            continue
        if col.kind in CONTINUOUS_KINDS:
            se = (truth[sel, d] - predictions[sel, d]) ** 2
        else:
            a = one_hot_rows(np.rint(truth[sel, d]).astype(np.int64),
                             col.class_count)
            b = one_hot_rows(np.rint(predictions[sel, d]).astype(np.int64),
                             col.class_count)
            se = ((a - b) ** 2).sum(axis=1)
        total += float(se.sum()) / n_d
    return float(np.sqrt(total) / len(schema))


def pairplot_export(source, n_samples: int = 1000, dims=None,
                    seed: int = 0) -> dict:
    """Histogram and scatter data for rendering a pair grid.

    ``source`` is a trained model (rows are drawn from it) or a Dataset
    (its first ``n_samples`` rows are used as-is).  Scalar columns get 50
    equal bins over [0, 1]; class columns get exact class frequencies and
    are plotted on evenly spaced [0, 1] grid points.  Values are clipped
    to the unit axes, so every histogram's counts total the row count.
    """
    if isinstance(source, Dataset):
        rows = source.cells[:n_samples]
    else:
        rng = np.random.default_rng(np.random.SeedSequence([seed, 53]))
        rows = source.sample(n_samples, rng)
    schema = source.schema
    n = rows.shape[0]
    if dims is None:
        dims = list(range(len(schema)))
    dims = [int(d) for d in dims]
    columns = []
    for d in dims:
        col = schema[d]
        entry = {"dim": d, "name": col.name, "kind": col.kind}
        if col.kind in CONTINUOUS_KINDS:
            counts, edges = np.histogram(np.clip(rows[:, d], 0.0, 1.0),
                                         bins=50, range=(0.0, 1.0))
            entry["histogram"] = counts.tolist()
            entry["bin_edges"] = edges.tolist()
        else:
            counts = np.bincount(np.rint(rows[:, d]).astype(np.int64),
                                 minlength=col.class_count)
            entry["frequencies"] = counts.tolist()
        columns.append(entry)
    pairs = []
    for a in range(len(dims)):
        for b in range(a + 1, len(dims)):
            i, j = dims[a], dims[b]
            pairs.append({
                "x_dim": i, "y_dim": j,
                "x": np.clip(unit_scale(schema[i], rows[:, i]), 0, 1).tolist(),
                "y": np.clip(unit_scale(schema[j], rows[:, j]), 0, 1).tolist(),
            })
    return {"n_samples": int(n), "columns": columns, "pairs": pairs}


def average_rank(table: dict) -> dict:
    """Mean rank of each method across datasets; lower scores rank better.

    ``table`` maps method name to its per-dataset scores (equal lengths).
    Exact ties share the lowest rank.  Returns method -> (mean rank,
    standard error), the latter None for a single dataset.
    """
    methods = list(table)
    mat = np.array([table[m] for m in methods], dtype=np.float64)
    if mat.ndim != 2:
        raise ValueError("every method needs one score per dataset")
    ranks = np.empty_like(mat)
    for j in range(mat.shape[1]):
        col = mat[:, j]
        ranks[:, j] = 1 + np.sum(col[None, :] < col[:, None], axis=1)
    out = {}
    for i, m in enumerate(methods):
        out[m] = (float(ranks[i].mean()), _stderr(list(ranks[i])))
    return out


def format_report_table(reports) -> str:
    """Aligned plain-text table, one row per report."""
    headers = ("dataset", "model", "gen NLL", "cond NLL", "imp RMSE",
               "seconds", "config")
    rows = [headers]
    for r in reports:
        rows.append((
            r.dataset_id, r.model_kind,
            _cell(r.generation_nll, r.generation_nll_se),
            _cell(r.conditional_nll, r.conditional_nll_se),
            _cell(r.imputation_rmse, r.imputation_rmse_se),
            f"{r.wall_clock_seconds:.1f}", r.config_hash))
    widths = [max(len(row[c]) for row in rows) for c in range(len(headers))]
    lines = ["  ".join(cell.ljust(w) for cell, w in zip(row, widths)).rstrip()
             for row in rows]
    lines.insert(1, "  ".join("-" * w for w in widths))
    return "\n".join(lines)


def _cell(mean: float, se) -> str:
    if se is None:
        return f"{mean:.3f}"
    return f"{mean:.3f}±{se:.3f}"
