"""Command-line entry point: training, evaluation, acquisition, serving.

Commands: train, evaluate, saia, serve, export-pairs.  Exit codes: 0 on
success, 1 on runtime failure, 2 on usage errors.  Set VAEM_LOG_LEVEL to
change log verbosity.  Every artifact a command writes carries the hash
of the settings that produced it, and reruns with identical settings
write byte-identical files.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import os
import sys
from dataclasses import asdict, dataclass, fields
from pathlib import Path

import numpy as np

from .autodiff import NumericsError
from .baselines import train_flat_discriminator, train_flat_vae
from .data import DataError, drop_cells, load_csv, load_schema
from .evaluate import imputation_rmse, pairplot_export
from .model import (canonical_json, load_checkpoint, save_checkpoint,
                    train_discriminator, train_two_stage)
from .saia import information_curve, sing_ordering

log = logging.getLogger(__name__)

KINDS = ("vaem", "flat", "flat-extended", "flat-balanced")
FULL_SCALE_EPOCHS = (3000, 5000)
SCHEMA_VERSION = 1


class CliError(Exception):
    """Runtime failure reported on stderr with exit code 1."""


@dataclass(frozen=True)
class RunConfig:
    """Validated bundle of everything one training run needs.

    Flat model kinds train for ``epochs_stage1`` epochs; the stage-two
    budget applies to the two-stage kind only.
    """

    dataset: str = None
    schema: str = None
    model_kind: str = "vaem"
    epochs_stage1: int = 1000
    epochs_stage2: int = 1000
    epochs_discriminator: int = 0
    batch_size: int = 100
    lr: float = 1e-3
    k_prior: int = 50
    noise_variance: float = 0.02
    mc_samples: int = 1
    seeds: tuple = (0,)
    output_dir: str = "runs"

    def validate(self) -> "RunConfig":
        if self.dataset is None:
            raise CliError("no dataset path given (config or --dataset)")
        if self.schema is None:
            raise CliError("no schema path given (config or --schema)")
        for name in ("dataset", "schema"):
            path = getattr(self, name)
            if not Path(path).is_file():
                raise CliError(f"{name} file not found: {path}")
        if self.model_kind not in KINDS:
            raise CliError(f"unknown model kind {self.model_kind!r}")
        for name in ("epochs_stage1", "epochs_stage2", "batch_size",
                     "k_prior", "mc_samples"):
            if int(getattr(self, name)) < 1:
                raise CliError(f"{name} must be at least 1")
        if int(self.epochs_discriminator) < 0:
            raise CliError("epochs_discriminator must not be negative")
        if not self.lr > 0 or not self.noise_variance > 0:
            raise CliError("lr and noise_variance must be positive")
        if not self.seeds:
            raise CliError("seeds must not be empty")
        return self

    def hash(self) -> str:
        doc = asdict(self)
        doc["seeds"] = [int(s) for s in self.seeds]
        return _digest(doc)


def _digest(doc: dict) -> str:
    return hashlib.sha256(canonical_json(doc).encode()).hexdigest()[:12]


def _seed_list(text: str) -> tuple:
    try:
        return tuple(int(part) for part in text.split(","))
    except ValueError:
        raise argparse.ArgumentTypeError(
            f"expected comma-separated integers, got {text!r}") from None


def _config_from_args(args) -> RunConfig:
    names = {f.name for f in fields(RunConfig)}
    doc = {}
    if args.config:
        path = Path(args.config)
        if not path.is_file():
            raise CliError(f"config file not found: {path}")
        try:
            doc = json.loads(path.read_text(encoding="utf-8"))
        except json.JSONDecodeError as exc:
            raise CliError(f"config file {path} is not valid JSON: {exc}")
        unknown = set(doc) - names
        if unknown:
            raise CliError(f"unknown config keys: {sorted(unknown)}")
    for name in names:
        value = getattr(args, name, None)
        if value is not None:
            doc[name] = value
    if args.full_scale:
        doc["epochs_stage1"], doc["epochs_stage2"] = FULL_SCALE_EPOCHS
    if "seeds" in doc:
        doc["seeds"] = tuple(int(s) for s in doc["seeds"]) \
            if not isinstance(doc["seeds"], tuple) else doc["seeds"]
    return RunConfig(**doc).validate()


def _load_table(dataset_path: str, schema_path: str):
    for label, path in (("schema", schema_path), ("dataset", dataset_path)):
        if not Path(path).is_file():
            raise CliError(f"{label} file not found: {path}")
    return load_csv(dataset_path, load_schema(schema_path))


def _load_model(path: str):
    if not Path(path).is_file():
        raise CliError(f"checkpoint file not found: {path}")
    return load_checkpoint(path)


def _check_schema(model, data):
    if model.schema != data.schema:
        raise CliError("checkpoint schema does not match the dataset schema")


def _write_artifact(out_dir: str, name: str, doc: dict) -> Path:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    path = out / name
    path.write_text(canonical_json(doc), encoding="utf-8")
    return path


# ------------------------------------------------------------- commands

def _fit(cfg: RunConfig, data, seed: int):
    if cfg.model_kind == "vaem":
        model = train_two_stage(
            data, master_seed=seed, epochs_stage1=cfg.epochs_stage1,
            epochs_stage2=cfg.epochs_stage2, batch_size=cfg.batch_size,
            lr=cfg.lr, noise_variance=cfg.noise_variance,
            k_prior=cfg.k_prior, mc_samples=cfg.mc_samples)
        if cfg.epochs_discriminator:
            rng = np.random.default_rng(np.random.SeedSequence([seed, 3]))
            train_discriminator(model, data, epochs=cfg.epochs_discriminator,
                                batch_size=cfg.batch_size, lr=cfg.lr, rng=rng)
        return model
    variant = {"flat": "plain", "flat-extended": "extended",
               "flat-balanced": "balanced"}[cfg.model_kind]
    model = train_flat_vae(
        data, variant, master_seed=seed, epochs=cfg.epochs_stage1,
        batch_size=cfg.batch_size, lr=cfg.lr,
        noise_variance=cfg.noise_variance, k_prior=cfg.k_prior,
        mc_samples=cfg.mc_samples)
    if cfg.epochs_discriminator:
        rng = np.random.default_rng(np.random.SeedSequence([seed, 3]))
        train_flat_discriminator(model, data, epochs=cfg.epochs_discriminator,
                                 batch_size=cfg.batch_size, lr=cfg.lr, rng=rng)
    return model


def _histories(model) -> dict:
    if hasattr(model, "dependency"):
        return {"stage1": [list(m.history) for m in model.marginals],
                "stage2": list(model.dependency.history)}
    return {"epochs": list(model.history)}


def cmd_train(args) -> int:
    cfg = _config_from_args(args)
    data = _load_table(cfg.dataset, cfg.schema)
    cfg_hash = cfg.hash()
    out = Path(cfg.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    for seed in cfg.seeds:
        model = _fit(cfg, data, int(seed))
        name = f"checkpoint_{cfg.model_kind}_{seed}.json"
        ck_path = out / name
        save_checkpoint(model, ck_path)
        log_doc = {
            "schema_version": SCHEMA_VERSION,
            "config_hash": cfg_hash,
            "model_kind": cfg.model_kind,
            "seed": int(seed),
            "checkpoint": name,
            "checkpoint_sha256": hashlib.sha256(
                ck_path.read_bytes()).hexdigest(),
            "elbo_per_epoch": _histories(model),
        }
        _write_artifact(cfg.output_dir,
                        f"train_log_{cfg.model_kind}_{seed}.json", log_doc)
        print(ck_path)
    doc = asdict(cfg)
    doc["seeds"] = [int(s) for s in cfg.seeds]
    doc["config_hash"] = cfg_hash
    _write_artifact(cfg.output_dir, "run_config.json", doc)
    return 0


def cmd_evaluate(args) -> int:
    model = _load_model(args.checkpoint)
    data = _load_table(args.dataset, args.schema)
    _check_schema(model, data)
    settings = {"command": "evaluate", "checkpoint": args.checkpoint,
                "dataset": args.dataset, "mode": args.mode,
                "missing_fraction": args.missing_fraction,
                "importance_samples": args.importance_samples,
                "seed": args.seed}
    rng = np.random.default_rng(np.random.SeedSequence([args.seed, 59]))
    report = {"schema_version": SCHEMA_VERSION, "config_hash": _digest(settings),
              "mode": args.mode, "rows": data.n_rows, "seed": args.seed}
    if args.mode == "generate":
        report["per_variable_nll"] = model.is_nll(
            data.cells, data.mask, mode="generation",
            importance_samples=args.importance_samples, rng=rng)
    else:
        if not data.mask.all():
            raise CliError("impute mode needs fully observed rows: hidden "
                           "cells must have ground truth to score against")
        held = drop_cells(data, args.missing_fraction, seed=args.seed)
        report["missing_fraction"] = args.missing_fraction
        report["conditional_nll"] = model.is_nll(
            data.cells, held.mask, mode="conditional",
            importance_samples=args.importance_samples, rng=rng)
        imputed = model.impute(data.cells, held.mask)
        report["imputation_rmse"] = imputation_rmse(
            data.cells, imputed, ~held.mask, data.schema)
    print(canonical_json(report))
    path = _write_artifact(args.output_dir, f"report_{args.mode}.json", report)
    log.info("wrote %s", path)
    return 0


def cmd_saia(args) -> int:
    model = _load_model(args.checkpoint)
    data = _load_table(args.dataset, args.schema)
    _check_schema(model, data)
    settings = {"command": "saia", "checkpoint": args.checkpoint,
                "dataset": args.dataset, "seeds": list(args.seeds),
                "outer_samples": args.outer_samples,
                "inner_samples": args.inner_samples,
                "mc_samples": args.mc_samples}
    curves = []
    for seed in args.seeds:
        order = sing_ordering(model, data.cells,
                              outer_samples=args.outer_samples,
                              inner_samples=args.inner_samples, seed=seed)
        curve = information_curve(model, data.cells, order,
                                  mc_samples=args.mc_samples, seed=seed)
        curves.append(curve.to_json())
    rmse = np.mean([c["rmse"] for c in curves], axis=0)
    steps = curves[0]["steps"]
    doc = {"schema_version": SCHEMA_VERSION, "config_hash": _digest(settings),
           "curves": curves,
           "mean_curve": {"steps": steps, "rmse": rmse.tolist(),
                          "auic": float(np.trapezoid(rmse, steps))}}
    print(canonical_json(doc["mean_curve"]))
    path = _write_artifact(args.output_dir, "saia_curves.json", doc)
    log.info("wrote %s", path)
    return 0


def cmd_serve(args) -> int:
    from .service import build_app
    models = {}
    for path in args.checkpoint:
        model_id = Path(path).stem
        models[model_id] = _load_model(path)
    app = build_app(models, state_dir=args.state_dir)
    try:
        _run_server(app, args.host, args.port)
    except OSError as exc:
        raise CliError(f"cannot bind {args.host}:{args.port}: {exc}")
    return 0


def _run_server(app, host: str, port: int):
    import uvicorn
    uvicorn.run(app, host=host, port=port, log_level="warning")


def cmd_export_pairs(args) -> int:
    if args.checkpoint:
        source = _load_model(args.checkpoint)
        origin = {"checkpoint": args.checkpoint}
    else:
        if not args.schema:
            raise CliError("--dataset needs --schema")
        source = _load_table(args.dataset, args.schema)
        origin = {"dataset": args.dataset}
    settings = {"command": "export-pairs", "n_samples": args.n_samples,
                "dims": list(args.dims) if args.dims else None,
                "seed": args.seed, **origin}
    export = pairplot_export(source, n_samples=args.n_samples,
                             dims=args.dims, seed=args.seed)
    export["schema_version"] = SCHEMA_VERSION
    export["config_hash"] = _digest(settings)
    path = _write_artifact(args.output_dir, "pairs.json", export)
    print(path)
    return 0


# --------------------------------------------------------------- parser

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="vaem",
        description="Two-stage VAE toolkit: train, evaluate, acquire, serve.")
    sub = parser.add_subparsers(dest="command", required=True)

    t = sub.add_parser("train", help="fit a model and write checkpoints")
    t.add_argument("--config", help="JSON config file; flags override it")
    t.add_argument("--dataset", help="CSV data file")
    t.add_argument("--schema", help="JSON schema file")
    t.add_argument("--model-kind", dest="model_kind", choices=KINDS)
    t.add_argument("--epochs-stage1", dest="epochs_stage1", type=int)
    t.add_argument("--epochs-stage2", dest="epochs_stage2", type=int)
    t.add_argument("--epochs-discriminator", dest="epochs_discriminator",
                   type=int)
    t.add_argument("--batch-size", dest="batch_size", type=int)
    t.add_argument("--lr", type=float)
    t.add_argument("--k-prior", dest="k_prior", type=int)
    t.add_argument("--noise-variance", dest="noise_variance", type=float)
    t.add_argument("--mc-samples", dest="mc_samples", type=int)
    t.add_argument("--seeds", type=_seed_list,
                   help="comma-separated training seeds")
    t.add_argument("--output-dir", dest="output_dir")
    t.add_argument("--full-scale", dest="full_scale", action="store_true",
                   help="full-scale budget: stage one 3000 epochs, stage "
                        "two 5000")
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("evaluate", help="score a checkpoint on a dataset")
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--dataset", required=True)
    e.add_argument("--schema", required=True)
    e.add_argument("--mode", required=True, choices=("generate", "impute"))
    e.add_argument("--missing-fraction", dest="missing_fraction", type=float,
                   default=0.5)
    e.add_argument("--importance-samples", dest="importance_samples",
                   type=int, default=1000)
    e.add_argument("--seed", type=int, default=0)
    e.add_argument("--output-dir", dest="output_dir", default="runs")
    e.set_defaults(func=cmd_evaluate)

    s = sub.add_parser("saia", help="global acquisition order and curves")
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--dataset", required=True)
    s.add_argument("--schema", required=True)
    s.add_argument("--seeds", type=_seed_list, default=(0,))
    s.add_argument("--outer-samples", dest="outer_samples", type=int,
                   default=10)
    s.add_argument("--inner-samples", dest="inner_samples", type=int,
                   default=10)
    s.add_argument("--mc-samples", dest="mc_samples", type=int, default=10)
    s.add_argument("--output-dir", dest="output_dir", default="runs")
    s.set_defaults(func=cmd_saia)

    v = sub.add_parser("serve", help="host checkpoints over HTTP")
    v.add_argument("--checkpoint", action="append", required=True,
                   help="repeat to serve several models")
    v.add_argument("--host", default="127.0.0.1")
    v.add_argument("--port", type=int, default=8000)
    v.add_argument("--state-dir", dest="state_dir",
                   help="directory for session snapshots")
    v.set_defaults(func=cmd_serve)

    x = sub.add_parser("export-pairs", help="plot-ready marginals and pairs")
    src = x.add_mutually_exclusive_group(required=True)
    src.add_argument("--checkpoint", help="sample rows from this model")
    src.add_argument("--dataset", help="export ground-truth rows")
    x.add_argument("--schema")
    x.add_argument("--n-samples", dest="n_samples", type=int, default=1000)
    x.add_argument("--dims", type=_seed_list)
    x.add_argument("--seed", type=int, default=0)
    x.add_argument("--output-dir", dest="output_dir", default="runs")
    x.set_defaults(func=cmd_export_pairs)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    level = os.environ.get("VAEM_LOG_LEVEL", "WARNING").upper()
    logging.basicConfig(level=getattr(logging, level, logging.WARNING))
    try:
        return args.func(args)
    except CliError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except (DataError, NumericsError, ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
