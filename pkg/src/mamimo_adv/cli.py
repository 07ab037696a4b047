"""Command-line entry point: generate, train, attack, eval, report.

Exit codes: 0 success, 2 usage error, 3 validation error (incompatible or
inconsistent inputs), 4 runtime failure.
"""

from __future__ import annotations

import argparse
import logging
import os
import sys
import time
from dataclasses import fields as dataclass_fields
from pathlib import Path

import numpy as np

from .scenario import NetworkConfig, ConfigError, load_config, config_hash
from . import oracle
from .nn import TrainHyper, build_model, save_model, train
from .attacks import AttackConfig, AttackReport, run_attack
from .eval import (ExperimentSpec, ModelSet, load_model_set, run_whitebox,
                   run_blackbox, report as write_report, EvalError)
from .manifest import write_manifest
from .plots import render_run_dir

logger = logging.getLogger(__name__)


class ValidationError(RuntimeError):
    """Inputs that parse but do not fit together."""


_FIELD_TYPES = {"int": int, "float": float, "str": str}


def _add_config_flags(parser):
    group = parser.add_argument_group("scenario overrides")
    group.add_argument("--config", type=Path, help="YAML scenario config file")
    for f in dataclass_fields(NetworkConfig):
        flag = "--" + f.name.replace("_", "-")
        group.add_argument(flag, dest=f"cfg_{f.name}",
                           type=_FIELD_TYPES.get(str(f.type), str),
                           default=None, help=f"override {f.name}")


def _build_config(args) -> NetworkConfig:
    base = load_config(args.config) if args.config else NetworkConfig()
    overrides = {}
    for f in dataclass_fields(NetworkConfig):
        val = getattr(args, f"cfg_{f.name}", None)
        if val is not None:
            overrides[f.name] = val
    if not overrides:
        return base
    merged = {f.name: getattr(base, f.name) for f in dataclass_fields(NetworkConfig)}
    merged.update(overrides)
    return NetworkConfig(**merged)


def _cmd_generate(args) -> int:
    t0 = time.perf_counter()
    config = _build_config(args)
    seed = config.rng_seed if args.seed is None else args.seed
    threads = 1 if args.deterministic else (args.threads or os.cpu_count() or 1)
    dataset = oracle.make_dataset(config, args.num_samples, args.precoder,
                                  rng_seed=seed, mc_draws=args.mc_draws,
                                  chunk_size=args.chunk_size, threads=threads)
    if dataset.solver_resamples or dataset.gain_resamples:
        logger.warning("resampled %d non-converged solves, %d degenerate MC draws",
                       dataset.solver_resamples, dataset.gain_resamples)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    oracle.save_dataset(dataset, out)
    outputs = [out]
    if args.csv:
        oracle.dataset_to_csv(dataset, args.csv)
        outputs.append(Path(args.csv))
    write_manifest(out.with_suffix(out.suffix + ".manifest.json"),
                   command=" ".join(sys.argv[1:]), config_hash=config_hash(config),
                   seeds={"master": seed}, inputs={}, outputs=outputs,
                   wall_time_s=time.perf_counter() - t0,
                   extra={"solver_resamples": dataset.solver_resamples,
                          "gain_resamples": dataset.gain_resamples})
    print(f"wrote {out} ({len(dataset)} records, precoder={args.precoder})")
    return 0


def _cmd_train(args) -> int:
    t0 = time.perf_counter()
    dataset = oracle.load_dataset(args.dataset)
    config = dataset.config
    if args.config is not None:
        flag_config = _build_config(args)
        if config_hash(flag_config) != config_hash(config):
            raise ValidationError(
                f"--config does not match the dataset's embedded config "
                f"({config_hash(flag_config)} vs {config_hash(config)})")
    cells = range(config.num_cells) if args.cell == "all" else [int(args.cell)]
    if any(c < 0 or c >= config.num_cells for c in cells):
        raise ValidationError(f"cell out of range 0..{config.num_cells - 1}")
    hyper = TrainHyper(learning_rate=args.lr, batch_size=args.batch_size,
                       max_epochs=args.epochs, patience=args.patience)
    out_dir = Path(args.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    outputs = []
    for cell in cells:
        model = build_model(args.model_id, config, seed=args.train_seed, cell=cell,
                            precoder=dataset.precoder)
        model.config_hash = config_hash(config)
        model, rep = train(model, dataset, cell, hyper, seed=args.train_seed)
        path = out_dir / f"model_cell{cell}.bin"
        save_model(model, path)
        outputs.append(path)
        print(f"cell {cell}: {rep.epochs} epochs, val MSE {rep.best_val_mse:.3e} "
              f"({rep.wall_time_s:.1f} s)")
    write_manifest(out_dir / "manifest.json", command=" ".join(sys.argv[1:]),
                   config_hash=config_hash(config),
                   seeds={"train": args.train_seed},
                   inputs={"dataset": args.dataset}, outputs=outputs,
                   wall_time_s=time.perf_counter() - t0)
    return 0


def _load_models_checked(path, expected_hash=None) -> ModelSet:
    models = load_model_set(path)
    if expected_hash is not None and models.config_hash != expected_hash:
        raise ValidationError(
            f"models under {path} were trained for config {models.config_hash}, "
            f"not {expected_hash}")
    return models


def _cmd_attack(args) -> int:
    t0 = time.perf_counter()
    dataset = oracle.load_dataset(args.dataset)
    models = _load_models_checked(args.models, config_hash(dataset.config))
    xs = dataset.inputs[: args.limit] if args.limit else dataset.inputs
    cells = range(dataset.config.num_cells) if args.cell == "all" else [int(args.cell)]
    report = AttackReport()
    for cell in cells:
        cfg = AttackConfig(method=args.method, epsilon=args.eps, alpha=args.alpha,
                           q_iters=args.q_iters, mu=args.mu, i_iters=args.i_iters,
                           rng_seed=args.seed)
        report.add(run_attack(models[cell], xs, cell, cfg,
                              rng=np.random.default_rng(args.seed + cell)))
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    report.to_csv(out)
    outputs = [out]
    if args.summary:
        report.to_summary_json(args.summary, extra={"config_hash": models.config_hash,
                                                    "method": args.method,
                                                    "epsilon": args.eps})
        outputs.append(Path(args.summary))
    write_manifest(out.with_suffix(out.suffix + ".manifest.json"),
                   command=" ".join(sys.argv[1:]), config_hash=models.config_hash,
                   seeds={"attack": args.seed},
                   inputs={"dataset": args.dataset}, outputs=outputs,
                   wall_time_s=time.perf_counter() - t0)
    rates = report.aggregate_rates()
    print(f"success rate (all cells): {rates[args.method][repr(args.eps)]['all']:.3f}")
    return 0


def _cmd_eval(args) -> int:
    t0 = time.perf_counter()
    if args.config is None and args.dataset is None:
        raise ValidationError("eval needs --config or --dataset to define the scenario")
    config = oracle.load_dataset(args.dataset).config if args.dataset else _build_config(args)
    victim = _load_models_checked(args.models, config_hash(config))
    surrogate = None
    if args.surrogate:
        surrogate = _load_models_checked(args.surrogate, config_hash(config))
    spec = ExperimentSpec(config=config, victim=victim, surrogate=surrogate,
                          methods=tuple(args.methods), eps_grid=tuple(args.eps or ()),
                          n_test=args.n_test, seed=args.seed, alpha=args.alpha,
                          q_iters=args.q_iters, mu=args.mu, i_iters=args.i_iters)
    if surrogate is not None:
        table, attack_report, _ = run_blackbox(spec)
    else:
        table, attack_report, _ = run_whitebox(spec)
    run_dir = Path(args.run_dir)
    written = write_report({table.mode: table}, run_dir, config=config,
                           render=not args.no_figures)
    if args.per_sample:
        per_sample = run_dir / f"attack_report_{table.mode}.csv"
        attack_report.to_csv(per_sample)
        written.append(per_sample)
    write_manifest(run_dir / "manifest.json", command=" ".join(sys.argv[1:]),
                   config_hash=config_hash(config),
                   seeds={"eval": args.seed},
                   inputs={k: v for k, v in {"models": None, "dataset": args.dataset}.items()
                           if v},
                   outputs=written, wall_time_s=time.perf_counter() - t0)
    for method in table.methods:
        line = ", ".join(f"eps={e:g}: {table.rate(method, e):.3f}" for e in table.eps_grid)
        print(f"{table.mode} {method:7s} {line}")
    return 0


def _cmd_report(args) -> int:
    t0 = time.perf_counter()
    pngs = render_run_dir(args.run_dir)
    if not pngs:
        raise ValidationError(f"no rates_*.csv files under {args.run_dir}")
    write_manifest(Path(args.run_dir) / "manifest_report.json",
                   command=" ".join(sys.argv[1:]), config_hash="",
                   seeds={}, inputs={}, outputs=pngs,
                   wall_time_s=time.perf_counter() - t0)
    for p in pngs:
        print(p)
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="mamimo-adv",
        description="Adversarial attacks on learned max-product power allocation")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    g = sub.add_parser("generate", help="generate a labeled dataset")
    _add_config_flags(g)
    g.add_argument("--num-samples", type=int, required=True)
    g.add_argument("--precoder", choices=["mr", "mmmse"], required=True)
    g.add_argument("--out", required=True)
    g.add_argument("--csv", help="also export the dataset as CSV")
    g.add_argument("--seed", type=int, default=None, help="master seed (default: config rng_seed)")
    g.add_argument("--mc-draws", type=int, default=1000,
                   help="Monte-Carlo channel draws per sample (mmmse only)")
    g.add_argument("--chunk-size", type=int, default=256)
    g.add_argument("--threads", type=int, default=None)
    g.add_argument("--deterministic", action="store_true",
                   help="single-threaded, ordered reductions")
    g.set_defaults(func=_cmd_generate)

    t = sub.add_parser("train", help="train per-cell models on a dataset")
    _add_config_flags(t)
    t.add_argument("--dataset", required=True)
    t.add_argument("--model-id", choices=["model1", "model2"], required=True)
    t.add_argument("--cell", default="all", help="cell index or 'all'")
    t.add_argument("--out-dir", required=True)
    t.add_argument("--train-seed", type=int, default=0)
    t.add_argument("--epochs", type=int, default=200)
    t.add_argument("--lr", type=float, default=1e-3)
    t.add_argument("--batch-size", type=int, default=128)
    t.add_argument("--patience", type=int, default=12)
    t.set_defaults(func=_cmd_train)

    a = sub.add_parser("attack", help="attack dataset samples with one method")
    a.add_argument("--models", required=True)
    a.add_argument("--dataset", required=True)
    a.add_argument("--method", choices=["fgsm", "pgd", "mifgsm", "random"], required=True)
    a.add_argument("--eps", type=float, required=True)
    a.add_argument("--alpha", type=float, default=0.01)
    a.add_argument("--Q", dest="q_iters", type=int, default=40)
    a.add_argument("--mu", type=float, default=0.1)
    a.add_argument("--I", dest="i_iters", type=int, default=10)
    a.add_argument("--cell", default="all")
    a.add_argument("--limit", type=int, default=None, help="use only the first N samples")
    a.add_argument("--seed", type=int, default=1)
    a.add_argument("--out", required=True, help="per-sample attack report CSV")
    a.add_argument("--summary", help="aggregate rates JSON")
    a.set_defaults(func=_cmd_attack)

    e = sub.add_parser("eval", help="white-box or black-box success-rate experiment")
    _add_config_flags(e)
    e.add_argument("--models", required=True, help="victim model directory")
    e.add_argument("--surrogate", help="surrogate model directory (black-box)")
    e.add_argument("--blackbox", action="store_true",
                   help="require a surrogate (kept for explicitness)")
    e.add_argument("--dataset", help="borrow the scenario config from a dataset file")
    e.add_argument("--methods", nargs="+", default=["random", "fgsm", "mifgsm", "pgd"])
    e.add_argument("--eps", type=float, nargs="+", default=None)
    e.add_argument("--n-test", type=int, default=500)
    e.add_argument("--seed", type=int, default=1)
    e.add_argument("--alpha", type=float, default=0.01)
    e.add_argument("--Q", dest="q_iters", type=int, default=40)
    e.add_argument("--mu", type=float, default=0.1)
    e.add_argument("--I", dest="i_iters", type=int, default=10)
    e.add_argument("--run-dir", required=True)
    e.add_argument("--per-sample", action="store_true",
                   help="also write the per-sample attack report CSV")
    e.add_argument("--no-figures", action="store_true")
    e.set_defaults(func=_cmd_eval)

    r = sub.add_parser("report", help="re-render figures from a run directory")
    r.add_argument("--run-dir", required=True)
    r.set_defaults(func=_cmd_report)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    if getattr(args, "blackbox", False) and not getattr(args, "surrogate", None):
        print("error: --blackbox requires --surrogate", file=sys.stderr)
        return 2
    try:
        return args.func(args)
    except (ConfigError, ValidationError, EvalError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 3
    except Exception as exc:  # noqa: BLE001 - CLI boundary
        print(f"error: {exc}", file=sys.stderr)
        return 4


if __name__ == "__main__":
    sys.exit(main())
