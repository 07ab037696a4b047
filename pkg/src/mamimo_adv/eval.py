"""White-box and black-box experiment orchestration and success-rate tables.

An experiment attacks N_test clean-feasible position samples per cell,
method, and perturbation magnitude, and reports the fraction of samples
whose predicted power sum exceeds the budget. Black-box runs craft the
perturbation on a surrogate model set and judge feasibility on the victim,
which the attack path only ever sees as forward-only.
"""

from __future__ import annotations

import json
import csv
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .scenario import (NetworkConfig, build_geometry, drop_users, sample_rng,
                       config_hash, STREAM_TEST, STREAM_ATTACK)
from .nn import MlpModel, load_model, save_model, estimate_lipschitz
from .attacks import AttackConfig, AttackOutcome, AttackReport, run_attack

logger = logging.getLogger(__name__)

DEFAULT_METHODS = ("random", "fgsm", "mifgsm", "pgd")

# Perturbation grids of the reference experiments, per (model_id, precoder).
DEFAULT_EPS_GRIDS = {
    ("model1", "mr"): (0.3, 0.4),
    ("model2", "mr"): (0.1, 0.2),
    ("model1", "mmmse"): (0.2, 0.3),
    ("model2", "mmmse"): (0.2,),
}
DEFAULT_BLACKBOX_EPS_GRID = (0.2, 0.3, 0.4)


class EvalError(RuntimeError):
    pass


@dataclass
class ModelSet:
    """One trained model per cell, sharing architecture and provenance."""

    models: list

    def __post_init__(self):
        if not self.models:
            raise EvalError("empty model set")
        ids = {m.model_id for m in self.models}
        hashes = {m.config_hash for m in self.models}
        precoders = {m.precoder for m in self.models}
        if len(ids) > 1 or len(hashes) > 1 or len(precoders) > 1:
            raise EvalError(f"inconsistent model set: ids={ids}, precoders={precoders}")

    def __len__(self):
        return len(self.models)

    def __getitem__(self, cell: int) -> MlpModel:
        return self.models[cell]

    @property
    def model_id(self):
        return self.models[0].model_id

    @property
    def precoder(self):
        return self.models[0].precoder

    @property
    def config_hash(self):
        return self.models[0].config_hash

    @property
    def p_max(self):
        return self.models[0].output_scale


def save_model_set(model_set: ModelSet, directory) -> list:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    paths = []
    for cell, model in enumerate(model_set.models):
        path = directory / f"model_cell{cell}.bin"
        save_model(model, path)
        paths.append(path)
    return paths


def load_model_set(directory) -> ModelSet:
    directory = Path(directory)
    paths = sorted(directory.glob("model_cell*.bin"))
    if not paths:
        raise EvalError(f"no model_cell*.bin files under {directory}")
    return ModelSet(models=[load_model(p) for p in paths])


class ForwardOnlyModel:
    """Victim-side view of a model: predictions only, no gradients."""

    def __init__(self, model: MlpModel):
        self._model = model
        self.output_scale = model.output_scale
        self.output_dim = model.output_dim
        self.model_id = model.model_id

    def forward(self, x):
        return self._model.forward(x)

    def predict_powers(self, x):
        return self._model.predict_powers(x)

    def input_gradient(self, x, out_weights=None):
        raise EvalError("victim model is forward-only; gradients are not available")


@dataclass
class ExperimentSpec:
    """Everything one white-box or black-box run needs."""

    config: NetworkConfig
    victim: ModelSet
    surrogate: ModelSet | None = None     # None means white-box
    methods: tuple = DEFAULT_METHODS
    eps_grid: tuple = ()
    n_test: int = 500
    seed: int = 1
    alpha: float = 0.01
    q_iters: int = 40
    mu: float = 0.1
    i_iters: int = 10
    max_filter_rounds: int = 50
    extra_filter_sets: tuple = ()         # additional model sets the clean filter must satisfy

    def __post_init__(self):
        if self.n_test < 1:
            raise EvalError("n_test must be >= 1")
        if not self.eps_grid:
            key = (self.victim.model_id, self.victim.precoder)
            grid = DEFAULT_BLACKBOX_EPS_GRID if self.surrogate is not None \
                else DEFAULT_EPS_GRIDS.get(key)
            if grid is None:
                raise EvalError(f"no default epsilon grid for {key}; pass eps_grid")
            self.eps_grid = tuple(grid)
        eps = list(self.eps_grid)
        if any(e2 <= e1 for e1, e2 in zip(eps, eps[1:])):
            raise EvalError("eps_grid must be strictly increasing")
        if self.surrogate is not None:
            if self.surrogate.config_hash != self.victim.config_hash or \
               self.surrogate.precoder != self.victim.precoder:
                raise EvalError("surrogate and victim must come from the same "
                                "scenario and precoder")

    @property
    def scenario_hash(self):
        return config_hash(self.config)


@dataclass
class SuccessRateTable:
    """Per-(cell, method, eps) infeasibility fractions plus 'all' aggregates."""

    mode: str                   # "whitebox" | "blackbox"
    methods: tuple
    eps_grid: tuple
    num_cells: int
    n_test: int
    successes: np.ndarray       # (methods, eps, cells) counts
    victim_id: str = ""
    surrogate_id: str = ""
    precoder: str = ""
    config_hash: str = ""
    seed: int = 0

    def rate(self, method: str, eps: float, cell="all") -> float:
        mi = self.methods.index(method)
        ei = self.eps_grid.index(eps)
        if cell == "all":
            return float(self.successes[mi, ei].sum() / (self.n_test * self.num_cells))
        return float(self.successes[mi, ei, int(cell)] / self.n_test)

    def rows(self):
        cells = [str(c) for c in range(self.num_cells)] + ["all"]
        for method in self.methods:
            for eps in self.eps_grid:
                for cell in cells:
                    n = self.n_test if cell != "all" else self.n_test * self.num_cells
                    yield {"cell": cell, "method": method, "epsilon": eps,
                           "n": n, "rate": self.rate(method, eps, cell)}

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["cell", "method", "epsilon", "n", "success_rate"])
            for row in self.rows():
                writer.writerow([row["cell"], row["method"], repr(row["epsilon"]),
                                 row["n"], repr(row["rate"])])

    def aggregate(self) -> dict:
        return {m: {repr(e): self.rate(m, e) for e in self.eps_grid}
                for m in self.methods}


def generate_test_candidates(config: NetworkConfig, seed: int, count: int,
                             start_index: int = 0) -> np.ndarray:
    """Fresh position drops from the test stream, independent of training."""
    layout = build_geometry(config)
    out = np.empty((count, config.input_dim))
    for i in range(count):
        rng = sample_rng(seed, start_index + i, STREAM_TEST)
        out[i] = drop_users(config, layout, rng).coords
    return out


def filter_clean_feasible(model_sets, xs: np.ndarray, p_max: float | None = None) -> np.ndarray:
    """Mask of samples whose clean predictions are feasible in every cell of every set."""
    mask = np.ones(xs.shape[0], dtype=bool)
    for model_set in model_sets:
        budget = model_set.p_max if p_max is None else p_max
        for cell in range(len(model_set)):
            model = model_set[cell]
            k = max(model.output_dim - 1, 1)
            sums = model.predict_powers(xs)[:, :k].sum(axis=1)
            mask &= sums <= budget
    return mask


def collect_test_samples(config: NetworkConfig, model_sets, n_test: int, seed: int,
                         max_rounds: int = 50) -> np.ndarray:
    """Oversample candidate drops until n_test clean-feasible survivors exist."""
    kept = []
    total = 0
    index = 0
    for _ in range(max_rounds):
        need = n_test - total
        batch = max(2 * need, 64)
        xs = generate_test_candidates(config, seed, batch, start_index=index)
        index += batch
        mask = filter_clean_feasible(model_sets, xs)
        survivors = xs[mask]
        kept.append(survivors)
        total += survivors.shape[0]
        if total >= n_test:
            return np.vstack(kept)[:n_test]
    raise EvalError(
        f"could not collect {n_test} clean-feasible samples in {max_rounds} rounds "
        f"({total} found); the models may be infeasible on most clean inputs")


def _attack_rng(seed: int, eps_index: int, cell: int) -> np.random.Generator:
    return np.random.default_rng(
        np.random.SeedSequence(seed, spawn_key=(STREAM_ATTACK, eps_index, cell)))


def _evaluate_on(victim, outcome: AttackOutcome, p_max: float) -> AttackOutcome:
    """Re-judge an outcome's feasibility with the victim's predictions."""
    k = max(victim.output_dim - 1, 1)
    clean = victim.predict_powers(outcome.x_t)[:, :k]
    adv = victim.predict_powers(outcome.x_adv)[:, :k]
    return AttackOutcome(method=outcome.method, cell=outcome.cell,
                         epsilon=outcome.epsilon, x_t=outcome.x_t, x_adv=outcome.x_adv,
                         clean_powers=clean, adv_powers=adv,
                         feasible=adv.sum(axis=1) <= p_max, p_max=p_max)


def _run(spec: ExperimentSpec, grad_models: ModelSet, mode: str,
         samples: np.ndarray | None = None):
    victim = spec.victim
    filter_sets = [victim, *spec.extra_filter_sets]
    if spec.surrogate is not None:
        filter_sets.append(spec.surrogate)
    if samples is None:
        samples = collect_test_samples(spec.config, filter_sets, spec.n_test, spec.seed,
                                       spec.max_filter_rounds)
    L = len(victim)
    lipschitz = estimate_lipschitz(grad_models[0], samples[: min(64, len(samples))])
    logger.info("%s run: victim=%s surrogate=%s eps=%s n_test=%d local Lipschitz ~ %.3g",
                mode, victim.model_id,
                spec.surrogate.model_id if spec.surrogate else "-",
                spec.eps_grid, spec.n_test, lipschitz)

    successes = np.zeros((len(spec.methods), len(spec.eps_grid), L), dtype=int)
    report = AttackReport()
    for mi, method in enumerate(spec.methods):
        for ei, eps in enumerate(spec.eps_grid):
            for cell in range(L):
                cfg = AttackConfig(method=method, epsilon=eps, alpha=spec.alpha,
                                   q_iters=spec.q_iters, mu=spec.mu,
                                   i_iters=spec.i_iters, rng_seed=spec.seed)
                out = run_attack(grad_models[cell], samples, cell, cfg,
                                 rng=_attack_rng(spec.seed, ei, cell),
                                 p_max=victim.p_max)
                out = _evaluate_on(ForwardOnlyModel(victim[cell]), out, victim.p_max)
                successes[mi, ei, cell] = int(np.sum(~out.feasible))
                report.add(out)
    table = SuccessRateTable(mode=mode, methods=tuple(spec.methods),
                             eps_grid=tuple(spec.eps_grid), num_cells=L,
                             n_test=samples.shape[0], successes=successes,
                             victim_id=victim.model_id,
                             surrogate_id=grad_models.model_id if grad_models is not victim else "",
                             precoder=victim.precoder, config_hash=victim.config_hash,
                             seed=spec.seed)
    return table, report, samples


def run_whitebox(spec: ExperimentSpec, samples: np.ndarray | None = None):
    """Attack the victim with its own gradients; returns (table, report, samples)."""
    if spec.surrogate is not None and spec.surrogate is not spec.victim:
        raise EvalError("white-box runs take gradients from the victim itself")
    return _run(spec, spec.victim, "whitebox", samples)


def run_blackbox(spec: ExperimentSpec, samples: np.ndarray | None = None):
    """Craft on the surrogate, judge feasibility on the forward-only victim."""
    if spec.surrogate is None:
        raise EvalError("black-box runs need a surrogate model set")
    if spec.surrogate is spec.victim:
        return _run(spec, spec.victim, "whitebox", samples)
    return _run(spec, spec.surrogate, "blackbox", samples)


def report(tables: dict, run_dir, config: NetworkConfig | None = None,
           extra: dict | None = None, render: bool = True) -> list:
    """Write rates CSVs, a merged summary.json, the plot script, and figures.

    tables maps a mode name ("whitebox"/"blackbox") to its SuccessRateTable.
    Returns the list of written paths.
    """
    from . import plots

    run_dir = Path(run_dir)
    run_dir.mkdir(parents=True, exist_ok=True)
    written = []
    summary = {
        "schema_version": 1,
        "config_hash": config_hash(config) if config else
                       next(iter(tables.values())).config_hash,
        "experiments": {},
    }
    if extra:
        summary.update(extra)
    for mode, table in sorted(tables.items()):
        csv_path = run_dir / f"rates_{mode}.csv"
        table.to_csv(csv_path)
        written.append(csv_path)
        summary["experiments"][mode] = {
            "victim": table.victim_id,
            "surrogate": table.surrogate_id,
            "precoder": table.precoder,
            "n_test": table.n_test,
            "seed": table.seed,
            "eps_grid": list(table.eps_grid),
            "methods": list(table.methods),
            "rates_across_cells": table.aggregate(),
        }
    summary_path = run_dir / "summary.json"
    with open(summary_path, "w") as fh:
        json.dump(summary, fh, indent=2, sort_keys=True)
        fh.write("\n")
    written.append(summary_path)

    script_path = run_dir / "plot_rates.py"
    script_path.write_text(
        '#!/usr/bin/env python3\n'
        '"""Regenerate the success-rate bar charts from the CSV files here."""\n'
        "from pathlib import Path\n\n"
        "from mamimo_adv.plots import render_run_dir\n\n"
        'if __name__ == "__main__":\n'
        "    for png in render_run_dir(Path(__file__).resolve().parent):\n"
        "        print(png)\n")
    written.append(script_path)
    if render:
        written.extend(plots.render_run_dir(run_dir))
    return written
