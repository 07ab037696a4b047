"""Max-product SINR power allocation: the labeling oracle for training data.

The downlink SINR of user k in cell j under allocation rho is

    sinr[j,k] = rho[j,k] * a[j,k] / (sum_{l,i} rho[l,i] * b[l,i,j,k] + sigma2)

and the oracle maximizes prod_{j,k} sinr[j,k] subject to per-cell budgets
sum_k rho[j,k] <= p_max, rho >= 0. Equivalently it ascends
F(rho) = sum log sinr by projected gradient with a backtracking step and
Euclidean projection onto each cell's capped simplex. F is concave in
log-powers and diverges to -inf at rho -> 0, so monotone ascent from an
interior start cannot stall at a spurious boundary point; interior
stationarity implies global optimality.
"""

from __future__ import annotations

import json
import csv
import struct
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, asdict, field
from pathlib import Path

import numpy as np

from .scenario import (NetworkConfig, CellLayout, build_geometry, drop_users,
                       sample_rng, config_hash, STREAM_TRAIN)
from .channel import GainTable, large_scale_fading, mr_gain_arrays, monte_carlo_gains

DATASET_FILE_MAGIC = b"MMDS"
DATASET_FILE_SCHEMA_VERSION = 1


class DatasetFileError(RuntimeError):
    """Raised for corrupt or incompatible dataset files."""


@dataclass
class PowerAllocation:
    """Per-cell transmit powers plus solver convergence report."""

    rho: np.ndarray              # (L, K) mW
    converged: bool = True
    iterations: int = 0
    grad_norm: float = 0.0       # projected-gradient norm at the returned point


@dataclass
class SolverParams:
    max_iters: int = 5000
    tol: float = 1e-6
    step_init: float | None = None   # default (p_max / 2K)^2, matched to 1/rho gradients
    step_grow: float = 1.3
    step_shrink: float = 0.5


def sinr(gains: GainTable, rho, sigma2_mw: float) -> np.ndarray:
    """Evaluate the downlink SINR matrix (L, K) for one allocation."""
    rho = rho.rho if isinstance(rho, PowerAllocation) else np.asarray(rho, dtype=float)
    if np.any(rho < 0):
        raise ValueError("powers must be non-negative")
    if sigma2_mw <= 0:
        raise ValueError("noise power must be positive")
    return sinr_arrays(gains.a, gains.b, rho, sigma2_mw)


def sinr_arrays(a, b, rho, sigma2_mw):
    """Vectorized SINR for stacked instances: rho (..., L, K)."""
    denom = np.einsum("...li,...lijk->...jk", rho, b) + sigma2_mw
    return rho * a / denom


def project_cell_cap(v: np.ndarray, p_max: float) -> np.ndarray:
    """Euclidean projection of (..., K) rows onto {x >= 0, sum x <= p_max}."""
    y = np.maximum(v, 0.0)
    over = y.sum(axis=-1) > p_max
    if not np.any(over):
        return y
    k = v.shape[-1]
    u = np.sort(v, axis=-1)[..., ::-1]
    cssv = np.cumsum(u, axis=-1) - p_max
    idx = np.arange(1, k + 1)
    cond = u - cssv / idx > 0
    last = k - 1 - np.argmax(cond[..., ::-1], axis=-1)
    theta = np.take_along_axis(cssv, last[..., None], axis=-1)[..., 0] / (last + 1)
    proj = np.maximum(v - theta[..., None], 0.0)
    # Guard the budget against roundoff from the theta subtraction.
    s = proj.sum(axis=-1)
    scale = np.where(s > p_max, p_max / np.where(s > 0, s, 1.0), 1.0)
    proj = proj * scale[..., None]
    return np.where(over[..., None], proj, y)


def _log_objective(rho, a, b, sigma2):
    denom = np.einsum("sli,slijk->sjk", rho, b) + sigma2
    with np.errstate(divide="ignore", invalid="ignore"):
        num = np.where(rho > 0, np.log(rho * a), -np.inf)
        return num.sum(axis=(1, 2)) - np.log(denom).sum(axis=(1, 2))


def _gradient(rho, b, sigma2):
    denom = np.einsum("sli,slijk->sjk", rho, b) + sigma2
    return 1.0 / rho - np.einsum("sjk,slijk->sli", 1.0 / denom, b)


def solve_max_product_batch(a, b, p_max: float, sigma2: float,
                            params: SolverParams | None = None):
    """Projected gradient ascent on a stack of instances.

    a: (S, L, K), b: (S, L, K, L, K). Returns (rho, converged, iterations,
    grad_norm) with leading dimension S. The objective is non-decreasing
    across accepted iterates by construction.
    """
    params = params or SolverParams()
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    S, L, K = a.shape
    rho = np.full((S, L, K), p_max / (2.0 * K))
    t = np.full(S, params.step_init if params.step_init is not None
                else (p_max / (2.0 * K)) ** 2)
    F = _log_objective(rho, a, b, sigma2)
    converged = np.zeros(S, dtype=bool)
    iterations = np.zeros(S, dtype=int)
    grad_norm = np.full(S, np.inf)

    active = np.arange(S)
    for it in range(params.max_iters):
        if active.size == 0:
            break
        ra, aa, ba = rho[active], a[active], b[active]
        g = _gradient(ra, ba, sigma2)
        pg = project_cell_cap(ra + g, p_max) - ra
        norms = np.sqrt((pg**2).sum(axis=(1, 2)))
        grad_norm[active] = norms
        iterations[active] = it
        done = norms < params.tol
        converged[active[done]] = True
        keep = ~done
        active = active[keep]
        if active.size == 0:
            break
        ra, aa, ba, g = ra[keep], aa[keep], ba[keep], g[keep]
        ta = t[active]
        trial = project_cell_cap(ra + ta[:, None, None] * g, p_max)
        Ft = _log_objective(trial, aa, ba, sigma2)
        better = Ft > F[active]
        acc = active[better]
        rho[acc] = trial[better]
        F[acc] = Ft[better]
        t[acc] *= params.step_grow
        t[active[~better]] *= params.step_shrink
    return rho, converged, iterations, grad_norm


def solve_max_product(gains: GainTable, config: NetworkConfig,
                      solver_params: SolverParams | None = None) -> PowerAllocation:
    """Solve one instance; non-convergence returns the best iterate flagged."""
    rho, conv, iters, gnorm = solve_max_product_batch(
        gains.a[None], gains.b[None], config.p_max_dl_mw, config.noise_mw, solver_params)
    return PowerAllocation(rho=rho[0], converged=bool(conv[0]),
                           iterations=int(iters[0]), grad_norm=float(gnorm[0]))


@dataclass
class Sample:
    """One realization: flat positions (2KL,) and per-cell labels (L, K+1)."""

    x: np.ndarray
    labels: np.ndarray


@dataclass
class Dataset:
    """Generated position/power pairs, cell-major labels with appended sums."""

    inputs: np.ndarray          # (N, 2KL)
    labels: np.ndarray          # (N, L, K+1)
    config: NetworkConfig
    precoder: str
    mc_draws: int | None = None
    solver_resamples: int = 0
    gain_resamples: int = 0

    def __len__(self):
        return self.inputs.shape[0]

    def sample(self, i: int) -> Sample:
        return Sample(x=self.inputs[i], labels=self.labels[i])


def _sample_gains(args):
    """Gain tables of one sample index (worker function; must stay picklable)."""
    config, index, precoder, mc_draws, master_seed = args
    layout = build_geometry(config)
    rng = sample_rng(master_seed, index, STREAM_TRAIN)
    drop = drop_users(config, layout, rng)
    beta = large_scale_fading(config, layout, drop, rng)
    if precoder == "mr":
        a, b = mr_gain_arrays(beta, config)
        resamples = 0
    else:
        table = monte_carlo_gains(beta, config, "mmmse", mc_draws, rng)
        a, b, resamples = table.a, table.b, table.resample_count
    return drop.coords, a, b, resamples


def make_dataset(config: NetworkConfig, num_samples: int, precoder: str,
                 rng_seed: int | None = None, mc_draws: int = 1000,
                 solver_params: SolverParams | None = None,
                 chunk_size: int = 256, threads: int = 1) -> Dataset:
    """Generate num_samples labeled realizations.

    Every sample derives its own RNG stream from (seed, index), so results do
    not depend on chunking or worker count. Samples whose solve does not
    converge are discarded and replaced from fresh indices (counted).
    """
    if precoder not in ("mr", "mmmse"):
        raise ValueError(f"unknown precoder {precoder!r}")
    seed = config.rng_seed if rng_seed is None else rng_seed
    L, K = config.num_cells, config.users_per_cell
    inputs = np.empty((num_samples, config.input_dim))
    labels = np.empty((num_samples, L, K + 1))
    filled = 0
    next_index = 0
    solver_resamples = 0
    gain_resamples = 0

    pool = ProcessPoolExecutor(max_workers=threads) if threads > 1 else None
    try:
        while filled < num_samples:
            n = min(chunk_size, num_samples - filled)
            idx = range(next_index, next_index + n)
            next_index += n
            jobs = [(config, i, precoder, mc_draws, seed) for i in idx]
            results = list(pool.map(_sample_gains, jobs, chunksize=8)) if pool \
                else [_sample_gains(j) for j in jobs]
            xs = np.stack([r[0] for r in results])
            a = np.stack([r[1] for r in results])
            b = np.stack([r[2] for r in results])
            gain_resamples += sum(r[3] for r in results)
            rho, conv, _, _ = solve_max_product_batch(
                a, b, config.p_max_dl_mw, config.noise_mw, solver_params)
            solver_resamples += int(np.sum(~conv))
            for i in np.flatnonzero(conv):
                if filled >= num_samples:
                    break
                inputs[filled] = xs[i]
                labels[filled, :, :K] = rho[i]
                labels[filled, :, K] = rho[i].sum(axis=1)
                filled += 1
    finally:
        if pool:
            pool.shutdown()
    return Dataset(inputs=inputs, labels=labels, config=config, precoder=precoder,
                   mc_draws=mc_draws if precoder == "mmmse" else None,
                   solver_resamples=solver_resamples, gain_resamples=gain_resamples)


def save_dataset(dataset: Dataset, path) -> None:
    """Binary dataset: magic, JSON header, then float64 LE records."""
    cfg = dataset.config
    header = {
        "schema_version": DATASET_FILE_SCHEMA_VERSION,
        "config_hash": config_hash(cfg),
        "precoder": dataset.precoder,
        "N": len(dataset),
        "K": cfg.users_per_cell,
        "L": cfg.num_cells,
        "config": asdict(cfg),
        "mc_draws": dataset.mc_draws,
        "solver_resamples": dataset.solver_resamples,
        "gain_resamples": dataset.gain_resamples,
    }
    blob = json.dumps(header, sort_keys=True).encode()
    records = np.hstack([dataset.inputs, dataset.labels.reshape(len(dataset), -1)])
    with open(path, "wb") as fh:
        fh.write(DATASET_FILE_MAGIC)
        fh.write(struct.pack("<I", len(blob)))
        fh.write(blob)
        fh.write(records.astype("<f8").tobytes())


def load_dataset(path) -> Dataset:
    with open(path, "rb") as fh:
        if fh.read(4) != DATASET_FILE_MAGIC:
            raise DatasetFileError(f"{path}: not a dataset file")
        (hlen,) = struct.unpack("<I", fh.read(4))
        header = json.loads(fh.read(hlen).decode())
        if header.get("schema_version") != DATASET_FILE_SCHEMA_VERSION:
            raise DatasetFileError(
                f"{path}: unsupported schema_version {header.get('schema_version')}")
        config = NetworkConfig(**header["config"])
        if config_hash(config) != header["config_hash"]:
            raise DatasetFileError(f"{path}: config hash does not match embedded config")
        n, L, K = header["N"], header["L"], header["K"]
        width = 2 * K * L + L * (K + 1)
        data = np.frombuffer(fh.read(), dtype="<f8")
        if data.size != n * width:
            raise DatasetFileError(f"{path}: truncated or oversized payload")
    records = data.reshape(n, width)
    return Dataset(inputs=records[:, :2 * K * L].copy(),
                   labels=records[:, 2 * K * L:].reshape(n, L, K + 1).copy(),
                   config=config, precoder=header["precoder"],
                   mc_draws=header.get("mc_draws"),
                   solver_resamples=header.get("solver_resamples", 0),
                   gain_resamples=header.get("gain_resamples", 0))


def dataset_to_csv(dataset: Dataset, path) -> None:
    L, K = dataset.config.num_cells, dataset.config.users_per_cell
    cols = [f"x{i}" for i in range(dataset.inputs.shape[1])]
    cols += [f"rho_{j}_{k}" for j in range(L) for k in range(K + 1)]
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(cols)
        flat_labels = dataset.labels.reshape(len(dataset), -1)
        for i in range(len(dataset)):
            writer.writerow([repr(v) for v in dataset.inputs[i]] +
                            [repr(v) for v in flat_labels[i]])
