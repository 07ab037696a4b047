"""Average channel and interference gains under MR and M-MMSE precoding.

For user k of cell j served by an M-antenna base station, the downlink SINR
is built from two statistics of the precoded channel:

    a[j,k]      = |E{w_jk^H h_jk^j}|^2                  (useful signal gain)
    b[l,i,j,k]  = E{|w_li^H h_jk^l|^2}                  for (l,i) != (j,k)
    b[j,k,j,k]  = E{|w_jk^H h_jk^j|^2} - a[j,k]         (self term)

with h_jk^l the channel from BS l to user (j,k) and w_li the unit-power
precoder of BS l for its user i. Small-scale fading is uncorrelated
Rayleigh, h_jk^l ~ CN(0, beta[l,j,k] I_M). Channels are estimated from
uplink pilots with one orthogonal pilot per in-cell user index, reused
across cells, so same-index users of different cells contaminate each
other. The per-link MMSE estimate has per-antenna variance

    gamma[l,j,k] = p_ul * tau_p * beta[l,j,k]^2 / Psi[l,k],
    Psi[l,k]     = p_ul * tau_p * sum_j' beta[l,j',k] + sigma2_ul.

MR precoding uses the statistical normalization w = hhat / sqrt(E{||hhat||^2})
(unit power on average), which gives the closed forms

    a[j,k]     = M * gamma[j,j,k]
    b[l,i,j,k] = beta[l,j,k] + M * gamma[l,j,k] * [i == k and l != j]
    b[j,k,j,k] = beta[j,j,k]

With perfect channel knowledge (estimation="perfect") gamma = beta and the
contamination term disappears: a = M*beta, b = beta.

M-MMSE precoders have no closed form here; monte_carlo_gains estimates the
expectations by sample means with per-entry standard errors from batch means.
"""

from __future__ import annotations

import csv
import json
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .scenario import CellLayout, NetworkConfig, UePositions, config_hash

GAIN_FILE_MAGIC = b"MMGT"
GAIN_FILE_SCHEMA_VERSION = 1

PRECODERS = ("mr", "mmmse")

# A chunk is both the vectorization unit and one batch of the batch-means
# standard-error estimate; fixed sizing keeps RNG consumption reproducible.
_MIN_DRAWS = 1000


class GainFileError(RuntimeError):
    """Raised for corrupt or incompatible gain-table files."""


@dataclass
class GainTable:
    """Average channel/interference gains of one user drop."""

    a: np.ndarray                 # (L, K)
    b: np.ndarray                 # (L, K, L, K) indexed [l, i, j, k]
    precoder: str                 # "mr" | "mmmse"
    estimator: str                # "closed_form" | "monte_carlo"
    num_draws: int | None = None
    a_se: np.ndarray | None = None
    b_se: np.ndarray | None = None
    clip_count: int = 0           # negative MC self terms clipped to 0
    resample_count: int = 0       # degenerate draws replaced during MC


def pathloss_linear(dist_m, config: NetworkConfig):
    """Log-distance pathloss as a linear gain; rejects distances below d_min."""
    dist_m = np.asarray(dist_m, dtype=float)
    if np.any(dist_m < config.d_min_m):
        raise ValueError(f"distance below d_min = {config.d_min_m} m")
    gain_db = config.pathloss_ref_db - config.pathloss_decay_db * np.log10(dist_m / 1000.0)
    return 10.0 ** (gain_db / 10.0)


def link_distances(layout: CellLayout, positions) -> np.ndarray:
    """Distances (..., L_bs, L_cell, K) between every BS and every user."""
    grid = np.asarray(positions, dtype=float)          # (..., L, K, 2)
    diff = grid[..., None, :, :, :] - layout.bs_xy[:, None, None, :]
    return np.linalg.norm(diff, axis=-1)


def large_scale_fading(config: NetworkConfig, layout: CellLayout, positions,
                       rng: np.random.Generator | None = None) -> np.ndarray:
    """Large-scale gains beta[..., l, j, k] for a drop (or stack of drops).

    positions: UePositions or array (..., L, K, 2). Log-normal shadowing with
    config.shadowing_std_db is added per link when the std is non-zero, drawn
    from rng.
    """
    if isinstance(positions, UePositions):
        positions = positions.as_grid(config)
    beta = pathloss_linear(link_distances(layout, positions), config)
    if config.shadowing_std_db > 0.0:
        if rng is None:
            raise ValueError("shadowing_std_db > 0 requires an rng")
        shadow_db = rng.normal(0.0, config.shadowing_std_db, size=beta.shape)
        beta = beta * 10.0 ** (shadow_db / 10.0)
    return beta


def estimate_gains(beta: np.ndarray, config: NetworkConfig) -> np.ndarray:
    """Per-link effective estimated-channel gain gamma[..., l, j, k]."""
    if config.estimation == "perfect":
        return beta
    p, tau = config.pilot_power_mw, config.users_per_cell
    psi = p * tau * beta.sum(axis=-2, keepdims=True) + config.noise_mw
    return p * tau * beta**2 / psi


def mr_gain_arrays(beta: np.ndarray, config: NetworkConfig):
    """Closed-form MR (a, b) for beta of shape (..., L, L, K); vectorized."""
    L, K, M = config.num_cells, config.users_per_cell, config.antennas
    gamma = estimate_gains(beta, config)
    a = M * np.einsum("...jjk->...jk", gamma)
    # b[..., l, i, j, k]: every precoder (l,i) leaks beta[l,j,k] onto user (j,k).
    b = np.broadcast_to(beta[..., :, None, :, :], beta.shape[:-3] + (L, K, L, K)).copy()
    if config.estimation == "mmse":
        # Coherent pilot-contamination term between same-index users of other cells.
        eye_k = np.eye(K, dtype=bool)
        cross = ~np.eye(L, dtype=bool)
        mask = cross[:, None, :, None] & eye_k[None, :, None, :]       # (L, K, L, K)
        coherent = M * gamma[..., :, None, :, :] * eye_k[None, :, None, :]
        b = np.where(mask, b + coherent, b)
    return a, b


def mr_gains_closed_form(fading: np.ndarray, config: NetworkConfig) -> GainTable:
    """Closed-form MR gain table for one drop's beta (L, L, K)."""
    beta = np.asarray(fading, dtype=float)
    if beta.ndim != 3:
        raise ValueError("expected a single drop's beta of shape (L, L, K)")
    if not np.all(np.isfinite(beta)) or np.any(beta <= 0):
        raise ValueError("beta must be finite and positive")
    a, b = mr_gain_arrays(beta, config)
    return GainTable(a=a, b=b, precoder="mr", estimator="closed_form")


def _complex_normal(rng, shape, var):
    """CN(0, var) samples in complex64; var broadcasts over trailing axes.

    Draws are single precision (the Monte-Carlo noise floor of even 1e5
    draws is ~1e-2 relative, far above float32 resolution); accumulation
    happens in float64 downstream.
    """
    raw = rng.standard_normal(shape + (2,), dtype=np.float32)
    z = raw.view(np.complex64).reshape(shape)
    return z * np.sqrt(np.asarray(var, dtype=np.float32) / 2.0)


def _chunk_draw(rng, beta_l, config, l, num, own_cols):
    """One chunk of per-draw conditional precoded-channel products for BS l.

    Channels split as h = hhat + herr with the MMSE error herr independent of
    every precoder, so E{|w^H h|^2} = E{|w^H hhat|^2} + (beta - gamma) and
    E{w^H h} = E{w^H hhat}: only the estimate part needs sampling (conditional
    Monte Carlo). Returns z[d, i, u] = w_li^H hhat_u for u cell-major; the
    (beta - gamma) remainder is added in closed form by the caller. Everything
    runs in units of the largest beta to keep the float32 draws well scaled.
    """
    L, K, M = config.num_cells, config.users_per_cell, config.antennas
    unit = float(beta_l.max())
    beta_n = beta_l / unit
    p, tau = config.pilot_power_mw, K
    s2 = config.noise_mw / unit

    if config.estimation == "perfect":
        # No estimation error: draw the channels themselves (full rank).
        h = _complex_normal(rng, (num, M, L * K), beta_n.reshape(L * K))
        hhat_own = h[:, :, own_cols]
        gamma_l = beta_n
        if config.precoder_mr:
            w = hhat_own / np.sqrt(M * gamma_l[l]).astype(np.float32)[None, None, :]
        else:
            d = s2
            est_h = h.conj().transpose(0, 2, 1)
            gram = est_h @ h
            r = gram.shape[-1]
            gram[:, np.arange(r), np.arange(r)] += np.complex64(d / p)
            v = (hhat_own - h @ np.linalg.solve(gram, est_h @ hhat_own)) / np.float32(d)
            w = v / np.linalg.norm(v, axis=1, keepdims=True)
        z = w.conj().transpose(0, 2, 1) @ h
        return z.astype(np.complex128) * np.sqrt(unit)

    # Pilot k observation: same-index users superimpose plus noise.
    y = _complex_normal(rng, (num, M, K),
                        (p * tau**2 * beta_n.sum(axis=0) + tau * s2))
    psi = p * tau * beta_n.sum(axis=0) + s2                 # (K,)
    coef = np.sqrt(p) * beta_n / psi                        # (L, K) estimate coefficients
    gamma_l = p * tau * beta_n**2 / psi
    hhat_own = y * coef[l].astype(np.float32)[None, None, :]

    if config.precoder_mr:
        w = hhat_own / np.sqrt(M * gamma_l[l]).astype(np.float32)[None, None, :]
    else:
        # Estimates within a pilot group are colinear; the Gram is rank K with
        # effective columns sqrt(sum_j coef^2) * y_k (Woodbury on K x K).
        est_cols = y * np.sqrt((coef**2).sum(axis=0)).astype(np.float32)[None, None, :]
        d = p * float((beta_n - gamma_l).sum()) + s2
        est_h = est_cols.conj().transpose(0, 2, 1)
        gram = est_h @ est_cols
        gram[:, np.arange(K), np.arange(K)] += np.complex64(d / p)
        v = (hhat_own - est_cols @ np.linalg.solve(gram, est_h @ hhat_own)) / np.float32(d)
        w = v / np.linalg.norm(v, axis=1, keepdims=True)

    u = w.conj().transpose(0, 2, 1) @ y                     # (num, K, K_pilots)
    # z[d, i, (j, k)] = coef[j, k] * (w_li^H y_k)
    z = u[:, :, None, :] * coef.astype(np.complex64)[None, None, :, :]
    return z.reshape(num, K, L * K).astype(np.complex128) * np.sqrt(unit)


def monte_carlo_gains(fading: np.ndarray, config: NetworkConfig, precoder: str,
                      num_draws: int, rng: np.random.Generator,
                      batches: int | None = None) -> GainTable:
    """Sample-mean estimate of the gain table from num_draws channel draws.

    Uses conditional Monte Carlo: the estimation-error component of every
    expectation is exact given the precoders, so only the pilot-observation
    randomness is sampled and the (beta - gamma) remainder is added in closed
    form. Per-entry standard errors come from splitting the draws into
    batches and taking the spread of the per-batch estimates. Negative self
    terms are clipped to zero (counted). Singular precoder systems cause the
    offending chunk to be redrawn (counted).
    """
    if precoder not in PRECODERS:
        raise ValueError(f"unknown precoder {precoder!r}")
    if num_draws < _MIN_DRAWS:
        raise ValueError(f"num_draws must be >= {_MIN_DRAWS}")
    beta = np.asarray(fading, dtype=float)
    L, K = config.num_cells, config.users_per_cell
    if batches is None:
        batches = min(100, max(10, num_draws // 100))
    sizes = np.full(batches, num_draws // batches)
    sizes[: num_draws % batches] += 1

    cfg = _McConfig(config, precoder == "mr")

    own = [l * K + np.arange(K) for l in range(L)]
    m_batch = np.zeros((batches, L, K), dtype=np.complex128)
    q_batch = np.zeros((batches, L, K, L * K))
    resamples = 0
    for bi, size in enumerate(sizes):
        for l in range(L):
            for attempt in range(3):
                try:
                    z = _chunk_draw(rng, beta[l], cfg, l, int(size), own[l])
                    break
                except np.linalg.LinAlgError:
                    resamples += int(size)
            else:
                raise np.linalg.LinAlgError(
                    f"M-MMSE precoder construction kept failing at BS {l}"
                )
            q_batch[bi, l] = (np.abs(z) ** 2).mean(axis=0)
            m_batch[bi, l] = z[:, np.arange(K), own[l]].mean(axis=0)

    weights = sizes / num_draws
    m_hat = np.einsum("b,bjk->jk", weights, m_batch)
    q_hat = np.einsum("b,bliu->liu", weights, q_batch).reshape(L, K, L, K)

    # Closed-form estimation-error remainder (zero without estimation error).
    if config.estimation == "mmse":
        gamma = estimate_gains(beta, config)
        remainder = np.broadcast_to((beta - gamma)[:, None, :, :], (L, K, L, K))
    else:
        remainder = np.zeros((L, K, L, K))

    a = np.abs(m_hat) ** 2
    b = q_hat + remainder
    jj, kk = np.arange(L), np.arange(K)
    for j in jj:
        b[j, :, j, :][kk, kk] -= a[j]

    # Batch-level replicas of the same estimators give the standard errors
    # (the constant remainder shifts every batch identically).
    a_b = np.abs(m_batch) ** 2
    b_b = q_batch.reshape(batches, L, K, L, K).copy()
    for j in jj:
        b_b[:, j, :, j, :][:, kk, kk] -= a_b[:, j, :]
    a_se = a_b.std(axis=0, ddof=1) / np.sqrt(batches)
    b_se = b_b.std(axis=0, ddof=1) / np.sqrt(batches)

    clip = int(np.sum(b < 0))
    b = np.maximum(b, 0.0)
    return GainTable(a=a, b=b, precoder=precoder, estimator="monte_carlo",
                     num_draws=num_draws, a_se=a_se, b_se=b_se,
                     clip_count=clip, resample_count=resamples)


class _McConfig:
    """View of NetworkConfig plus the precoder flag used by the draw kernel."""

    def __init__(self, config: NetworkConfig, precoder_mr: bool):
        self._config = config
        self.precoder_mr = precoder_mr

    def __getattr__(self, name):
        return getattr(self._config, name)


def save_gain_table(table: GainTable, config: NetworkConfig, path) -> None:
    """Binary gain-table file: magic, JSON header, float64 little-endian arrays."""
    header = {
        "schema_version": GAIN_FILE_SCHEMA_VERSION,
        "config_hash": config_hash(config),
        "precoder": table.precoder,
        "estimator": table.estimator,
        "num_draws": table.num_draws,
        "L": config.num_cells,
        "K": config.users_per_cell,
        "has_se": table.a_se is not None,
        "clip_count": table.clip_count,
        "resample_count": table.resample_count,
    }
    blob = json.dumps(header, sort_keys=True).encode()
    with open(path, "wb") as fh:
        fh.write(GAIN_FILE_MAGIC)
        fh.write(struct.pack("<I", len(blob)))
        fh.write(blob)
        fh.write(table.a.astype("<f8").tobytes())
        fh.write(table.b.astype("<f8").tobytes())
        if table.a_se is not None:
            fh.write(table.a_se.astype("<f8").tobytes())
            fh.write(table.b_se.astype("<f8").tobytes())


def load_gain_table(path, expected_config_hash: str | None = None) -> GainTable:
    with open(path, "rb") as fh:
        magic = fh.read(4)
        if magic != GAIN_FILE_MAGIC:
            raise GainFileError(f"{path}: not a gain-table file")
        (hlen,) = struct.unpack("<I", fh.read(4))
        header = json.loads(fh.read(hlen).decode())
        if header.get("schema_version") != GAIN_FILE_SCHEMA_VERSION:
            raise GainFileError(f"{path}: unsupported schema_version {header.get('schema_version')}")
        if expected_config_hash and header["config_hash"] != expected_config_hash:
            raise GainFileError(f"{path}: config hash mismatch")
        L, K = header["L"], header["K"]
        need = L * K + (L * K) ** 2
        if header["has_se"]:
            need *= 2
        data = np.frombuffer(fh.read(), dtype="<f8")
        if data.size != need:
            raise GainFileError(f"{path}: truncated or oversized payload")
    n_a, n_b = L * K, (L * K) ** 2
    a = data[:n_a].reshape(L, K).copy()
    b = data[n_a:n_a + n_b].reshape(L, K, L, K).copy()
    a_se = b_se = None
    if header["has_se"]:
        rest = data[n_a + n_b:]
        a_se = rest[:n_a].reshape(L, K).copy()
        b_se = rest[n_a:].reshape(L, K, L, K).copy()
    return GainTable(a=a, b=b, precoder=header["precoder"], estimator=header["estimator"],
                     num_draws=header["num_draws"], a_se=a_se, b_se=b_se,
                     clip_count=header["clip_count"], resample_count=header["resample_count"])


def gain_table_to_csv(table: GainTable, path) -> None:
    """Flat CSV of all gain entries for inspection."""
    L, K = table.a.shape
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["kind", "l", "i", "j", "k", "value", "stderr"])
        for j in range(L):
            for k in range(K):
                se = "" if table.a_se is None else repr(table.a_se[j, k])
                writer.writerow(["a", "", "", j, k, repr(table.a[j, k]), se])
        for l in range(L):
            for i in range(K):
                for j in range(L):
                    for k in range(K):
                        se = "" if table.b_se is None else repr(table.b_se[l, i, j, k])
                        writer.writerow(["b", l, i, j, k, repr(table.b[l, i, j, k]), se])
