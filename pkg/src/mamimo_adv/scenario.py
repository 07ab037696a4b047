"""Network geometry, static system parameters, and random user drops.

The deployment is a rectangular grid of square cells with one base station
at each cell center. User terminals are dropped uniformly inside their own
cell, keeping a minimum distance to the serving base station. Positions are
reported as a flat vector of length 2*K*L ordered cell-major, then
user-major, then (x, y), in meters.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field, asdict
from pathlib import Path

import numpy as np
import yaml

CONFIG_SCHEMA_VERSION = 1

# Seed-stream tags so independent parts of the pipeline never share an RNG stream.
STREAM_TRAIN = 0
STREAM_TEST = 1
STREAM_MODEL_INIT = 2
STREAM_ATTACK = 3


class ConfigError(ValueError):
    """Raised for invalid or inconsistent configuration values."""


class DropError(RuntimeError):
    """Raised when rejection sampling of user positions cannot satisfy d_min."""


@dataclass(frozen=True)
class NetworkConfig:
    """Static deployment parameters of the multi-cell downlink network."""

    num_cells: int = 4
    users_per_cell: int = 5
    antennas: int = 100
    p_max_dl_mw: float = 500.0
    noise_dbm: float = -94.0
    cell_side_m: float = 250.0
    grid_rows: int = 2
    grid_cols: int = 2
    bandwidth_hz: float = 20e6
    rng_seed: int = 0
    d_min_m: float = 10.0
    pathloss_ref_db: float = -148.1      # gain at 1 km
    pathloss_decay_db: float = 37.6      # dB per decade of distance
    shadowing_std_db: float = 0.0
    pilot_power_mw: float = 100.0
    estimation: str = "mmse"             # "mmse" or "perfect"

    def __post_init__(self):
        if self.num_cells < 1 or self.users_per_cell < 1 or self.antennas < 1:
            raise ConfigError("num_cells, users_per_cell and antennas must be >= 1")
        if self.grid_rows * self.grid_cols != self.num_cells:
            raise ConfigError(
                f"grid {self.grid_rows}x{self.grid_cols} does not tile {self.num_cells} cells"
            )
        if self.p_max_dl_mw <= 0:
            raise ConfigError("p_max_dl_mw must be positive")
        if self.cell_side_m <= 0:
            raise ConfigError("cell_side_m must be positive")
        if self.d_min_m < 0:
            raise ConfigError("d_min_m must be non-negative")
        if self.pilot_power_mw <= 0:
            raise ConfigError("pilot_power_mw must be positive")
        if self.estimation not in ("mmse", "perfect"):
            raise ConfigError(f"unknown estimation mode {self.estimation!r}")

    @property
    def noise_mw(self) -> float:
        return 10.0 ** (self.noise_dbm / 10.0)

    @property
    def input_dim(self) -> int:
        return 2 * self.users_per_cell * self.num_cells

    @property
    def label_dim(self) -> int:
        return self.users_per_cell + 1


def config_hash(config: NetworkConfig) -> str:
    """Stable 12-hex-digit digest of the configuration contents."""
    blob = json.dumps(asdict(config), sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(blob.encode()).hexdigest()[:12]


def load_config(path) -> NetworkConfig:
    """Read a NetworkConfig from a YAML key-value file (see README for the schema)."""
    with open(path) as fh:
        raw = yaml.safe_load(fh) or {}
    if not isinstance(raw, dict):
        raise ConfigError(f"{path}: expected a mapping of config keys")
    version = raw.pop("schema_version", None)
    if version != CONFIG_SCHEMA_VERSION:
        raise ConfigError(
            f"{path}: schema_version {version!r} not supported (expected {CONFIG_SCHEMA_VERSION})"
        )
    known = set(NetworkConfig.__dataclass_fields__)
    unknown = set(raw) - known
    if unknown:
        raise ConfigError(f"{path}: unknown config keys {sorted(unknown)}")
    try:
        return NetworkConfig(**raw)
    except TypeError as exc:
        raise ConfigError(f"{path}: {exc}") from exc


def save_config(config: NetworkConfig, path) -> None:
    doc = {"schema_version": CONFIG_SCHEMA_VERSION, **asdict(config)}
    Path(path).write_text(yaml.safe_dump(doc, sort_keys=False))


@dataclass(frozen=True)
class CellLayout:
    """Base-station coordinates and per-cell rectangles of one deployment."""

    bs_xy: np.ndarray         # (L, 2) base-station positions, meters
    cell_bounds: np.ndarray   # (L, 4) rectangles as (xmin, ymin, xmax, ymax)
    coverage: tuple           # (xmin, ymin, xmax, ymax) of the whole deployment


def build_geometry(config: NetworkConfig) -> CellLayout:
    """Place one base station at the center of each grid cell.

    Cells are indexed row-major: cell j sits at row j // grid_cols,
    column j % grid_cols.
    """
    side = config.cell_side_m
    bs = np.empty((config.num_cells, 2))
    bounds = np.empty((config.num_cells, 4))
    for j in range(config.num_cells):
        row, col = divmod(j, config.grid_cols)
        x0, y0 = col * side, row * side
        bounds[j] = (x0, y0, x0 + side, y0 + side)
        bs[j] = (x0 + side / 2.0, y0 + side / 2.0)
    coverage = (0.0, 0.0, config.grid_cols * side, config.grid_rows * side)
    return CellLayout(bs_xy=bs, cell_bounds=bounds, coverage=coverage)


@dataclass(frozen=True)
class UePositions:
    """One drop of user positions, flat (2*K*L,) and as a (L, K, 2) grid."""

    coords: np.ndarray

    def as_grid(self, config: NetworkConfig) -> np.ndarray:
        return self.coords.reshape(config.num_cells, config.users_per_cell, 2)


def coords_to_grid(coords: np.ndarray, config: NetworkConfig) -> np.ndarray:
    """Reshape flat position vectors (..., 2KL) to (..., L, K, 2)."""
    lead = coords.shape[:-1]
    return coords.reshape(*lead, config.num_cells, config.users_per_cell, 2)


def drop_users(config: NetworkConfig, layout: CellLayout, rng: np.random.Generator,
               max_tries: int = 1000) -> UePositions:
    """Drop K users uniformly inside each cell, at least d_min from the serving BS.

    Deterministic for a given generator state. Raises DropError when the
    exclusion disc cannot be escaped within max_tries draws per user, which
    signals an inconsistent d_min versus cell_side.
    """
    L, K = config.num_cells, config.users_per_cell
    coords = np.empty((L, K, 2))
    for j in range(L):
        x0, y0, x1, y1 = layout.cell_bounds[j]
        bs = layout.bs_xy[j]
        for k in range(K):
            for _ in range(max_tries):
                pt = rng.uniform((x0, y0), (x1, y1))
                if np.hypot(pt[0] - bs[0], pt[1] - bs[1]) >= config.d_min_m:
                    coords[j, k] = pt
                    break
            else:
                raise DropError(
                    f"could not place user at distance >= {config.d_min_m} m from the BS "
                    f"of cell {j} within {max_tries} tries; check d_min_m vs cell_side_m"
                )
    return UePositions(coords=coords.reshape(-1))


def sample_rng(master_seed: int, index: int, stream: int = STREAM_TRAIN) -> np.random.Generator:
    """Independent per-sample generator derived from (master seed, stream, index)."""
    return np.random.default_rng(np.random.SeedSequence(master_seed, spawn_key=(stream, index)))
