import numpy as np
import pytest

from mamimo_adv.scenario import (NetworkConfig, ConfigError, DropError, build_geometry,
                                 drop_users, sample_rng, load_config, save_config,
                                 config_hash)


def test_default_grid_bs_centers():
    layout = build_geometry(NetworkConfig())
    expected = [(125, 125), (375, 125), (125, 375), (375, 375)]
    assert np.allclose(layout.bs_xy, expected)


def test_single_cell_bs_center():
    cfg = NetworkConfig(num_cells=1, users_per_cell=1, grid_rows=1, grid_cols=1)
    layout = build_geometry(cfg)
    assert np.allclose(layout.bs_xy, [(125, 125)])


def test_tiling_covers_exact_area():
    # Coverage area equals L * side^2 and the cells do not overlap.
    cfg = NetworkConfig(cell_side_m=500.0)
    layout = build_geometry(cfg)
    x0, y0, x1, y1 = layout.coverage
    assert (x1 - x0) * (y1 - y0) == pytest.approx(cfg.num_cells * 500.0**2)
    assert (x1 - x0) == pytest.approx(1000.0) and (y1 - y0) == pytest.approx(1000.0)
    for i in range(cfg.num_cells):
        for j in range(i + 1, cfg.num_cells):
            a, b = layout.cell_bounds[i], layout.cell_bounds[j]
            ix = min(a[2], b[2]) - max(a[0], b[0])
            iy = min(a[3], b[3]) - max(a[1], b[1])
            assert min(ix, iy) <= 0  # rectangles touch at most on an edge


def test_config_invariants():
    with pytest.raises(ConfigError):
        NetworkConfig(num_cells=3)              # 2x2 grid cannot hold 3 cells
    with pytest.raises(ConfigError):
        NetworkConfig(p_max_dl_mw=0.0)
    with pytest.raises(ConfigError):
        NetworkConfig(cell_side_m=-1.0)
    with pytest.raises(ConfigError):
        NetworkConfig(estimation="oracle")


def test_noise_conversion():
    cfg = NetworkConfig()
    assert cfg.noise_mw == pytest.approx(10 ** (-94 / 10))


def test_drop_determinism_and_length():
    cfg = NetworkConfig()
    layout = build_geometry(cfg)
    a = drop_users(cfg, layout, sample_rng(3, 5)).coords
    b = drop_users(cfg, layout, sample_rng(3, 5)).coords
    assert np.array_equal(a, b)
    assert a.shape == (40,)  # 2*K*L with K=5, L=4


def test_drops_respect_cell_bounds_and_dmin():
    cfg = NetworkConfig()
    layout = build_geometry(cfg)
    for idx in range(50):
        grid = drop_users(cfg, layout, sample_rng(11, idx)).as_grid(cfg)
        for j in range(cfg.num_cells):
            x0, y0, x1, y1 = layout.cell_bounds[j]
            assert np.all(grid[j, :, 0] >= x0) and np.all(grid[j, :, 0] <= x1)
            assert np.all(grid[j, :, 1] >= y0) and np.all(grid[j, :, 1] <= y1)
            d = np.linalg.norm(grid[j] - layout.bs_xy[j], axis=1)
            assert np.all(d >= cfg.d_min_m)


def test_infeasible_dmin_raises():
    cfg = NetworkConfig(d_min_m=250.0)  # exclusion radius covers the whole cell
    layout = build_geometry(cfg)
    with pytest.raises(DropError):
        drop_users(cfg, layout, sample_rng(0, 0), max_tries=50)


def test_config_roundtrip_and_hash(tmp_path):
    cfg = NetworkConfig(noise_dbm=-90.0, rng_seed=9)
    path = tmp_path / "cfg.yaml"
    save_config(cfg, path)
    loaded = load_config(path)
    assert loaded == cfg
    assert config_hash(loaded) == config_hash(cfg)
    assert config_hash(loaded) != config_hash(NetworkConfig())


def test_config_rejects_unknown_keys(tmp_path):
    path = tmp_path / "cfg.yaml"
    path.write_text("schema_version: 1\nnum_cellz: 4\n")
    with pytest.raises(ConfigError):
        load_config(path)


def test_config_rejects_bad_schema_version(tmp_path):
    path = tmp_path / "cfg.yaml"
    path.write_text("schema_version: 99\n")
    with pytest.raises(ConfigError):
        load_config(path)
