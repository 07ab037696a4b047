import numpy as np
import pytest

from mamimo_adv.scenario import NetworkConfig, build_geometry, drop_users, sample_rng
from mamimo_adv.channel import GainTable, large_scale_fading, mr_gains_closed_form
from mamimo_adv.oracle import (DatasetFileError, PowerAllocation, SolverParams, sinr,
                               solve_max_product, solve_max_product_batch,
                               project_cell_cap, make_dataset, save_dataset,
                               load_dataset, dataset_to_csv, _log_objective)

from grid_oracle import grid_search_max_product, log_objective_at


def gains_for(cfg, seed=0, index=0):
    layout = build_geometry(cfg)
    beta = large_scale_fading(cfg, layout, drop_users(cfg, layout, sample_rng(seed, index)))
    return mr_gains_closed_form(beta, cfg)


def reference_sinr(a, b, rho, sigma2):
    # Straight quadruple-loop transcription of the SINR definition.
    L, K = a.shape
    out = np.empty((L, K))
    for j in range(L):
        for k in range(K):
            denom = sigma2
            for l in range(L):
                for i in range(K):
                    denom += rho[l, i] * b[l, i, j, k]
            out[j, k] = rho[j, k] * a[j, k] / denom
    return out


def test_sinr_zero_powers():
    cfg = NetworkConfig(num_cells=1, users_per_cell=2, grid_rows=1, grid_cols=1)
    table = gains_for(cfg)
    assert np.all(sinr(table, np.zeros((1, 2)), cfg.noise_mw) == 0)


def test_sinr_single_user_no_interference():
    a = np.array([[4e-10]])
    b = np.zeros((1, 1, 1, 1))
    table = GainTable(a=a, b=b, precoder="mr", estimator="closed_form")
    rho = np.array([[200.0]])
    s2 = 1e-10
    assert sinr(table, rho, s2)[0, 0] == pytest.approx(200.0 * 4e-10 / 1e-10)


def test_sinr_matches_reference_implementation():
    cfg = NetworkConfig(num_cells=2, users_per_cell=3, grid_rows=1, grid_cols=2)
    table = gains_for(cfg, seed=1)
    rng = np.random.default_rng(0)
    rho = rng.uniform(0, cfg.p_max_dl_mw / 3, (2, 3))
    got = sinr(table, rho, cfg.noise_mw)
    want = reference_sinr(table.a, table.b, rho, cfg.noise_mw)
    assert np.allclose(got, want, rtol=1e-12)


def test_sinr_validates_inputs():
    cfg = NetworkConfig(num_cells=1, users_per_cell=1, grid_rows=1, grid_cols=1)
    table = gains_for(cfg)
    with pytest.raises(ValueError):
        sinr(table, np.array([[-1.0]]), cfg.noise_mw)
    with pytest.raises(ValueError):
        sinr(table, np.array([[1.0]]), 0.0)


def test_projection_cases():
    p = 10.0
    v = np.array([[3.0, 4.0], [-1.0, 2.0], [8.0, 7.0]])
    proj = project_cell_cap(v, p)
    assert np.allclose(proj[0], [3, 4])          # already feasible
    assert np.allclose(proj[1], [0, 2])          # clipped at zero
    assert proj[2].sum() == pytest.approx(p)     # projected onto the budget face
    assert proj[2][0] == pytest.approx(5.5) and proj[2][1] == pytest.approx(4.5)


def test_projection_exactness_random():
    rng = np.random.default_rng(3)
    p = 500.0
    v = rng.uniform(-200, 800, (200, 4, 5))
    proj = project_cell_cap(v, p)
    assert np.all(proj >= 0)
    assert proj.sum(axis=-1).max() <= p * (1 + 1e-9)


def test_single_user_optimum_is_full_power():
    cfg = NetworkConfig(num_cells=1, users_per_cell=1, grid_rows=1, grid_cols=1)
    pa = solve_max_product(gains_for(cfg), cfg)
    assert pa.converged
    assert pa.rho[0, 0] == pytest.approx(cfg.p_max_dl_mw, rel=1e-9)


def test_symmetric_two_users_split_equally():
    cfg = NetworkConfig(num_cells=1, users_per_cell=2, grid_rows=1, grid_cols=1)
    a = np.array([[1e-9, 1e-9]])
    b = np.full((1, 2, 1, 2), 2e-12)
    table = GainTable(a=a, b=b, precoder="mr", estimator="closed_form")
    pa = solve_max_product(table, cfg)
    assert pa.converged
    assert pa.rho[0, 0] == pytest.approx(pa.rho[0, 1], rel=1e-9)


def test_solver_matches_grid_search_small():
    cfg = NetworkConfig(num_cells=2, users_per_cell=2, grid_rows=1, grid_cols=2)
    for seed in (0, 1):
        table = gains_for(cfg, seed=100, index=seed)
        pa = solve_max_product(table, cfg)
        fs = log_objective_at(pa.rho, table.a, table.b, cfg.noise_mw)
        fc, _, fz, _ = grid_search_max_product(table.a, table.b, cfg.p_max_dl_mw,
                                               cfg.noise_mw, 60, refine_points=60)
        assert fs >= fc - 1e-3          # never beaten by the brute-force grid
        assert pa.rho.sum(axis=1).max() <= cfg.p_max_dl_mw * (1 + 1e-9)


def test_solver_monotone_objective_and_budget():
    cfg = NetworkConfig()
    table = gains_for(cfg, seed=5)
    pa = solve_max_product(table, cfg)
    assert pa.converged and pa.grad_norm < 1e-6
    violation = pa.rho.sum(axis=1).max() - cfg.p_max_dl_mw
    assert violation <= 1e-9 * cfg.p_max_dl_mw
    # Walking back along the last gradient direction cannot improve the objective.
    f_opt = _log_objective(pa.rho[None], table.a[None], table.b[None], cfg.noise_mw)[0]
    rng = np.random.default_rng(0)
    for _ in range(10):
        other = project_cell_cap(pa.rho + rng.normal(0, 5.0, pa.rho.shape),
                                 cfg.p_max_dl_mw)
        f_other = _log_objective(np.maximum(other, 1e-9)[None], table.a[None],
                                 table.b[None], cfg.noise_mw)[0]
        assert f_other <= f_opt + 1e-6


def test_scaling_invariance_of_argmax():
    # Scaling a, b, and sigma2 jointly leaves the optimal powers unchanged.
    cfg = NetworkConfig(num_cells=2, users_per_cell=2, grid_rows=1, grid_cols=2)
    table = gains_for(cfg, seed=6)
    pa1 = solve_max_product(table, cfg)
    scaled = GainTable(a=1e3 * table.a, b=1e3 * table.b, precoder="mr",
                       estimator="closed_form")
    rho2, conv, _, _ = solve_max_product_batch(scaled.a[None], scaled.b[None],
                                               cfg.p_max_dl_mw, 1e3 * cfg.noise_mw)
    assert conv[0]
    assert np.allclose(rho2[0], pa1.rho, rtol=1e-4, atol=1e-6)


def test_nonconvergence_flag():
    cfg = NetworkConfig()
    table = gains_for(cfg, seed=7)
    pa = solve_max_product(table, cfg, SolverParams(max_iters=3))
    assert not pa.converged
    assert pa.iterations <= 3


def test_make_dataset_labels():
    cfg = NetworkConfig()
    ds = make_dataset(cfg, 20, "mr", rng_seed=1)
    assert ds.inputs.shape == (20, 40)
    assert ds.labels.shape == (20, 4, 6)       # K+1 = 6 per cell
    sums = ds.labels[:, :, :-1].sum(axis=2)
    assert np.allclose(ds.labels[:, :, -1], sums)          # last = sum, definitional
    assert np.all(sums <= cfg.p_max_dl_mw * (1 + 1e-9))    # feasibility
    assert np.all(ds.labels >= 0)


def test_make_dataset_deterministic_and_chunk_invariant():
    cfg = NetworkConfig()
    d1 = make_dataset(cfg, 12, "mr", rng_seed=5, chunk_size=4)
    d2 = make_dataset(cfg, 12, "mr", rng_seed=5, chunk_size=12)
    assert np.array_equal(d1.inputs, d2.inputs)
    assert np.array_equal(d1.labels, d2.labels)


def test_dataset_file_roundtrip(tmp_path):
    cfg = NetworkConfig()
    ds = make_dataset(cfg, 8, "mr", rng_seed=2)
    path = tmp_path / "ds.bin"
    save_dataset(ds, path)
    loaded = load_dataset(path)
    assert np.array_equal(loaded.inputs, ds.inputs)
    assert np.array_equal(loaded.labels, ds.labels)
    assert loaded.config == cfg and loaded.precoder == "mr"
    path.write_bytes(path.read_bytes()[:-8])
    with pytest.raises(DatasetFileError):
        load_dataset(path)


def test_dataset_csv_export(tmp_path):
    cfg = NetworkConfig()
    ds = make_dataset(cfg, 5, "mr", rng_seed=3)
    path = tmp_path / "ds.csv"
    dataset_to_csv(ds, path)
    lines = path.read_text().strip().splitlines()
    assert len(lines) == 6
    assert lines[0].startswith("x0,") and "rho_3_5" in lines[0]
