import math

import numpy as np
import pytest

from mamimo_adv.scenario import NetworkConfig
from mamimo_adv.nn import Layer, MlpModel, build_model, train, TrainHyper
from mamimo_adv.oracle import make_dataset
from mamimo_adv.attacks import (AttackConfig, AttackReport, attack_fgsm, attack_mifgsm,
                                attack_pgd, attack_random, epsilon_from_distance,
                                run_attack)

CFG = NetworkConfig()


@pytest.fixture(scope="module")
def trained_model():
    ds = make_dataset(CFG, 1500, "mr", rng_seed=21)
    m = build_model("model1", CFG, seed=1, cell=0, precoder="mr")
    m, _ = train(m, ds, cell=0, hyper=TrainHyper(max_epochs=120, patience=40), seed=1)
    return m


@pytest.fixture(scope="module")
def test_inputs():
    rng = np.random.default_rng(5)
    return rng.uniform(0, 500, (200, 40))


def test_epsilon_from_distance_paper_pairs():
    # Quoted centimeters are truncated to one decimal, hence the 7.1e-4 slack.
    for d_cm, eps in [(42.4, 0.3), (56.5, 0.4), (14.1, 0.1), (28.2, 0.2)]:
        assert abs(epsilon_from_distance(d_cm / 100) - eps) < 7.1e-4
    assert epsilon_from_distance(0.0) == 0.0
    with pytest.raises(ValueError):
        epsilon_from_distance(-1.0)
    assert epsilon_from_distance(1.0) == pytest.approx(1 / math.sqrt(2))


def test_attack_config_validation():
    with pytest.raises(ValueError):
        AttackConfig(method="cw", epsilon=0.1)
    with pytest.raises(ValueError):
        AttackConfig(epsilon=-0.1)
    with pytest.raises(ValueError):
        AttackConfig(alpha=0.0)
    with pytest.raises(ValueError):
        AttackConfig(mu=1.5)
    assert AttackConfig(epsilon=0.4, i_iters=10).beta == pytest.approx(0.04)


def test_fgsm_zero_epsilon_is_identity(trained_model, test_inputs):
    out = attack_fgsm(trained_model, test_inputs, 0, 0.0)
    assert np.array_equal(out.x_adv, out.x_t)
    clean_feasible = out.clean_sums <= trained_model.output_scale
    assert np.array_equal(out.feasible, clean_feasible)


def test_fgsm_linear_model_hand_perturbation():
    rng = np.random.default_rng(2)
    w = rng.normal(size=(3, 5))
    m = MlpModel(layers=[Layer(w=w, b=np.zeros(3), activation="linear")],
                 output_scale=1.0)
    x = rng.normal(size=5)
    out = attack_fgsm(m, x, 0, 0.25)
    # Loss = sum of first two outputs, so eta = eps * sign of those column sums.
    expected = x + 0.25 * np.sign(w[:2].sum(axis=0))
    assert np.allclose(out.x_adv[0], expected)


def test_fgsm_perturbs_every_coordinate_by_eps(trained_model, test_inputs):
    out = attack_fgsm(trained_model, test_inputs, 0, 0.3)
    deltas = np.abs(out.x_adv - out.x_t)
    # sign(0) = 0 keeps dead coordinates put; all others move by eps, up to
    # the one-ulp loss of reconstructing (x + eta) - x in floats.
    assert np.all((np.abs(deltas - 0.3) < 1e-12) | (deltas == 0.0))


def test_fgsm_increases_loss_on_trained_model(trained_model, test_inputs):
    out = attack_fgsm(trained_model, test_inputs, 0, 0.3)
    assert np.mean(out.adv_sums >= out.clean_sums) >= 0.9


def test_pgd_collapses_to_fgsm(trained_model, test_inputs):
    eps = 0.3
    f = attack_fgsm(trained_model, test_inputs, 0, eps)
    p = attack_pgd(trained_model, test_inputs, 0,
                   AttackConfig(method="pgd", epsilon=eps, alpha=eps, q_iters=1))
    assert np.array_equal(f.x_adv, p.x_adv)


def test_pgd_stays_in_ball_and_dominates_fgsm(trained_model, test_inputs):
    eps = 0.3
    p = attack_pgd(trained_model, test_inputs, 0,
                   AttackConfig(method="pgd", epsilon=eps, alpha=0.01, q_iters=40))
    assert p.linf.max() <= eps + 1e-12
    f = attack_fgsm(trained_model, test_inputs, 0, eps)
    assert np.mean(p.adv_sums >= f.adv_sums) >= 0.95


def test_mifgsm_collapses_to_fgsm(trained_model, test_inputs):
    eps = 0.2
    f = attack_fgsm(trained_model, test_inputs, 0, eps)
    m = attack_mifgsm(trained_model, test_inputs, 0,
                      AttackConfig(method="mifgsm", epsilon=eps, mu=0.0, i_iters=1))
    assert np.array_equal(f.x_adv, m.x_adv)


def test_mifgsm_telescoping_linf_bound(trained_model, test_inputs):
    # No per-step clipping, but I steps of size eps/I cannot leave the ball.
    eps = 0.4
    out = attack_mifgsm(trained_model, test_inputs, 0,
                        AttackConfig(method="mifgsm", epsilon=eps, mu=0.1, i_iters=10))
    assert out.linf.max() <= eps + 1e-12


def test_mifgsm_zero_gradient_keeps_momentum():
    m = MlpModel(layers=[Layer(w=np.zeros((2, 3)), b=np.zeros(2), activation="linear")],
                 output_scale=1.0)
    out = attack_mifgsm(m, np.ones(3), 0,
                        AttackConfig(method="mifgsm", epsilon=0.5, mu=0.5, i_iters=4))
    assert np.array_equal(out.x_adv[0], np.ones(3))


def test_random_attack_properties(trained_model, test_inputs):
    rng = np.random.default_rng(9)
    eps = 0.25
    out = attack_random(trained_model, test_inputs, 0, eps, rng)
    deltas = out.x_adv - out.x_t
    assert np.all(np.abs(np.abs(deltas) - eps) < 1e-12)   # +-eps on every coordinate
    assert out.linf.max() == pytest.approx(eps, abs=1e-12)
    frac_pos = np.mean(deltas > 0)                # 8000 coordinate draws
    sigma = math.sqrt(0.25 / deltas.size)
    assert abs(frac_pos - 0.5) < 3 * sigma + 0.02
    z = attack_random(trained_model, test_inputs, 0, 0.0, rng)
    assert np.array_equal(z.x_adv, z.x_t)


def test_linf_containment_all_methods(trained_model, test_inputs):
    for eps in (0.1, 0.3):
        cfg = dict(epsilon=eps, alpha=0.01, q_iters=40, mu=0.1, i_iters=10)
        outs = [
            attack_fgsm(trained_model, test_inputs, 0, eps),
            attack_pgd(trained_model, test_inputs, 0, AttackConfig(method="pgd", **cfg)),
            attack_mifgsm(trained_model, test_inputs, 0,
                          AttackConfig(method="mifgsm", **cfg)),
            attack_random(trained_model, test_inputs, 0, eps, np.random.default_rng(1)),
        ]
        for out in outs:
            assert out.linf.max() <= eps + 1e-12


def test_attack_loss_uses_only_power_outputs(trained_model):
    # Gradients must ignore the appended sum output; zeroing its fixed weights
    # while keeping the power rows intact must not change the perturbation.
    import copy
    x = np.random.default_rng(3).uniform(0, 500, (5, 40))
    clone = copy.deepcopy(trained_model)
    clone.layers[-1].w[-1, :] = 0.0     # kill the sum row only
    a = attack_fgsm(trained_model, x, 0, 0.2)
    b = attack_fgsm(clone, x, 0, 0.2)
    assert np.array_equal(a.x_adv, b.x_adv)


def test_run_attack_dispatch_and_outcome(trained_model, test_inputs):
    cfg = AttackConfig(method="random", epsilon=0.2, rng_seed=3)
    out1 = run_attack(trained_model, test_inputs, 1, cfg)
    out2 = run_attack(trained_model, test_inputs, 1, cfg)
    assert np.array_equal(out1.x_adv, out2.x_adv)   # seeded rng from config
    sample = out1.sample(0)
    assert sample.cell == 1
    assert sample.feasible == bool(out1.feasible[0])
    assert sample.clean_powers.shape == (5,)


def test_attack_report_csv_and_rates(tmp_path, trained_model, test_inputs):
    report = AttackReport()
    out = attack_fgsm(trained_model, test_inputs[:50], 0, 0.3)
    report.add(out)
    csv_path = tmp_path / "report.csv"
    report.to_csv(csv_path)
    lines = csv_path.read_text().strip().splitlines()
    assert len(lines) == 51
    rates = report.aggregate_rates()
    assert rates["fgsm"][repr(0.3)]["all"] == pytest.approx(out.success_rate)
    json_path = tmp_path / "summary.json"
    report.to_summary_json(json_path, extra={"config_hash": "x"})
    assert json_path.exists()
