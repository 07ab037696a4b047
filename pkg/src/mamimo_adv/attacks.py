"""L-infinity gradient attacks against a trained per-cell power model.

All methods perturb the raw position input x within ||x_adv - x||_inf <= eps
and try to push the predicted power sum of the attacked cell over the budget.
The attack loss is the sum of the first K (denormalized) outputs. sign(0) is
0 everywhere, so coordinates with no ascent direction stay untouched.

fgsm     one step:  x + eps * sign(grad)
pgd      Q steps of size alpha, each clipped back to the eps-ball
mifgsm   I steps of size eps/I following an L1-normalized gradient momentum
         with decay mu; no per-step clipping
random   x +- eps per coordinate with probability 1/2 (sign of white noise)
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field

import numpy as np

from .nn import MlpModel

METHODS = ("fgsm", "pgd", "mifgsm", "random")


@dataclass
class AttackConfig:
    method: str = "fgsm"
    epsilon: float = 0.0
    alpha: float = 0.01          # pgd step, meters
    q_iters: int = 40            # pgd iterations
    mu: float = 0.1              # mifgsm momentum decay
    i_iters: int = 10            # mifgsm iterations
    rng_seed: int = 0

    def __post_init__(self):
        if self.method not in METHODS:
            raise ValueError(f"unknown attack method {self.method!r}")
        if self.epsilon < 0:
            raise ValueError("epsilon must be >= 0")
        if self.alpha <= 0:
            raise ValueError("alpha must be > 0")
        if self.q_iters < 1 or self.i_iters < 1:
            raise ValueError("iteration counts must be >= 1")
        if not 0.0 <= self.mu <= 1.0:
            raise ValueError("mu must be in [0, 1]")

    @property
    def beta(self) -> float:
        return self.epsilon / self.i_iters


def epsilon_from_distance(d_eps: float) -> float:
    """Perturbation magnitude for a physical displacement d_eps = sqrt(2)*eps."""
    if d_eps < 0:
        raise ValueError("d_eps must be >= 0")
    return d_eps / math.sqrt(2.0)


@dataclass
class AdversarialSample:
    cell: int
    x_t: np.ndarray
    x_adv: np.ndarray
    clean_powers: np.ndarray     # (K,) mW
    adv_powers: np.ndarray       # (K,) mW
    feasible: bool


@dataclass
class AttackOutcome:
    """Batched attack result; one row per input sample."""

    method: str
    cell: int
    epsilon: float
    x_t: np.ndarray              # (N, D)
    x_adv: np.ndarray            # (N, D)
    clean_powers: np.ndarray     # (N, K)
    adv_powers: np.ndarray       # (N, K)
    feasible: np.ndarray         # (N,) bool, per the adv power sums
    p_max: float

    def __len__(self):
        return self.x_t.shape[0]

    @property
    def clean_sums(self):
        return self.clean_powers.sum(axis=1)

    @property
    def adv_sums(self):
        return self.adv_powers.sum(axis=1)

    @property
    def linf(self):
        return np.abs(self.x_adv - self.x_t).max(axis=1)

    @property
    def success_rate(self) -> float:
        return float(np.mean(~self.feasible))

    def sample(self, i: int) -> AdversarialSample:
        return AdversarialSample(cell=self.cell, x_t=self.x_t[i], x_adv=self.x_adv[i],
                                 clean_powers=self.clean_powers[i],
                                 adv_powers=self.adv_powers[i],
                                 feasible=bool(self.feasible[i]))


def attack_loss_gradient(model: MlpModel, x) -> np.ndarray:
    """Gradient of the denormalized power sum of the attacked cell w.r.t. x."""
    k = max(model.output_dim - 1, 1)
    w = np.zeros(model.output_dim)
    w[:k] = model.output_scale
    return model.input_gradient(x, w)


def _powers(model, x):
    k = max(model.output_dim - 1, 1)
    return model.predict_powers(x)[..., :k]


def _finish(model, method, cell, eps, x_t, x_adv, p_max):
    p_max = model.output_scale if p_max is None else p_max
    clean = np.atleast_2d(_powers(model, x_t))
    adv = np.atleast_2d(_powers(model, x_adv))
    feasible = adv.sum(axis=1) <= p_max
    return AttackOutcome(method=method, cell=cell, epsilon=eps,
                         x_t=np.atleast_2d(x_t), x_adv=np.atleast_2d(x_adv),
                         clean_powers=clean, adv_powers=adv,
                         feasible=feasible, p_max=p_max)


def attack_fgsm(model: MlpModel, x_t, cell: int, epsilon: float,
                p_max: float | None = None) -> AttackOutcome:
    x_t = np.asarray(x_t, dtype=float)
    eta = epsilon * np.sign(attack_loss_gradient(model, x_t))
    return _finish(model, "fgsm", cell, epsilon, x_t, x_t + eta, p_max)


def attack_pgd(model: MlpModel, x_t, cell: int, cfg: AttackConfig,
               p_max: float | None = None) -> AttackOutcome:
    x_t = np.asarray(x_t, dtype=float)
    lo, hi = x_t - cfg.epsilon, x_t + cfg.epsilon
    x = x_t.copy()
    for _ in range(cfg.q_iters):
        x = x + cfg.alpha * np.sign(attack_loss_gradient(model, x))
        x = np.clip(x, lo, hi)
    return _finish(model, "pgd", cell, cfg.epsilon, x_t, x, p_max)


def attack_mifgsm(model: MlpModel, x_t, cell: int, cfg: AttackConfig,
                  p_max: float | None = None) -> AttackOutcome:
    x_t = np.asarray(x_t, dtype=float)
    x = x_t.copy()
    momentum = np.zeros_like(np.atleast_2d(x_t), dtype=float)
    single = x_t.ndim == 1
    for _ in range(cfg.i_iters):
        g = np.atleast_2d(attack_loss_gradient(model, x))
        l1 = np.abs(g).sum(axis=1, keepdims=True)
        nonzero = l1 > 0
        # A zero-gradient iterate keeps the previous momentum unchanged.
        momentum = np.where(nonzero, cfg.mu * momentum + g / np.where(nonzero, l1, 1.0),
                            momentum)
        step = cfg.beta * np.sign(momentum)
        x = x + (step[0] if single else step)
    return _finish(model, "mifgsm", cell, cfg.epsilon, x_t, x, p_max)


def attack_random(model: MlpModel, x_t, cell: int, epsilon: float,
                  rng: np.random.Generator, p_max: float | None = None) -> AttackOutcome:
    """Baseline: displace every coordinate by +-eps along white-noise signs."""
    x_t = np.asarray(x_t, dtype=float)
    x_adv = x_t + epsilon * np.sign(rng.standard_normal(x_t.shape))
    return _finish(model, "random", cell, epsilon, x_t, x_adv, p_max)


def run_attack(model: MlpModel, x_t, cell: int, cfg: AttackConfig,
               rng: np.random.Generator | None = None,
               p_max: float | None = None) -> AttackOutcome:
    """Dispatch one configured attack method."""
    if cfg.method == "fgsm":
        return attack_fgsm(model, x_t, cell, cfg.epsilon, p_max)
    if cfg.method == "pgd":
        return attack_pgd(model, x_t, cell, cfg, p_max)
    if cfg.method == "mifgsm":
        return attack_mifgsm(model, x_t, cell, cfg, p_max)
    if rng is None:
        rng = np.random.default_rng(cfg.rng_seed)
    return attack_random(model, x_t, cell, cfg.epsilon, rng, p_max)


@dataclass
class AttackReport:
    """Collection of attack outcomes, serializable to CSV and summary JSON."""

    outcomes: list = field(default_factory=list)

    def add(self, outcome: AttackOutcome):
        self.outcomes.append(outcome)

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["sample", "cell", "method", "epsilon",
                             "clean_sum_mw", "adv_sum_mw", "feasible", "linf_m"])
            for out in self.outcomes:
                cs, asum, linf = out.clean_sums, out.adv_sums, out.linf
                for i in range(len(out)):
                    writer.writerow([i, out.cell, out.method, repr(out.epsilon),
                                     repr(cs[i]), repr(asum[i]),
                                     int(out.feasible[i]), repr(linf[i])])

    def aggregate_rates(self) -> dict:
        """Success rates keyed by method, then epsilon, then cell plus 'all'."""
        rates: dict = {}
        totals: dict = {}
        for out in self.outcomes:
            m = rates.setdefault(out.method, {}).setdefault(repr(out.epsilon), {})
            m[str(out.cell)] = out.success_rate
            key = (out.method, repr(out.epsilon))
            hit, n = totals.get(key, (0, 0))
            totals[key] = (hit + int(np.sum(~out.feasible)), n + len(out))
        for (method, eps), (hit, n) in totals.items():
            rates[method][eps]["all"] = hit / n if n else 0.0
        return rates

    def to_summary_json(self, path, extra: dict | None = None) -> None:
        doc = {"rates": self.aggregate_rates()}
        if extra:
            doc.update(extra)
        with open(path, "w") as fh:
            json.dump(doc, fh, indent=2, sort_keys=True)
            fh.write("\n")
