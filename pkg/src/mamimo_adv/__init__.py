"""Adversarial attacks on learned max-product power allocation in massive MIMO."""

from .scenario import NetworkConfig, CellLayout, UePositions, build_geometry, drop_users
from .channel import GainTable, mr_gains_closed_form, monte_carlo_gains
from .oracle import PowerAllocation, sinr, solve_max_product, make_dataset
from .nn import MlpModel, build_model, param_count, train, save_model, load_model
from .attacks import (AttackConfig, AdversarialSample, epsilon_from_distance,
                      attack_fgsm, attack_pgd, attack_mifgsm, attack_random)
from .eval import (ExperimentSpec, SuccessRateTable, ModelSet,
                   filter_clean_feasible, run_whitebox, run_blackbox, report)

__version__ = "0.1.0"
