"""Graph-neural surrogates of AC optimal power flow.

Subpackages and modules, bottom-up: :mod:`grid` (networks, admittance,
graph views), :mod:`dataset` (case I/O, instances, splits, normalisation),
:mod:`powerflow` (Newton-Raphson labels), :mod:`residuals` (constraint
residuals, plain and traced), :mod:`autodiff`, :mod:`gnn`,
:mod:`objectives`, :mod:`trainer`, :mod:`diagnostics` and :mod:`cli`.
"""
from .dataset import Dataset, Instance, NormStats, fixture_path, load_case, save_case
from .grid import GridCase, OperatingPoint, build_admittance, build_hetero_graph, to_homogeneous
from .gnn import ModelConfig
from .objectives import DualState, al_loss, mse_loss, vbl_loss
from .powerflow import build_dataset, generate_labeled_instance, nr_solve
from .residuals import equality_residuals, inequality_violations, residual_report, violation_summary
from .trainer import Checkpoint, TrainConfig, TrainLog, evaluate, finetune, steps_to_threshold, train

__version__ = "0.1.0"
