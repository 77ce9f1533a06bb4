"""Targets, datasets, metrics, experiment runner and CLI."""

from .blr import BLRDataset, build_blr_posterior, load_csv_dataset, predictive_metrics, synthetic_dataset
from .experiment import ExperimentConfig, build_config, load_config, preset_config, run_experiment
from .metrics import EnergyDistance, energy_distance, moment_errors
from .targets import TARGETS, build_target
