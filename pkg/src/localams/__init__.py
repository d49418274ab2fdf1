"""Local AMSGrad with shared adaptive learning rates: simulator and verification suite."""

from .optimizers import ALGORITHMS, NAIVE, SGD, SHARED, Hyperparams
from .simulator import ExperimentConfig, MetricsLog, config_from_dict, run_experiment, sweep

__all__ = [
    "ALGORITHMS", "NAIVE", "SGD", "SHARED", "Hyperparams",
    "ExperimentConfig", "MetricsLog", "config_from_dict", "run_experiment", "sweep",
]
__version__ = "0.1.0"
