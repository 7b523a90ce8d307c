"""Decentralized block coordinate descent for personalized ReLU MLPs.

Devices each train their own MLP by exact block minimization of a
three-splitting penalty objective and mix parameters with neighbours
weighted by profile similarity. Centralized/isolated BCD and
centralized/decentralized SGD baselines share the same harness.
"""

from dbcd.config import ExperimentConfig, parse_config
from dbcd.estimators import BCDMLPClassifier, DecentralizedBCDClassifier, SGDMLPClassifier
from dbcd.model import AuxState, BcdHyper, LocalDataset, MlpParams, forward
from dbcd.simulator import MetricsLog, run_budgeted_simulation, run_experiment

__version__ = "0.1.0"

__all__ = [
    "AuxState", "BCDMLPClassifier", "BcdHyper", "DecentralizedBCDClassifier", "ExperimentConfig",
    "LocalDataset", "MetricsLog", "MlpParams", "SGDMLPClassifier", "forward", "parse_config",
    "run_budgeted_simulation", "run_experiment",
]
