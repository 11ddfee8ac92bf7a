"""Federated, hardware-aware neural architecture search on a toy MBConv space."""

from .config import ExperimentConfig, load_config
from .estimator import FDNASClassifier
from .search_space import SearchSpace
from .supernet import CompactNet, DerivedArchitecture, SuperNet

__all__ = ["CompactNet", "DerivedArchitecture", "ExperimentConfig", "FDNASClassifier", "SearchSpace", "SuperNet",
           "load_config"]
__version__ = "0.1.0"
