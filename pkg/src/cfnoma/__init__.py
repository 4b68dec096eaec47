"""Multi-cell cluster-free NOMA scheduling: rate model, AutoGNN, bi-level training and ADMM baselines."""

from .channel import ChannelSet, Dataset, NetworkConfig, make_dataset, sample_channels
from .kernels import BACKEND
from .rates import RateReport, SchedulingDecision, sum_rate

__version__ = "0.1.0"

__all__ = [
    "BACKEND",
    "ChannelSet",
    "Dataset",
    "NetworkConfig",
    "RateReport",
    "SchedulingDecision",
    "make_dataset",
    "sample_channels",
    "sum_rate",
]
