"""Federated learning simulator with trajectory-influence client valuation.

FedIF scores each participant by the alignment of its (unit-normalized)
model update with the validation-loss gradient at the round-start global
model, min-max normalizes the scores within the round, smooths them into a
per-client global influence and aggregates with weights proportional to it.
Baselines: FedAvg, FedProx, Krum and Monte-Carlo Shapley reweighting.
"""
from .config import SimConfig, load_config
from .conv import ConvSpec
from .kernels import BACKEND
from .nn import ModelSpec
from .simulation import RoundRecord, Simulation, run_simulation

__version__ = "0.1.0"

__all__ = ["BACKEND", "ConvSpec", "ModelSpec", "RoundRecord", "SimConfig", "Simulation", "load_config", "run_simulation"]
