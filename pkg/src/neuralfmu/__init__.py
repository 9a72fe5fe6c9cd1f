"""Differentiable FMI-style model runtime and hybrid neural models."""

from .core import Causality, ModelDescription, ModelInstance, ModelKind, Phase, ScalarVariable, Variability, instantiate
from .errors import (
    CapabilityError,
    CausalityError,
    DescriptionError,
    EventError,
    NeuralFMUError,
    ParseError,
    PhaseError,
    SolverError,
    TrainingDivergence,
)
from .odesolve import SolverConfig, Trajectory, solve

__version__ = "0.1.0"

__all__ = [
    "Causality",
    "ModelDescription",
    "ModelInstance",
    "ModelKind",
    "Phase",
    "ScalarVariable",
    "Variability",
    "instantiate",
    "CapabilityError",
    "CausalityError",
    "DescriptionError",
    "EventError",
    "NeuralFMUError",
    "ParseError",
    "PhaseError",
    "SolverError",
    "TrainingDivergence",
    "SolverConfig",
    "Trajectory",
    "solve",
]
