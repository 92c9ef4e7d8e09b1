"""Pairwise image registration by fitting freshly initialised coordinate networks to each pair."""

from .data import DisplacementField, LabelField, ScalarField
from .model import NumericalAbort, RegistrationModel
from .optim import RegistrationResult, RunConfig, register_pair

__all__ = [
    "DisplacementField",
    "LabelField",
    "NumericalAbort",
    "RegistrationModel",
    "RegistrationResult",
    "RunConfig",
    "ScalarField",
    "register_pair",
]
__version__ = "0.1.0"
