"""Communication-free multi-agent control of linear systems with choice-indexed targets.

Each agent privately picks one of several choices at the initial time and
applies a pre-agreed control indexed by that choice; the terminal state must
hit (or approach) the target assigned to the resulting choice tuple.
"""

__version__ = "0.1.0"

from .errors import (
    ChoiceCtlError,
    CompatibilityError,
    ConfigurationError,
    ConsistencyError,
    ControllabilityError,
    DimensionError,
    DomainError,
    HorizonGuardError,
    NumericError,
    SingularityError,
)
from .model import (
    GeneratorSet,
    LinearSystem,
    Scenario,
    TargetTensor,
    compatibility_residual,
    generator_set,
    is_compatible,
    reconstruct,
)
from .numerics import gramian, mat_exp
from .openloop import OpenLoopLaw, synthesize
from .feedback import FeedbackLaw, HybridController, make_hybrid
from .approach import ApproachLaw, predict_terminal_large_f, predict_terminal_sum
from .sim import EnsembleReport, NoiseConfig, Trajectory, run_ensemble, simulate

__all__ = [
    "ApproachLaw",
    "ChoiceCtlError",
    "CompatibilityError",
    "ConfigurationError",
    "ConsistencyError",
    "ControllabilityError",
    "DimensionError",
    "DomainError",
    "EnsembleReport",
    "FeedbackLaw",
    "GeneratorSet",
    "HorizonGuardError",
    "HybridController",
    "LinearSystem",
    "NoiseConfig",
    "NumericError",
    "OpenLoopLaw",
    "Scenario",
    "SingularityError",
    "TargetTensor",
    "Trajectory",
    "compatibility_residual",
    "generator_set",
    "gramian",
    "is_compatible",
    "make_hybrid",
    "mat_exp",
    "predict_terminal_large_f",
    "predict_terminal_sum",
    "reconstruct",
    "run_ensemble",
    "simulate",
    "synthesize",
]
