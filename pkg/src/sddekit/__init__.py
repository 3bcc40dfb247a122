"""Simulation and verification toolkit for delay SDEs with negative feedback."""
__version__ = "0.1.0"

from .paths import CadlagPath, Segment, modulus_omega, modulus_varpi, segment_at
from .noise import JumpLaw, RegulatedLevySpec, sample_levy
from .solver import SolverConfig, Trajectory, integrate_sdde, integrate_ensemble, picard_iterate
from .models import FeedbackSpec, NoiseCoupling, Nonlinearity, PiecewiseConstant

__all__ = ["CadlagPath", "Segment", "modulus_omega", "modulus_varpi", "segment_at", "JumpLaw",
           "RegulatedLevySpec", "sample_levy", "SolverConfig", "Trajectory", "integrate_sdde",
           "integrate_ensemble", "picard_iterate", "FeedbackSpec", "NoiseCoupling", "Nonlinearity",
           "PiecewiseConstant"]
