"""
Discrete JKO schemes for Fokker-Planck, aggregation and Keller-Segel energies,
with per-step checks of L^p, L^inf, BV and Fisher-type estimates.
"""

from .errors import (
    BadExponent,
    BadParameter,
    DimensionError,
    FunctionalUnbounded,
    GridMismatch,
    GridTooLarge,
    JkoFlowError,
    NoConvergence,
    NonPositiveDensity,
    NumericalOverflow,
    ParseError,
    WrongModelClass,
    ZeroMass,
)
from .grid import DensityField, Field, Grid, ScalarField, VectorField, from_function, normalize, uniform
from .functionals import (
    Entropy,
    Functional,
    Interaction,
    KellerSegel,
    LqSmoothing,
    Potential,
    evaluate,
    first_variation,
)
from .ot import TransportResult, exact_ot_1d, sinkhorn
from .jko import JkoConfig, Trajectory, jko_step, oracle_step, run

__version__ = "0.1.0"
