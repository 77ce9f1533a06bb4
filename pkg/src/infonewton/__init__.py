"""Newton-type samplers in probability space: Gaussian-family flows, particle
methods with affine and kernel Newton directions, and 1D grid density flows."""

from .core import (
    CapacityError,
    DegenerateBandwidthError,
    DirectionField,
    InfoNewtonError,
    InsufficientSupportError,
    InvalidConfigError,
    InvalidInputError,
    InvalidModelError,
    ParticleEnsemble,
    SolverStateError,
    StepTooLargeError,
    TargetModel,
    UnsupportedError,
    init_ensemble,
    keyed_rng,
    validate_model,
)
from .newton_affine import affine_direction, solve_affine_direction
from .newton_kernel import kernel_direction
from .samplers import SamplerConfig, Trajectory, run
from .score import KernelSpec, estimate_score, median_bandwidth

__version__ = "0.1.0"
