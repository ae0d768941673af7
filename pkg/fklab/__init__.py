# Feynman-Kac laboratory package
"""
Monte Carlo experiments on Feynman-Kac kernels across fractal boundaries.

Modules:
- geometry: prefractal boundaries, distance/shell queries, regularity fits
- stochastic: keyed substreams, Brownian paths and bridges, walk-on-spheres
- potential: singular and truncated potentials, path functionals, Γ_t quadrature
- estimators: kernel, crossing-mass, occupation and exponent estimates
- config / records / experiments / acceptance / report: the harness
"""

from fklab.errors import (
    FKLabError,
    ArgumentError,
    ConfigValidationError,
    ResolutionError,
)
from fklab.geometry import (
    DomainSpec,
    Orientation,
    PrefractalBoundary,
    koch_prefractal,
    line_boundary,
    slit_boundary,
    distance_to_boundary,
    contains_interior,
    minkowski_fit,
    regularity_probe,
)
from fklab.stochastic import RngKey, substream, sample_path, sample_bridge, walk_on_spheres
from fklab.potential import PotentialSpec, fk_functional, fk_weight, gamma_t, convolve_potential_gamma
from fklab.estimators import Estimate, FitResult, kernel_bridge_estimate, crossing_mass_estimate
from fklab.config import ExperimentConfig, load_config, parse_config, serialize_config
from fklab.records import RunRecord
from fklab.experiments import run_experiment
from fklab.acceptance import AcceptanceReport, acceptance_suite

__all__ = [
    'FKLabError',
    'ArgumentError',
    'ConfigValidationError',
    'ResolutionError',
    'DomainSpec',
    'Orientation',
    'PrefractalBoundary',
    'koch_prefractal',
    'line_boundary',
    'slit_boundary',
    'distance_to_boundary',
    'contains_interior',
    'minkowski_fit',
    'regularity_probe',
    'RngKey',
    'substream',
    'sample_path',
    'sample_bridge',
    'walk_on_spheres',
    'PotentialSpec',
    'fk_functional',
    'fk_weight',
    'gamma_t',
    'convolve_potential_gamma',
    'Estimate',
    'FitResult',
    'kernel_bridge_estimate',
    'crossing_mass_estimate',
    'ExperimentConfig',
    'load_config',
    'parse_config',
    'serialize_config',
    'RunRecord',
    'run_experiment',
    'AcceptanceReport',
    'acceptance_suite',
]
