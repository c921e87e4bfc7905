"""Quasi-sure stochastic analysis on simulated paths.

Pathwise calculus that does not depend on a reference measure, separable
diffusion coefficients, empirical martingale measures, aggregation across
mutually singular measures, and uncertain-volatility superhedging.
"""

from .errors import InternalError, InvalidArgument, InvalidSpec, PartitionViolation, UnsupportedDimension
from .paths import Grid, Path, PathEnsemble, make_grid, path_rng, restrict, sample_brownian
from .pathwise import (
    Integrand,
    MatrixPath,
    girsanov_weights,
    ito_integral,
    ito_residual,
    local_time,
    quadratic_variation,
    qv_density,
)
from .coefficients import (
    SeparableCoefficient,
    build_separable,
    check_generating_class,
    concatenate,
    constant,
    disagreement_time,
    evaluate,
    piecewise,
)
from .measures import MeasureSampler, classify_support, sample_measure, strong_solution, universal_bm, verify_strong_identity
from .aggregation import ProcessFamily, aggregate, aggregate_integral, check_consistency, no_aggregation_demo
from .superhedging import (
    Lattice,
    Payoff,
    black_scholes,
    bsb_fd_price,
    doob_meyer_on_lattice,
    dp_value,
    extract_hedge,
    mc_lower_bound,
    verify_superhedge,
)

__version__ = "0.1.0"
