"""Evolution families generated by time-dependent elliptic operators with rough-in-time coefficients."""

import os as _os

# EVOFAM_THREADS caps BLAS threads; effective only if numpy is not yet imported.
if "EVOFAM_THREADS" in _os.environ:
    for _var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS"):
        _os.environ.setdefault(_var, _os.environ["EVOFAM_THREADS"])

from .errors import (
    DivergenceError,
    EvofamError,
    InvalidArgument,
    InvalidWeight,
    NumericFailure,
    PreconditionViolated,
)
from .operator_spec import (
    CoefficientPath,
    EllipticityCertificate,
    OperatorSpec,
    check_legendre_hadamard,
    check_uniform_ellipticity,
    full_symbol,
    heat_spec,
    noncommuting_example,
    principal_symbol,
    symbol,
)
from .symbol_propagator import (
    ForcingPath,
    PicardConfig,
    PicardResult,
    PropagationResult,
    gronwall_envelope_margin,
    mihlin_decay_scan,
    picard_solve,
    propagate_forced,
    propagate_homogeneous,
    propagate_tabulated,
    symbol_derivative,
)
from .multiplier_checks import (
    MihlinTable,
    ResolventScan,
    SectorGeometry,
    inverse_norm_bound_check,
    mihlin_constant_scan,
    resolvent_bound_scan,
    resolvent_multiplier,
    sector_geometry,
)
from .evolution_family import (
    EvolutionOperator,
    GridField,
    SpaceTimeField,
    check_adjoint_duality,
    check_cocycle,
    check_commutation_with_A0,
    check_derivative_commutation,
    check_generator_relations,
    decay_exponent_fit,
    implicit_euler,
)
from .weighted_norms import ApEstimate, WeightSpec, ap_constant, consistency_probe, weighted_norm
from .mreg_lab import (
    kernel_operator_apply,
    lambda_sweep,
    solve_divergence,
    solve_ivp,
    solve_nondivergence,
    square_function_ratio,
)
from .config import Config
from .corpus import corpus

__version__ = "0.1.0"
