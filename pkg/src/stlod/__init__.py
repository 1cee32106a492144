"""Localized space-time multiscale method for parabolic problems with rapidly oscillating coefficients."""
from .coefficient import Coefficient, generate_random, value_on
from .corrector import CorrectorOperator, apply_corrector, assemble_corrector_operator, compute_basis_corrector
from .discretization import Discretization
from .errors import FingerprintMismatch, InvalidArgumentError, NumericalFailure
from .grid import build_mesh_pair, build_temporal_grid, build_uniform_mesh, patch
from .solver import (
    CoarseSystem,
    assemble_coarse_system,
    reconstruct_fine,
    solve_multi_rhs,
    solve_multiscale,
    solve_reference_fine,
)

__version__ = "0.1.0"
