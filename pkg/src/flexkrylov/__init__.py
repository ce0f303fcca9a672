"""
flexkrylov: conjugate-gradient type methods with variable SPD
preconditioning, worst-case preconditioner constructions, and the audit
suites that check the convergence theory numerically.

Modules
-------
linalg
    Symmetric operators, metric inner products, a Jacobi eigensolver.
cone
    Cones of SPD images and explicit SPD maps between vectors.
solvers
    The memory-policy iteration, the two-term PCG loop and trace audits.
preconditioners
    Fixed, worst-case, inner-CG and two-grid preconditioners.
experiments
    Seeded experiment harness with CSV/SVG output.
"""
from .cone import cone_membership, construct_spd_map, metric_sin, spectral_bound
from .exceptions import (BreakdownError, DimensionExhausted, IndefiniteError, InputError,
                         NumericalError, PreconditionerError)
from .linalg import (Metric, SymmetricOperator, angle, dense_operator, diagonal_operator,
                     generalized_condition, laplacian_1d, sym_eig, weighted_inner)
from .preconditioners import (adversarial, build_two_grid, fixed_spd, inner_cg, random_cone,
                              two_grid_apply, two_grid_preconditioner)
from .solvers import MemoryPolicy, SolveTrace, StoppingRule, solve_alg1, solve_flexible

__version__ = "0.1.0"
