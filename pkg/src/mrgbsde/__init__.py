"""Mean-reflected G-BSDE numerical laboratory.

Modules:

- ``engine``: G-expectation by monotone finite differences, volatility tree oracle
- ``gbsde``: backward solver for G-BSDEs with quadratic generators
- ``bmo``: BMO-type diagnostics on the volatility tree
- ``skorokhod``: forward and backward Skorokhod problems with nonlinear boundaries
- ``reflection``: mean-reflected solver (bounded and unbounded terminal data)
- ``cli``: config-driven experiment harness
"""

from .engine import FieldSolution, GridSpec, Payoff, VolatilityBand, VolatilityTree, g_expectation, solve_g_heat
from .errors import MRGBSDEError
from .gbsde import GeneratorSpec, apriori_bound_check, solve_gbsde
from .reflection import LossFunction, LossSpec, solve_bounded, solve_unbounded, verify_solution
from .skorokhod import AffineBoundary, BoundaryPair, SoftBoundary, solve_bsp, solve_sp

__version__ = "0.1.0"

__all__ = [
    "AffineBoundary",
    "BoundaryPair",
    "FieldSolution",
    "GeneratorSpec",
    "GridSpec",
    "LossFunction",
    "LossSpec",
    "MRGBSDEError",
    "Payoff",
    "SoftBoundary",
    "VolatilityBand",
    "VolatilityTree",
    "apriori_bound_check",
    "g_expectation",
    "solve_bounded",
    "solve_g_heat",
    "solve_gbsde",
    "solve_sp",
    "solve_bsp",
    "solve_unbounded",
    "verify_solution",
]
