"""Kronecker-factored Gauss-Newton optimisation for feedforward networks.

The modules build on each other in this order: :mod:`linalg` (dense solves),
:mod:`network` (forward pass, losses, backprop), :mod:`curvature` (exact and
Kronecker-factored curvature), :mod:`optimizer` (updates and damping),
:mod:`data`, :mod:`training` and :mod:`cli`. :mod:`verify` holds the
brute-force oracles used by the test suite.
"""
from .curvature import CurvatureBlocks, GNOperator, compute_blocks, gn_vector_product
from .data import Dataset, gen_curves, gen_digits, load_idx
from .errors import (
    ConfigError,
    ContractError,
    CurvatureBreakdownError,
    DegenerateCurvatureError,
    KFGNError,
    NegativeCurvatureError,
    NumericBreakdownError,
    ParseError,
    SingularMatrixError,
    SizeError,
)
from .estimator import GaussNewtonNetwork
from .network import NetworkSpec, forward, init_params, load_params, save_params
from .optimizer import OptimizerState, SecondOrderOptimizer
from .training import RunLog, TrainConfig, run_training

__version__ = "0.1.0"

__all__ = [
    "ConfigError",
    "ContractError",
    "CurvatureBlocks",
    "CurvatureBreakdownError",
    "Dataset",
    "DegenerateCurvatureError",
    "GNOperator",
    "GaussNewtonNetwork",
    "KFGNError",
    "NegativeCurvatureError",
    "NetworkSpec",
    "NumericBreakdownError",
    "OptimizerState",
    "ParseError",
    "RunLog",
    "SecondOrderOptimizer",
    "SingularMatrixError",
    "SizeError",
    "TrainConfig",
    "compute_blocks",
    "forward",
    "gen_curves",
    "gen_digits",
    "gn_vector_product",
    "init_params",
    "load_idx",
    "load_params",
    "run_training",
    "save_params",
]
