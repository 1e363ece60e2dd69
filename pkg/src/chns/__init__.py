"""Adaptive-octree finite-element solver for two-phase Cahn-Hilliard
Navier-Stokes flow with a projection time scheme and residual-based
variational multiscale stabilization."""

from .errors import ChnsError, ConfigError, ContractError, SolveError
from .fem import ElementGeometry, ShapeTable, element_metric, hanging_face_weights, shape_table
from .linalg import (CompressedSparseMatrix, SolverConfig, bicgstab_solve,
                     cg_solve, newton_solve, spmv)
from .nodetable import NodeTable
from .octree import (COARSEN, KEEP, REFINE, Octant, Octree, construct_tree,
                     enforce_2to1_balance, is_balanced, load_tree,
                     refine_and_coarsen, uniform_tree)

__all__ = [
    "ChnsError", "ConfigError", "ContractError", "SolveError",
    "ElementGeometry", "ShapeTable", "element_metric", "hanging_face_weights",
    "shape_table",
    "CompressedSparseMatrix", "SolverConfig", "bicgstab_solve", "cg_solve",
    "newton_solve", "spmv",
    "NodeTable",
    "COARSEN", "KEEP", "REFINE", "Octant", "Octree", "construct_tree",
    "enforce_2to1_balance", "is_balanced", "load_tree", "refine_and_coarsen",
    "uniform_tree",
]

__version__ = "0.1.0"
