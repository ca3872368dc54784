"""Learning on triangle meshes with differentiable Poisson solves."""

from .mesh_io import MeshDiagnostics, MeshError, TriMesh, load_obj, save_obj, validate
from .network import NetworkConfig, PoissonNet, load_checkpoint, prepare_mesh, save_checkpoint
from .operators import DifferentialOperators, build_operators, divergence_rhs, face_gradient
from .poisson import (
    FactorizationError,
    PoissonFactorization,
    adjoint_solve,
    factorize,
    greens_column,
    solve_centered,
)

__version__ = "0.1.0"

__all__ = [
    "DifferentialOperators",
    "FactorizationError",
    "MeshDiagnostics",
    "MeshError",
    "NetworkConfig",
    "PoissonFactorization",
    "PoissonNet",
    "TriMesh",
    "adjoint_solve",
    "build_operators",
    "divergence_rhs",
    "face_gradient",
    "factorize",
    "greens_column",
    "load_checkpoint",
    "load_obj",
    "prepare_mesh",
    "save_checkpoint",
    "save_obj",
    "solve_centered",
    "validate",
]
