"""Shared sparse factorization of the Laplacian and centered Poisson solves."""

from __future__ import annotations

import logging
import warnings
from dataclasses import dataclass, field

import numpy as np
from scipy import sparse
from scipy.sparse import csgraph
from scipy.sparse.linalg import splu

logger = logging.getLogger(__name__)

DEFAULT_SHIFT_SCALE = 1e-8
DEFAULT_REFINE = 1

# Incremented on every successful factorization; lets tests assert reuse.
FACTORIZATION_COUNT = 0


class FactorizationError(RuntimeError):
    pass


class NearSingularWarning(RuntimeWarning):
    pass


@dataclass(frozen=True)
class PoissonFactorization:
    """Factor of ``L + shift * I`` plus the data needed for centering.

    ``refine`` residual-correction steps against the unshifted ``L`` remove
    the bias the diagonal shift introduces; each step shrinks the error by
    roughly ``shift / lambda_2``.
    """

    lu: object
    laplacian: sparse.csr_matrix
    shift: float
    mass_vertex: np.ndarray
    total_mass: float
    refine: int = DEFAULT_REFINE
    stats: dict = field(default_factory=dict, compare=False)

    @property
    def n(self) -> int:
        return len(self.mass_vertex)

    def _apply(self, b):
        """Symmetric approximate inverse of ``L`` on mean-free inputs."""
        u = self.lu.solve(b)
        for _ in range(self.refine):
            u = u + self.lu.solve(b - self.laplacian @ u)
        return u

    def center(self, u):
        return u - np.outer(np.ones(self.n), self.mass_vertex @ u / self.total_mass).reshape(u.shape)

    def center_adjoint(self, g):
        """Transpose of :meth:`center`."""
        return g - np.outer(self.mass_vertex / self.total_mass, g.sum(axis=0)).reshape(g.shape)


def factorize(L, mass_vertex, shift_scale: float = DEFAULT_SHIFT_SCALE, refine: int = DEFAULT_REFINE):
    """Factorize ``L + eps I`` with ``eps = shift_scale * trace(L) / |V|``.

    Raises
    ------
    FactorizationError
        If the mesh has more than one connected component, or a pivot of the
        factorization is not positive (reported with its position).
    """
    global FACTORIZATION_COUNT
    L = sparse.csr_matrix(L)
    n = L.shape[0]
    if L.shape != (n, n):
        raise ValueError("Laplacian must be square")
    mass_vertex = np.asarray(mass_vertex, dtype=np.float64)
    if mass_vertex.shape != (n,):
        raise ValueError("mass_vertex length does not match the Laplacian")
    ncomp, _ = csgraph.connected_components(L, directed=False)
    if ncomp > 1:
        raise FactorizationError(
            f"mesh has {ncomp} connected components; the Poisson system needs exactly one"
        )
    shift = shift_scale * L.diagonal().sum() / n
    A = (L + shift * sparse.identity(n, format="csr")).tocsc()
    try:
        lu = splu(
            A,
            permc_spec="MMD_AT_PLUS_A",
            diag_pivot_thresh=0.0,
            options=dict(SymmetricMode=True),
        )
    except RuntimeError as exc:
        raise FactorizationError(f"factorization failed: {exc}") from None
    pivots = lu.U.diagonal()
    scale = np.abs(pivots).max()
    bad = np.flatnonzero(pivots <= 0)
    if len(bad):
        raise FactorizationError(
            f"matrix not positive definite: leading minor {int(bad[0]) + 1} "
            f"(permuted order) has pivot {pivots[bad[0]]:.3e}"
        )
    if pivots.min() < 1e-12 * scale:
        warnings.warn(
            f"near-singular factorization: smallest pivot {pivots.min():.3e}",
            NearSingularWarning,
            stacklevel=2,
        )
    FACTORIZATION_COUNT += 1
    return PoissonFactorization(
        lu=lu,
        laplacian=L,
        shift=float(shift),
        mass_vertex=mass_vertex,
        total_mass=float(mass_vertex.sum()),
        refine=refine,
        stats={"factor_nnz": int(lu.L.nnz + lu.U.nnz)},
    )


def _as_channels(x, n, what):
    x = np.asarray(x, dtype=np.float64)
    if x.shape[0] != n or x.ndim > 2:
        raise ValueError(f"{what} must have shape ({n},) or ({n}, C), got {x.shape}")
    if not np.all(np.isfinite(x)):
        raise ValueError(f"{what} contains non-finite values")
    return x


def solve_centered(fact: PoissonFactorization, rhs):
    """Solve ``L u = rhs`` per channel and remove the mass-weighted mean of ``u``."""
    rhs = _as_channels(rhs, fact.n, "rhs")
    # constants are annihilated by the centering anyway; dropping them first
    # keeps the shifted solve from amplifying them by 1/shift
    return fact.center(fact._apply(rhs - rhs.mean(axis=0)))


def adjoint_solve(fact: PoissonFactorization, cotangent):
    """Vector-Jacobian product of :func:`solve_centered` with respect to ``rhs``.

    The centering is applied transposed to the cotangent before the
    (symmetric) solve, so the result is the exact gradient including its
    component along constant vectors.
    """
    g = _as_channels(cotangent, fact.n, "cotangent")
    out = fact._apply(fact.center_adjoint(g))
    return out - out.mean(axis=0)


def greens_column(fact: PoissonFactorization, j: int):
    """Centered Green's function for a unit source at vertex ``j``.

    The source is balanced by the mass distribution so that the system is
    compatible: ``rhs = e_j - m / sum(m)``.
    """
    if not 0 <= j < fact.n:
        raise IndexError(f"vertex {j} out of range [0, {fact.n})")
    rhs = -fact.mass_vertex / fact.total_mass
    rhs[j] += 1.0
    return solve_centered(fact, rhs)
