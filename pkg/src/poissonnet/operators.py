"""Intrinsic differential operators on triangle meshes.

Conventions
-----------
* Gradients live on faces, expressed in a per-face orthonormal frame
  ``{u1, u2}``. The sparse gradient has shape ``(2F, V)`` with rows ``2t`` and
  ``2t + 1`` holding the ``u1`` and ``u2`` components of face ``t``.
* The cotangent Laplacian is positive semi-definite and satisfies
  ``L = G^T M_F G`` where ``M_F`` repeats each face area twice.
* A complex face field ``a + ib`` means ``a u1 + b u2``.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import sparse

from .mesh_io import MeshError, TriMesh


@dataclass(frozen=True)
class TangentFrames:
    u1: np.ndarray
    u2: np.ndarray
    n: np.ndarray

    def rotated(self, angles) -> TangentFrames:
        """Rotate each face's in-plane basis by ``angles[t]`` about its normal."""
        c = np.cos(angles)[:, None]
        s = np.sin(angles)[:, None]
        return TangentFrames(c * self.u1 + s * self.u2, -s * self.u1 + c * self.u2, self.n)


@dataclass(frozen=True)
class DifferentialOperators:
    frames: TangentFrames
    grad: sparse.csr_matrix
    laplacian: sparse.csr_matrix
    mass_vertex: np.ndarray
    mass_face: np.ndarray
    face_areas: np.ndarray
    faces: np.ndarray

    @property
    def n_vertices(self) -> int:
        return self.grad.shape[1]

    @property
    def n_faces(self) -> int:
        return len(self.face_areas)

    @property
    def divergence(self) -> sparse.csr_matrix:
        """``G^T M_F`` mapping interleaved face vectors to vertex scalars."""
        div = self.__dict__.get("_div")
        if div is None:
            div = (self.grad.T @ sparse.diags(self.mass_face)).tocsr()
            object.__setattr__(self, "_div", div)
        return div

    @property
    def face_average(self) -> sparse.csr_matrix:
        """Averages the three vertex values of each face, shape ``(F, V)``."""
        avg = self.__dict__.get("_avg")
        if avg is None:
            F = self.n_faces
            rows = np.repeat(np.arange(F), 3)
            avg = sparse.csr_matrix(
                (np.full(3 * F, 1.0 / 3.0), (rows, self.faces.ravel())),
                shape=(F, self.n_vertices),
            )
            object.__setattr__(self, "_avg", avg)
        return avg

    def mass_weighted_mean(self, s):
        s = np.asarray(s)
        return self.mass_vertex @ s / self.mass_vertex.sum()


def _check_nondegenerate(mesh: TriMesh):
    areas = mesh.face_areas()
    bad = np.flatnonzero(areas <= max(mesh.area_epsilon(), 0.0))
    if len(bad):
        raise MeshError(f"degenerate face(s) {bad[:10].tolist()} (area <= epsilon)")
    return areas


def build_tangent_frames(mesh: TriMesh) -> TangentFrames:
    """Per-face frame: ``u1`` along the first edge, ``n`` the unit normal, ``u2 = n x u1``."""
    _check_nondegenerate(mesh)
    v, f = mesh.vertices, mesh.faces
    e1 = v[f[:, 1]] - v[f[:, 0]]
    e2 = v[f[:, 2]] - v[f[:, 0]]
    n = np.cross(e1, e2)
    n /= np.linalg.norm(n, axis=1, keepdims=True)
    u1 = e1 / np.linalg.norm(e1, axis=1, keepdims=True)
    u2 = np.cross(n, u1)
    return TangentFrames(u1, u2, n)


def build_gradient(mesh: TriMesh, frames: TangentFrames) -> sparse.csr_matrix:
    """Sparse PL gradient, shape ``(2F, V)``, six nonzeros per face row pair."""
    areas = _check_nondegenerate(mesh)
    v, f = mesh.vertices, mesh.faces
    F = len(f)
    rows, cols, vals = [], [], []
    for corner in range(3):
        j = f[:, (corner + 1) % 3]
        k = f[:, (corner + 2) % 3]
        # gradient of the hat function at this corner is perpendicular to the opposite edge
        g = np.cross(frames.n, v[k] - v[j]) / (2 * areas[:, None])
        for comp, basis in enumerate((frames.u1, frames.u2)):
            rows.append(2 * np.arange(F) + comp)
            cols.append(f[:, corner])
            vals.append(np.einsum("ij,ij->i", g, basis))
    G = sparse.csr_matrix(
        (np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))),
        shape=(2 * F, mesh.n_vertices),
    )
    G.sum_duplicates()
    return G


def build_cotan_laplacian(mesh: TriMesh) -> sparse.csr_matrix:
    """Positive semi-definite cotangent Laplacian with ``L_ij = -(cot a + cot b) / 2``."""
    _check_nondegenerate(mesh)
    v, f = mesh.vertices, mesh.faces
    n = mesh.n_vertices
    rows, cols, vals = [], [], []
    for corner in range(3):
        i = f[:, (corner + 1) % 3]
        j = f[:, (corner + 2) % 3]
        a = v[i] - v[f[:, corner]]
        b = v[j] - v[f[:, corner]]
        cot = np.einsum("ij,ij->i", a, b) / np.linalg.norm(np.cross(a, b), axis=1)
        w = -0.5 * cot
        rows += [i, j]
        cols += [j, i]
        vals += [w, w]
    rows = np.concatenate(rows)
    cols = np.concatenate(cols)
    vals = np.concatenate(vals)
    off = sparse.coo_matrix((vals, (rows, cols)), shape=(n, n)).tocsr()
    off.sum_duplicates()
    diag = -np.asarray(off.sum(axis=1)).ravel()
    L = (off + sparse.diags(diag)).tocsr()
    L.sum_duplicates()
    L.sort_indices()
    return L


def build_mass_matrices(mesh: TriMesh):
    """Barycentric lumped vertex masses, duplicated face areas, and face areas."""
    areas = mesh.face_areas()
    mass_vertex = np.bincount(
        mesh.faces.ravel(), weights=np.repeat(areas / 3.0, 3), minlength=mesh.n_vertices
    )
    return mass_vertex, np.repeat(areas, 2), areas


def build_operators(mesh: TriMesh, frames: TangentFrames | None = None) -> DifferentialOperators:
    if frames is None:
        frames = build_tangent_frames(mesh)
    mv, mf, areas = build_mass_matrices(mesh)
    return DifferentialOperators(
        frames=frames,
        grad=build_gradient(mesh, frames),
        laplacian=build_cotan_laplacian(mesh),
        mass_vertex=mv,
        mass_face=mf,
        face_areas=areas,
        faces=mesh.faces,
    )


def interleave(f) -> np.ndarray:
    """Complex ``(F, C)`` field to interleaved real ``(2F, C)``."""
    f = np.asarray(f)
    out = np.empty((2 * f.shape[0],) + f.shape[1:])
    out[0::2] = f.real
    out[1::2] = f.imag
    return out


def deinterleave(x) -> np.ndarray:
    x = np.asarray(x)
    return x[0::2] + 1j * x[1::2]


def face_gradient(ops: DifferentialOperators, s) -> np.ndarray:
    """Gradient of vertex field ``s`` as complex per-face coefficients."""
    return deinterleave(ops.grad @ np.asarray(s, dtype=np.float64))


def divergence_rhs(ops: DifferentialOperators, f) -> np.ndarray:
    """Right-hand side ``G^T M_F f`` of the Poisson system, per channel."""
    f = np.asarray(f)
    if f.shape[0] != ops.n_faces:
        raise ValueError(f"face field has {f.shape[0]} rows, mesh has {ops.n_faces} faces")
    return ops.divergence @ interleave(f)
