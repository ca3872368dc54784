"""Triangle mesh container, OBJ input/output, diagnostics and perturbations."""

from __future__ import annotations

import json
import logging
import os
from dataclasses import asdict, dataclass, field

import numpy as np
from scipy import sparse
from scipy.sparse import csgraph

logger = logging.getLogger(__name__)

AREA_EPS_FACTOR = 1e-12


class MeshError(ValueError):
    """Raised for malformed meshes or unreadable mesh files."""


@dataclass(frozen=True, eq=False)
class TriMesh:
    """Immutable triangle mesh.

    Parameters
    ----------
    vertices : array_like, shape (n_vertices, 3)
        Vertex positions.
    faces : array_like, shape (n_faces, 3)
        Zero-based vertex indices of each triangle.
    """

    vertices: np.ndarray
    faces: np.ndarray

    def __post_init__(self):
        v = np.array(self.vertices, dtype=np.float64)
        f = np.array(self.faces, dtype=np.int64)
        if f.size == 0:
            f = f.reshape(0, 3)
        if v.ndim != 2 or v.shape[1] != 3:
            raise MeshError(f"vertices must have shape (n, 3), got {v.shape}")
        if f.ndim != 2 or f.shape[1] != 3:
            raise MeshError(f"faces must have shape (m, 3), got {f.shape}")
        if len(f) and (f.min() < 0 or f.max() >= len(v)):
            bad = np.flatnonzero((f < 0).any(1) | (f >= len(v)).any(1))
            raise MeshError(
                f"face index out of range [0, {len(v)}) in face(s) {bad[:10].tolist()}"
            )
        rep = (f[:, 0] == f[:, 1]) | (f[:, 1] == f[:, 2]) | (f[:, 0] == f[:, 2])
        if rep.any():
            raise MeshError(
                f"faces with repeated vertex indices: {np.flatnonzero(rep)[:10].tolist()}"
            )
        v.setflags(write=False)
        f.setflags(write=False)
        object.__setattr__(self, "vertices", v)
        object.__setattr__(self, "faces", f)

    @property
    def n_vertices(self) -> int:
        return len(self.vertices)

    @property
    def n_faces(self) -> int:
        return len(self.faces)

    def face_areas(self) -> np.ndarray:
        v = self.vertices
        f = self.faces
        cr = np.cross(v[f[:, 1]] - v[f[:, 0]], v[f[:, 2]] - v[f[:, 0]])
        return 0.5 * np.linalg.norm(cr, axis=1)

    def area(self) -> float:
        return float(self.face_areas().sum())

    def bbox_diagonal(self) -> float:
        if self.n_vertices == 0:
            return 0.0
        return float(np.linalg.norm(self.vertices.max(0) - self.vertices.min(0)))

    def area_epsilon(self) -> float:
        return AREA_EPS_FACTOR * self.bbox_diagonal() ** 2

    def edges(self) -> np.ndarray:
        """Unique undirected edges as sorted index pairs, shape (n_edges, 2)."""
        f = self.faces
        e = np.concatenate([f[:, [0, 1]], f[:, [1, 2]], f[:, [2, 0]]])
        e.sort(axis=1)
        return np.unique(e, axis=0)

    def transformed(self, matrix=None, scale=1.0, translation=None) -> TriMesh:
        """Return ``scale * (R v) + t`` applied to every vertex."""
        v = self.vertices
        if matrix is not None:
            v = v @ np.asarray(matrix, dtype=np.float64).T
        v = v * scale
        if translation is not None:
            v = v + np.asarray(translation, dtype=np.float64)
        return TriMesh(v, self.faces)


@dataclass
class MeshDiagnostics:
    connectedComponents: int
    boundaryEdgeCount: int
    nonManifoldEdgeCount: int
    degenerateFaceIds: list = field(default_factory=list)
    minFaceArea: float = 0.0

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=2)


def connected_components(mesh: TriMesh) -> tuple[int, np.ndarray]:
    """Vertex-adjacency components. Isolated vertices count as components."""
    n = mesh.n_vertices
    f = mesh.faces
    rows = np.concatenate([f[:, 0], f[:, 1], f[:, 2]])
    cols = np.concatenate([f[:, 1], f[:, 2], f[:, 0]])
    adj = sparse.coo_matrix((np.ones(len(rows)), (rows, cols)), shape=(n, n))
    return csgraph.connected_components(adj, directed=False)


def validate(mesh: TriMesh) -> MeshDiagnostics:
    """Report topology and degeneracy statistics. Never raises on well-formed input."""
    f = mesh.faces
    if mesh.n_vertices == 0:
        return MeshDiagnostics(0, 0, 0, [], 0.0)
    ncomp, _ = connected_components(mesh)
    e = np.concatenate([f[:, [0, 1]], f[:, [1, 2]], f[:, [2, 0]]])
    e.sort(axis=1)
    _, counts = np.unique(e, axis=0, return_counts=True)
    areas = mesh.face_areas()
    degenerate = np.flatnonzero(areas <= mesh.area_epsilon())
    if len(degenerate):
        logger.warning("%d degenerate face(s) below area epsilon", len(degenerate))
    return MeshDiagnostics(
        connectedComponents=int(ncomp),
        boundaryEdgeCount=int((counts == 1).sum()),
        nonManifoldEdgeCount=int((counts > 2).sum()),
        degenerateFaceIds=degenerate.tolist(),
        minFaceArea=float(areas.min()) if len(areas) else 0.0,
    )


def load_obj(path) -> TriMesh:
    """Read positions and faces from an ASCII Wavefront OBJ file.

    Polygons are fan-triangulated. Texture/normal references (``f 1/2/3``)
    and all other record types are ignored. Negative (relative) indices are
    resolved against the vertices read so far.
    """
    path = os.fspath(path)
    verts, faces = [], []
    with open(path, encoding="utf-8") as fh:
        for lineno, raw in enumerate(fh, start=1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            tok = line.split()
            if tok[0] == "v":
                try:
                    verts.append([float(x) for x in tok[1:4]])
                except ValueError as exc:
                    raise MeshError(f"{path}:{lineno}: bad vertex record: {exc}") from None
                if len(verts[-1]) != 3:
                    raise MeshError(f"{path}:{lineno}: vertex needs 3 coordinates")
            elif tok[0] == "f":
                idx = []
                for t in tok[1:]:
                    try:
                        k = int(t.split("/")[0])
                    except ValueError:
                        raise MeshError(f"{path}:{lineno}: bad face index {t!r}") from None
                    if k < 0:
                        k = len(verts) + k + 1
                    if k < 1:
                        raise MeshError(f"{path}:{lineno}: face index out of range: {t}")
                    idx.append(k - 1)
                if len(idx) < 3:
                    raise MeshError(f"{path}:{lineno}: face needs at least 3 vertices")
                for j in range(1, len(idx) - 1):
                    faces.append((idx[0], idx[j], idx[j + 1], lineno))
    if not verts or not faces:
        raise MeshError(f"{path}: empty mesh ({len(verts)} vertices, {len(faces)} faces)")
    for a, b, c, lineno in faces:
        if max(a, b, c) >= len(verts):
            raise MeshError(
                f"{path}:{lineno}: face index out of range (mesh has {len(verts)} vertices)"
            )
    mesh = TriMesh(np.array(verts), np.array([f[:3] for f in faces]))
    validate(mesh)
    return mesh


def save_obj(mesh: TriMesh, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for x, y, z in mesh.vertices:
            fh.write(f"v {x:.17g} {y:.17g} {z:.17g}\n")
        for a, b, c in mesh.faces + 1:
            fh.write(f"f {a} {b} {c}\n")


def subdivide_midpoint(mesh: TriMesh) -> TriMesh:
    """Split every triangle 1-to-4 at its edge midpoints.

    Original vertices keep their indices and positions; new midpoint
    vertices are appended in the order of :meth:`TriMesh.edges`.
    """
    f = mesh.faces
    n = mesh.n_vertices
    edges = mesh.edges()
    key = edges[:, 0] * n + edges[:, 1]
    order = np.argsort(key)

    def mid(a, b):
        k = np.minimum(a, b) * n + np.maximum(a, b)
        return n + order[np.searchsorted(key[order], k)]

    v = mesh.vertices
    new_v = np.concatenate([v, 0.5 * (v[edges[:, 0]] + v[edges[:, 1]])])
    i, j, k = f[:, 0], f[:, 1], f[:, 2]
    mij, mjk, mki = mid(i, j), mid(j, k), mid(k, i)
    new_f = np.concatenate([
        np.stack([i, mij, mki], 1),
        np.stack([mij, j, mjk], 1),
        np.stack([mki, mjk, k], 1),
        np.stack([mij, mjk, mki], 1),
    ])
    return TriMesh(new_v, new_f)


def jitter_vertices(mesh: TriMesh, sigma: float, seed: int) -> TriMesh:
    if sigma < 0:
        raise ValueError("sigma must be non-negative")
    if sigma == 0:
        return TriMesh(mesh.vertices.copy(), mesh.faces)
    rng = np.random.default_rng(seed)
    noise = rng.normal(0.0, sigma, size=mesh.vertices.shape)
    return TriMesh(mesh.vertices + noise, mesh.faces)


def drop_faces(mesh: TriMesh, fraction: float, seed: int) -> tuple[TriMesh, np.ndarray]:
    """Remove a random subset of faces and prune unreferenced vertices.

    Returns
    -------
    mesh : TriMesh
        The partial mesh with ``round((1 - fraction) * n_faces)`` faces.
    index_map : ndarray of int, shape (n_vertices,)
        New index of every original vertex, ``-1`` for pruned ones.
    """
    if not 0 <= fraction < 1:
        raise ValueError("fraction must lie in [0, 1)")
    keep_n = int(round((1 - fraction) * mesh.n_faces))
    if keep_n == 0:
        raise MeshError("drop_faces would remove every face")
    rng = np.random.default_rng(seed)
    keep = np.sort(rng.permutation(mesh.n_faces)[:keep_n])
    faces = mesh.faces[keep]
    used = np.zeros(mesh.n_vertices, dtype=bool)
    used[faces.ravel()] = True
    index_map = np.full(mesh.n_vertices, -1, dtype=np.int64)
    index_map[used] = np.arange(used.sum())
    return TriMesh(mesh.vertices[used], index_map[faces]), index_map


def normalize_mesh(mesh: TriMesh, area: float | None = 1.0) -> TriMesh:
    """Center at the area-weighted centroid and rescale to the given surface area.

    ``area=None`` only recenters.
    """
    v, f = mesh.vertices, mesh.faces
    areas = mesh.face_areas()
    centroids = v[f].mean(axis=1)
    center = (areas[:, None] * centroids).sum(0) / areas.sum()
    scale = 1.0 if area is None else np.sqrt(area / areas.sum())
    return TriMesh((v - center) * scale, f)
