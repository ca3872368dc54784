"""Procedural test meshes."""

import numpy as np

from .mesh_io import TriMesh, subdivide_midpoint


def unit_square() -> TriMesh:
    v = [[0, 0, 0], [1, 0, 0], [1, 1, 0], [0, 1, 0]]
    return TriMesh(v, [[0, 1, 2], [0, 2, 3]])


def equilateral_triangle() -> TriMesh:
    v = [[0, 0, 0], [1, 0, 0], [0.5, np.sqrt(3) / 2, 0]]
    return TriMesh(v, [[0, 1, 2]])


def grid(nx: int, ny: int, width=1.0, height=1.0) -> TriMesh:
    """Planar ``nx`` by ``ny`` cell grid in the z=0 plane, alternating diagonals."""
    xs = np.linspace(0, width, nx + 1)
    ys = np.linspace(0, height, ny + 1)
    X, Y = np.meshgrid(xs, ys, indexing="ij")
    v = np.stack([X.ravel(), Y.ravel(), np.zeros(X.size)], 1)
    faces = []
    for i in range(nx):
        for j in range(ny):
            a = i * (ny + 1) + j
            b = a + ny + 1
            if (i + j) % 2:
                faces += [(a, b, b + 1), (a, b + 1, a + 1)]
            else:
                faces += [(a, b, a + 1), (b, b + 1, a + 1)]
    return TriMesh(v, faces)


def icosahedron(radius=1.0) -> TriMesh:
    t = (1 + np.sqrt(5)) / 2
    v = np.array([
        [-1, t, 0], [1, t, 0], [-1, -t, 0], [1, -t, 0],
        [0, -1, t], [0, 1, t], [0, -1, -t], [0, 1, -t],
        [t, 0, -1], [t, 0, 1], [-t, 0, -1], [-t, 0, 1],
    ], dtype=np.float64)
    f = [
        [0, 11, 5], [0, 5, 1], [0, 1, 7], [0, 7, 10], [0, 10, 11],
        [1, 5, 9], [5, 11, 4], [11, 10, 2], [10, 7, 6], [7, 1, 8],
        [3, 9, 4], [3, 4, 2], [3, 2, 6], [3, 6, 8], [3, 8, 9],
        [4, 9, 5], [2, 4, 11], [6, 2, 10], [8, 6, 7], [9, 8, 1],
    ]
    v *= radius / np.linalg.norm(v, axis=1, keepdims=True)
    return TriMesh(v, f)


def icosphere(level: int = 3, radius=1.0) -> TriMesh:
    """Subdivided icosahedron projected to the sphere; level 3 has 642 vertices."""
    mesh = icosahedron(radius)
    for _ in range(level):
        mesh = subdivide_midpoint(mesh)
        v = mesh.vertices
        mesh = TriMesh(radius * v / np.linalg.norm(v, axis=1, keepdims=True), mesh.faces)
    return mesh


def torus(n_major=32, n_minor=16, R=1.0, r=0.4, wobble=0.0) -> TriMesh:
    """Closed torus with ``n_major * n_minor`` vertices.

    ``wobble`` modulates the tube radius as ``r * (1 + wobble * cos(2 phi))``
    to break the rotational symmetry.
    """
    phi = 2 * np.pi * np.arange(n_major) / n_major
    psi = 2 * np.pi * np.arange(n_minor) / n_minor
    P, S = np.meshgrid(phi, psi, indexing="ij")
    rr = r * (1 + wobble * np.cos(2 * P))
    x = (R + rr * np.cos(S)) * np.cos(P)
    y = (R + rr * np.cos(S)) * np.sin(P)
    z = rr * np.sin(S)
    v = np.stack([x.ravel(), y.ravel(), z.ravel()], 1)
    faces = []
    for i in range(n_major):
        for j in range(n_minor):
            a = i * n_minor + j
            b = ((i + 1) % n_major) * n_minor + j
            c = ((i + 1) % n_major) * n_minor + (j + 1) % n_minor
            d = i * n_minor + (j + 1) % n_minor
            faces += [(a, b, c), (a, c, d)]
    return TriMesh(v, faces)


def box(n: int = 4, size=(1.0, 1.0, 1.0)) -> TriMesh:
    """Closed axis-aligned box surface, each side an ``n`` by ``n`` grid."""
    g = np.linspace(-0.5, 0.5, n + 1)
    U, W = np.meshgrid(g, g, indexing="ij")
    u, w = U.ravel(), W.ravel()
    quads = []
    for i in range(n):
        for j in range(n):
            a = i * (n + 1) + j
            quads.append((a, a + n + 1, a + n + 2, a + 1))
    verts, faces = [], []
    for axis in range(3):
        for sign in (-1.0, 1.0):
            pts = np.zeros((len(u), 3))
            a1, a2 = (axis + 1) % 3, (axis + 2) % 3
            pts[:, axis] = 0.5 * sign
            pts[:, a1] = u
            pts[:, a2] = w
            off = sum(len(p) for p in verts)
            for a, b, c, d in quads:
                q = (a, b, c, d) if sign > 0 else (a, d, c, b)
                faces += [(q[0] + off, q[1] + off, q[2] + off), (q[0] + off, q[2] + off, q[3] + off)]
            verts.append(pts)
    v = np.concatenate(verts)
    _, first, inverse = np.unique(np.round(v, 12), axis=0, return_index=True, return_inverse=True)
    # keep vertex order stable: relabel welded vertices by first occurrence
    order = np.argsort(first)
    relabel = np.empty_like(order)
    relabel[order] = np.arange(len(order))
    v = v[first[order]] * np.asarray(size)
    f = relabel[inverse.ravel()][np.array(faces)]
    return TriMesh(v, f)


def cylinder(n_around=16, n_along=12, radius=0.5, length=2.0) -> TriMesh:
    """Open cylinder along z from ``-length/2`` to ``length/2``."""
    th = 2 * np.pi * np.arange(n_around) / n_around
    zs = np.linspace(-length / 2, length / 2, n_along + 1)
    Z, T = np.meshgrid(zs, th, indexing="ij")
    v = np.stack([radius * np.cos(T).ravel(), radius * np.sin(T).ravel(), Z.ravel()], 1)
    faces = []
    for i in range(n_along):
        for j in range(n_around):
            a = i * n_around + j
            b = i * n_around + (j + 1) % n_around
            c = (i + 1) * n_around + (j + 1) % n_around
            d = (i + 1) * n_around + j
            faces += [(a, b, c), (a, c, d)]
    return TriMesh(v, faces)


def bend(mesh: TriMesh, amount: float, length=2.0) -> TriMesh:
    """Bend a z-aligned shape around the y axis by a total angle ``amount`` radians.

    Isometric along the centerline: the z axis maps onto a circular arc of
    the same length.
    """
    v = mesh.vertices
    if abs(amount) < 1e-12:
        return TriMesh(v.copy(), mesh.faces)
    rad = length / amount
    ang = v[:, 2] / rad
    x = v[:, 0]
    out = np.stack([
        (rad - x) * -np.cos(ang) + rad,
        v[:, 1],
        (rad - x) * np.sin(ang),
    ], 1)
    return TriMesh(out, mesh.faces)


def random_rotation(rng) -> np.ndarray:
    """Uniform rotation in SO(3) from a normalized Gaussian quaternion."""
    q = rng.normal(size=4)
    q /= np.linalg.norm(q)
    w, x, y, z = q
    return np.array([
        [1 - 2 * (y * y + z * z), 2 * (x * y - z * w), 2 * (x * z + y * w)],
        [2 * (x * y + z * w), 1 - 2 * (x * x + z * z), 2 * (y * z - x * w)],
        [2 * (x * z - y * w), 2 * (y * z + x * w), 1 - 2 * (x * x + y * y)],
    ])


def vertex_normals(mesh: TriMesh) -> np.ndarray:
    """Area-weighted unit vertex normals."""
    v, f = mesh.vertices, mesh.faces
    fn = np.cross(v[f[:, 1]] - v[f[:, 0]], v[f[:, 2]] - v[f[:, 0]])
    n = np.zeros_like(v)
    for k in range(3):
        np.add.at(n, f[:, k], fn)
    return n / np.linalg.norm(n, axis=1, keepdims=True)


def crumple(mesh: TriMesh, amplitude: float, seed: int = 0) -> TriMesh:
    """Displace each vertex along its normal by an i.i.d. Gaussian offset."""
    rng = np.random.default_rng(seed)
    offsets = rng.normal(0.0, amplitude, mesh.n_vertices)
    return TriMesh(mesh.vertices + offsets[:, None] * vertex_normals(mesh), mesh.faces)
