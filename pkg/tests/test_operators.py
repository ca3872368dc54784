import numpy as np
import pytest

from poissonnet import shapes
from poissonnet.mesh_io import MeshError, TriMesh, jitter_vertices
from poissonnet.operators import (
    build_cotan_laplacian,
    build_gradient,
    build_mass_matrices,
    build_operators,
    build_tangent_frames,
    deinterleave,
    divergence_rhs,
    face_gradient,
    interleave,
)

from .oracles import cotan_laplacian_loops, face_gradient_lstsq

MESHES = {
    "square": shapes.unit_square(),
    "grid": shapes.grid(5, 4),
    "icosphere": shapes.icosphere(2),
    "torus": shapes.torus(10, 6, wobble=0.3),
    "box": shapes.box(3),
    "cylinder": shapes.cylinder(8, 5),
    "noisy": jitter_vertices(shapes.icosphere(1), 0.05, 0),
}


@pytest.fixture(params=sorted(MESHES))
def mesh(request):
    return MESHES[request.param]


def test_frames_axis_aligned():
    m = TriMesh([[0, 0, 0], [1, 0, 0], [0, 1, 0]], [[0, 1, 2]])
    fr = build_tangent_frames(m)
    np.testing.assert_allclose(fr.u1[0], [1, 0, 0])
    np.testing.assert_allclose(fr.u2[0], [0, 1, 0])
    np.testing.assert_allclose(fr.n[0], [0, 0, 1])


def test_frames_orthonormal(mesh):
    fr = build_tangent_frames(mesh)
    for a in (fr.u1, fr.u2, fr.n):
        np.testing.assert_allclose(np.linalg.norm(a, axis=1), 1.0, atol=1e-12)
    for a, b in ((fr.u1, fr.u2), (fr.u1, fr.n), (fr.u2, fr.n)):
        np.testing.assert_allclose((a * b).sum(1), 0.0, atol=1e-12)
    np.testing.assert_allclose(np.cross(fr.u1, fr.u2), fr.n, atol=1e-12)
    v, f = mesh.vertices, mesh.faces
    normal = np.cross(v[f[:, 1]] - v[f[:, 0]], v[f[:, 2]] - v[f[:, 0]])
    normal /= np.linalg.norm(normal, axis=1, keepdims=True)
    np.testing.assert_allclose((fr.u1 * normal).sum(1), 0.0, atol=1e-10)
    np.testing.assert_allclose((fr.u2 * normal).sum(1), 0.0, atol=1e-10)


def test_frames_rotate_with_mesh(rng):
    m = shapes.torus(8, 5)
    R = shapes.random_rotation(rng)
    a = build_tangent_frames(m)
    b = build_tangent_frames(m.transformed(R))
    for x, y in ((a.u1, b.u1), (a.u2, b.u2), (a.n, b.n)):
        np.testing.assert_allclose(x @ R.T, y, atol=1e-12)


def test_gradient_of_x_on_right_triangle():
    m = TriMesh([[0, 0, 0], [1, 0, 0], [0, 1, 0]], [[0, 1, 2]])
    ops = build_operators(m)
    g = face_gradient(ops, m.vertices[:, 0])
    np.testing.assert_allclose(g, [1.0 + 0j], atol=1e-15)


def test_gradient_affine_on_planar_grid():
    m = shapes.grid(4, 3)
    ops = build_operators(m)
    fr = ops.frames
    assert np.allclose(fr.n, [0, 0, 1]) or np.allclose(fr.n, [0, 0, -1])
    s = 2 * m.vertices[:, 0] + 3 * m.vertices[:, 1]
    g = face_gradient(ops, s)
    # express the constant 3D gradient (2, 3, 0) in each frame
    expect = fr.u1 @ [2, 3, 0] + 1j * (fr.u2 @ [2, 3, 0])
    np.testing.assert_allclose(g, expect, atol=1e-12)


def test_gradient_sparsity_and_constant(mesh):
    ops = build_operators(mesh)
    G = ops.grad
    assert G.shape == (2 * mesh.n_faces, mesh.n_vertices)
    counts = np.diff(G.indptr).reshape(-1, 2).sum(1)
    assert np.all(counts <= 6)
    np.testing.assert_allclose(G @ np.ones(mesh.n_vertices), 0.0, atol=1e-10)


def test_gradient_matches_lstsq_oracle(mesh, rng):
    ops = build_operators(mesh)
    s = rng.normal(size=mesh.n_vertices)
    g = face_gradient(ops, s)
    fr = ops.frames
    for t in range(0, mesh.n_faces, max(1, mesh.n_faces // 25)):
        ref = face_gradient_lstsq(mesh.vertices, mesh.faces[t], s, fr.u1[t], fr.u2[t])
        np.testing.assert_allclose([g[t].real, g[t].imag], ref, rtol=1e-9, atol=1e-10)


def test_unit_square_laplacian():
    L = build_cotan_laplacian(shapes.unit_square()).toarray()
    # vertices (0,0),(1,0),(1,1),(0,1); diagonal edge 0-2
    assert L[0, 1] == pytest.approx(-0.5)
    assert L[1, 2] == pytest.approx(-0.5)
    assert L[2, 3] == pytest.approx(-0.5)
    assert L[0, 3] == pytest.approx(-0.5)
    assert L[0, 2] == pytest.approx(0.0, abs=1e-15)


def test_equilateral_laplacian():
    L = build_cotan_laplacian(shapes.equilateral_triangle()).toarray()
    off = L[~np.eye(3, dtype=bool)]
    np.testing.assert_allclose(off, -1 / (2 * np.sqrt(3)), rtol=1e-12)
    assert off[0] == pytest.approx(-0.288675, abs=1e-6)


def test_laplacian_matches_loop_oracle(mesh):
    L = build_cotan_laplacian(mesh).toarray()
    np.testing.assert_allclose(L, cotan_laplacian_loops(mesh.vertices, mesh.faces), atol=1e-12)


def test_laplacian_psd_symmetric_nullspace(mesh):
    L = build_cotan_laplacian(mesh)
    assert abs(L - L.T).max() < 1e-12
    np.testing.assert_allclose(L @ np.ones(mesh.n_vertices), 0.0, atol=1e-10)
    assert np.linalg.eigvalsh(L.toarray()).min() > -1e-10


def test_operator_identity(mesh):
    ops = build_operators(mesh)
    D = (ops.grad.T @ (ops.mass_face[:, None] * ops.grad.toarray()))
    assert np.abs(ops.laplacian.toarray() - D).max() < 1e-10


def test_obtuse_triangles_not_clamped():
    m = TriMesh([[0, 0, 0], [2, 0, 0], [1, 0.2, 0], [1, -0.2, 0]], [[0, 1, 2], [1, 0, 3]])
    L = build_cotan_laplacian(m).toarray()
    assert L[0, 1] > 0  # two obtuse opposite angles give a positive off-diagonal
    ops = build_operators(m)
    D = ops.grad.T @ (ops.mass_face[:, None] * ops.grad.toarray())
    assert np.abs(L - D).max() < 1e-10


def test_mass_matrices_unit_square():
    mv, mf, areas = build_mass_matrices(shapes.unit_square())
    assert mv[0] == pytest.approx(1 / 3)
    assert mv.sum() == pytest.approx(1.0, abs=1e-15)
    np.testing.assert_array_equal(mf[0::2], areas)
    np.testing.assert_array_equal(mf[1::2], areas)


def test_mass_sums(mesh):
    mv, mf, areas = build_mass_matrices(mesh)
    assert abs(mv.sum() - areas.sum()) < 1e-10
    assert np.all(mv > 0) and np.all(mf > 0)


def test_divergence_rhs(mesh, rng):
    ops = build_operators(mesh)
    s = rng.normal(size=(mesh.n_vertices, 2))
    np.testing.assert_allclose(divergence_rhs(ops, face_gradient(ops, s)), ops.laplacian @ s, atol=1e-10)
    np.testing.assert_array_equal(divergence_rhs(ops, np.zeros((mesh.n_faces, 3), complex)), 0.0)
    f = rng.normal(size=(mesh.n_faces, 3)) + 1j * rng.normal(size=(mesh.n_faces, 3))
    np.testing.assert_allclose(divergence_rhs(ops, f).sum(0), 0.0, atol=1e-8)


def test_divergence_rhs_shape_error():
    ops = build_operators(shapes.unit_square())
    with pytest.raises(ValueError):
        divergence_rhs(ops, np.zeros((5, 1), complex))


def test_frame_covariance(mesh, rng):
    ops = build_operators(mesh)
    phi = rng.uniform(0, 2 * np.pi, mesh.n_faces)
    rot = build_operators(mesh, ops.frames.rotated(phi))
    s = rng.normal(size=(mesh.n_vertices, 2))
    g, g_rot = face_gradient(ops, s), face_gradient(rot, s)
    np.testing.assert_allclose(g_rot, g * np.exp(-1j * phi)[:, None], atol=1e-10)
    f = rng.normal(size=(mesh.n_faces, 2)) + 1j * rng.normal(size=(mesh.n_faces, 2))
    np.testing.assert_allclose(
        divergence_rhs(rot, f * np.exp(-1j * phi)[:, None]), divergence_rhs(ops, f), atol=1e-10
    )


def test_rigid_motion_invariance(rng):
    m = shapes.torus(10, 6, wobble=0.3)
    R = shapes.random_rotation(rng)
    a = build_operators(m)
    b = build_operators(m.transformed(R, translation=[1.0, -2.0, 0.5]))
    assert abs(a.laplacian - b.laplacian).max() < 1e-10
    np.testing.assert_allclose(a.mass_vertex, b.mass_vertex, atol=1e-10)
    np.testing.assert_allclose(a.mass_face, b.mass_face, atol=1e-10)
    s = rng.normal(size=m.n_vertices)
    np.testing.assert_allclose(np.abs(face_gradient(a, s)), np.abs(face_gradient(b, s)), atol=1e-10)


def test_scaling():
    m = shapes.icosphere(2)
    a = build_operators(m)
    b = build_operators(m.transformed(scale=2.5))
    assert abs(a.laplacian - b.laplacian).max() < 1e-10
    np.testing.assert_allclose(b.mass_vertex, 2.5 ** 2 * a.mass_vertex, rtol=1e-12)


def test_degenerate_face_errors():
    m = TriMesh([[0, 0, 0], [1, 0, 0], [2, 0, 0]], [[0, 1, 2]])
    with pytest.raises(MeshError, match="degenerate"):
        build_tangent_frames(m)
    with pytest.raises(MeshError):
        build_operators(m)


def test_interleave_roundtrip(rng):
    f = rng.normal(size=(5, 3)) + 1j * rng.normal(size=(5, 3))
    x = interleave(f)
    assert x.shape == (10, 3)
    np.testing.assert_array_equal(deinterleave(x), f)


def test_gradient_builder_standalone():
    m = shapes.icosphere(1)
    fr = build_tangent_frames(m)
    assert (build_gradient(m, fr) != build_operators(m).grad).nnz == 0


def test_face_average(small_ctx):
    ops = small_ctx.ops
    s = np.arange(ops.n_vertices, dtype=float)
    np.testing.assert_allclose(ops.face_average @ s, s[ops.faces].mean(1))
