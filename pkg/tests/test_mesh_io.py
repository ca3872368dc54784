import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from poissonnet import shapes
from poissonnet.mesh_io import (
    MeshError,
    TriMesh,
    connected_components,
    drop_faces,
    jitter_vertices,
    load_obj,
    normalize_mesh,
    save_obj,
    subdivide_midpoint,
    validate,
)

from .conftest import write_obj


def test_minimal_obj(tmp_path):
    p = write_obj(tmp_path / "tri.obj", "v 0 0 0\nv 1 0 0\nv 0 1 0\nf 1 2 3\n")
    m = load_obj(p)
    assert m.n_vertices == 3 and m.n_faces == 1
    assert m.faces.tolist() == [[0, 1, 2]]


def test_out_of_range_index_reports_line(tmp_path):
    p = write_obj(tmp_path / "bad.obj", "v 0 0 0\nv 1 0 0\nv 0 1 0\nf 1 2 5\n")
    with pytest.raises(MeshError, match=r"bad.obj:4.*out of range"):
        load_obj(p)


def test_parse_error_line_number(tmp_path):
    p = write_obj(tmp_path / "bad.obj", "v 0 0 0\nv 1 zero 0\n")
    with pytest.raises(MeshError, match=":2"):
        load_obj(p)


def test_empty_mesh(tmp_path):
    p = write_obj(tmp_path / "empty.obj", "# nothing\n")
    with pytest.raises(MeshError, match="empty"):
        load_obj(p)


def test_unit_square_obj(tmp_path):
    p = write_obj(tmp_path / "sq.obj", "v 0 0 0\nv 1 0 0\nv 1 1 0\nv 0 1 0\nf 1 2 3\nf 1 3 4\n")
    m = load_obj(p)
    assert (m.n_vertices, m.n_faces) == (4, 2)
    assert m.area() == pytest.approx(1.0, abs=1e-15)


def test_obj_polygon_fan_and_slashes(tmp_path):
    text = "v 0 0 0\nv 1 0 0\nv 1 1 0\nv 0 1 0\nvn 0 0 1\nf 1//1 2//1 3//1 4//1\n"
    m = load_obj(write_obj(tmp_path / "quad.obj", text))
    assert m.faces.tolist() == [[0, 1, 2], [0, 2, 3]]


def test_negative_indices(tmp_path):
    m = load_obj(write_obj(tmp_path / "neg.obj", "v 0 0 0\nv 1 0 0\nv 0 1 0\nf -3 -2 -1\n"))
    assert m.faces.tolist() == [[0, 1, 2]]


def test_save_load_roundtrip(tmp_path):
    m = shapes.icosphere(2)
    save_obj(m, tmp_path / "a.obj")
    m2 = load_obj(tmp_path / "a.obj")
    save_obj(m2, tmp_path / "b.obj")
    m3 = load_obj(tmp_path / "b.obj")
    np.testing.assert_allclose(m2.vertices, m.vertices, rtol=1e-8, atol=1e-9)
    np.testing.assert_array_equal(m3.vertices, m2.vertices)
    np.testing.assert_array_equal(m3.faces, m.faces)


def test_trimesh_rejects_repeated_index():
    with pytest.raises(MeshError, match="repeated"):
        TriMesh(np.eye(3), [[0, 0, 1]])


def test_trimesh_is_immutable():
    m = shapes.unit_square()
    with pytest.raises(ValueError):
        m.vertices[0, 0] = 5.0


def test_validate_two_triangles():
    v = np.array([[0, 0, 0], [1, 0, 0], [0, 1, 0], [5, 0, 0], [6, 0, 0], [5, 1, 0]], float)
    d = validate(TriMesh(v, [[0, 1, 2], [3, 4, 5]]))
    assert d.connectedComponents == 2
    assert d.boundaryEdgeCount == 6


def test_validate_icosahedron_closed():
    d = validate(shapes.icosahedron())
    assert d.connectedComponents == 1
    assert d.boundaryEdgeCount == 0
    assert d.nonManifoldEdgeCount == 0
    assert d.degenerateFaceIds == []


def test_validate_single_triangle_and_json():
    d = validate(shapes.equilateral_triangle())
    assert d.boundaryEdgeCount == 3
    doc = json.loads(d.to_json())
    assert set(doc) == {"connectedComponents", "boundaryEdgeCount", "nonManifoldEdgeCount",
                        "degenerateFaceIds", "minFaceArea"}


def test_validate_flags_degenerate_and_nonmanifold():
    v = np.array([[0, 0, 0], [1, 0, 0], [2, 0, 0], [0, 1, 0], [0, -1, 0], [0, 0, 1]], float)
    f = [[0, 1, 2], [0, 1, 3], [1, 0, 4], [0, 1, 5]]
    d = validate(TriMesh(v, f))
    assert d.degenerateFaceIds == [0]
    assert d.nonManifoldEdgeCount >= 1


def test_validate_does_not_mutate():
    m = shapes.icosphere(1)
    before = m.vertices.copy()
    validate(m)
    np.testing.assert_array_equal(m.vertices, before)


def test_subdivide_single_triangle():
    s = subdivide_midpoint(shapes.equilateral_triangle())
    assert (s.n_faces, s.n_vertices) == (4, 6)


def test_subdivide_icosahedron_counts_and_area():
    m = shapes.icosahedron()
    s = subdivide_midpoint(m)
    assert (s.n_faces, s.n_vertices) == (80, 42)
    assert s.area() == pytest.approx(m.area(), rel=1e-12)
    np.testing.assert_array_equal(s.vertices[: m.n_vertices], m.vertices)


def test_jitter_zero_and_seeded():
    m = shapes.icosphere(2)
    np.testing.assert_array_equal(jitter_vertices(m, 0.0, 3).vertices, m.vertices)
    a = jitter_vertices(m, 0.01, 7)
    b = jitter_vertices(m, 0.01, 7)
    np.testing.assert_array_equal(a.vertices, b.vertices)


def test_jitter_displacement_bound():
    m = shapes.icosphere(3)
    sigma = 0.01
    d = np.linalg.norm(jitter_vertices(m, sigma, 0).vertices - m.vertices, axis=1)
    assert d.max() < 10 * sigma * np.sqrt(3)
    # sample std across coordinates is close to sigma
    assert abs(np.std(jitter_vertices(m, sigma, 0).vertices - m.vertices) - sigma) < 0.1 * sigma


def test_jitter_negative_sigma():
    with pytest.raises(ValueError):
        jitter_vertices(shapes.icosahedron(), -1.0, 0)


def test_drop_faces_identity():
    m = shapes.icosphere(1)
    out, index_map = drop_faces(m, 0.0, 0)
    np.testing.assert_array_equal(out.faces, m.faces)
    np.testing.assert_array_equal(index_map, np.arange(m.n_vertices))


def test_drop_faces_half():
    m = subdivide_midpoint(shapes.icosahedron())
    out, index_map = drop_faces(m, 0.5, 1)
    assert out.n_faces == 40
    assert out.faces.max() < out.n_vertices
    kept = index_map >= 0
    np.testing.assert_array_equal(out.vertices[index_map[kept]], m.vertices[kept])
    assert validate(out).degenerateFaceIds == []


def test_drop_faces_all_removed_errors():
    with pytest.raises(MeshError):
        drop_faces(shapes.equilateral_triangle(), 0.9, 0)


@settings(max_examples=25, deadline=None)
@given(st.floats(0.0, 0.95), st.integers(0, 10_000))
def test_drop_faces_count_property(fraction, seed):
    m = shapes.icosphere(2)
    expected = round((1 - fraction) * m.n_faces)
    out, index_map = drop_faces(m, fraction, seed)
    assert out.n_faces == expected
    used = np.unique(out.faces)
    np.testing.assert_array_equal(used, np.arange(out.n_vertices))
    assert (index_map >= 0).sum() == out.n_vertices


def test_connected_components_labels():
    v = np.array([[0, 0, 0], [1, 0, 0], [0, 1, 0], [5, 0, 0], [6, 0, 0], [5, 1, 0]], float)
    n, labels = connected_components(TriMesh(v, [[0, 1, 2], [3, 4, 5]]))
    assert n == 2 and len(set(labels[:3])) == 1 and labels[0] != labels[3]


def test_normalize_mesh():
    m = shapes.box(3, size=(2.0, 1.0, 3.0)).transformed(translation=[4.0, -1.0, 2.0])
    n = normalize_mesh(m)
    assert n.area() == pytest.approx(1.0, rel=1e-12)
    areas = n.face_areas()
    centroid = (areas[:, None] * n.vertices[n.faces].mean(1)).sum(0) / areas.sum()
    np.testing.assert_allclose(centroid, 0.0, atol=1e-12)
    c = normalize_mesh(m, area=None)
    assert c.area() == pytest.approx(m.area(), rel=1e-12)
