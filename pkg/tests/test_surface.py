import itertools

import numpy as np
import pytest

from proxyview.imagegeo import DepthMap, ForegroundMask
from proxyview.surface import TriangleMesh, heightfield_to_mesh, load_obj, save_obj


def _mesh(mask, z=None):
    mask = np.asarray(mask, bool)
    z = np.zeros(mask.shape) if z is None else z
    return heightfield_to_mesh(DepthMap(np.where(mask, z, np.nan)), ForegroundMask(mask))


def _complete_quads(mask):
    """Brute-force count of 2x2 blocks whose four pixels are all foreground."""
    h, w = mask.shape
    return sum(
        all(mask[r + dr, c + dc] for dr, dc in itertools.product((0, 1), (0, 1)))
        for r in range(h - 1)
        for c in range(w - 1)
    )


def test_single_quad_flat():
    mesh = _mesh(np.ones((2, 2)))
    assert len(mesh.vertices) == 4 and len(mesh.triangles) == 2
    np.testing.assert_allclose(mesh.normals, [[0, 0, 1]] * 4)


def test_single_pixel():
    mesh = _mesh([[True]])
    assert len(mesh.vertices) == 1 and len(mesh.triangles) == 0
    np.testing.assert_allclose(np.linalg.norm(mesh.normals, axis=1), 1.0)


def test_l_shape_has_no_triangles():
    mesh = _mesh([[True, True], [True, False]])
    assert len(mesh.vertices) == 3 and len(mesh.triangles) == 0


@pytest.mark.parametrize("w, h", [(2, 2), (5, 3), (40, 40)])
def test_full_rectangle_counts(w, h):
    mesh = _mesh(np.ones((h, w)))
    assert len(mesh.vertices) == w * h
    assert len(mesh.triangles) == 2 * (w - 1) * (h - 1)


@pytest.mark.parametrize("seed", range(20))
def test_random_masks_match_quad_enumeration(seed):
    rng = np.random.default_rng(seed)
    h, w = rng.integers(1, 17, size=2)
    mask = rng.random((h, w)) < rng.uniform(0.3, 0.95)
    z = rng.standard_normal((h, w))
    mesh = _mesh(mask, z)
    assert len(mesh.vertices) == mask.sum()
    assert len(mesh.triangles) == 2 * _complete_quads(mask)


def test_vertex_layout_and_diagonal_choice():
    z = np.array([[0.0, 5.0], [5.0, 0.1]])  # a-d diagonal jump 0.1, b-c jump 0
    mesh = _mesh(np.ones((2, 2)), z)
    np.testing.assert_allclose(mesh.vertices[:, :2], [[0, 1], [1, 1], [0, 0], [1, 0]])
    edges = {tuple(sorted(e)) for t in mesh.triangles for e in itertools.combinations(t, 2)}
    assert (1, 2) in edges and (0, 3) not in edges  # split along b-c
    z2 = np.array([[0.0, 5.0], [3.0, 0.0]])
    edges = {tuple(sorted(e)) for t in _mesh(np.ones((2, 2)), z2).triangles for e in itertools.combinations(t, 2)}
    assert (0, 3) in edges


def test_mesh_invariants_on_dome():
    rows, cols = np.mgrid[0:20, 0:20]
    r2 = (rows - 9.5) ** 2 + (cols - 9.5) ** 2
    mask = r2 < 81
    z = np.sqrt(np.clip(100 - r2, 0, None))
    mesh = _mesh(mask, z)
    assert mesh.triangles.min() >= 0 and mesh.triangles.max() < len(mesh.vertices)
    np.testing.assert_allclose(np.linalg.norm(mesh.normals, axis=1), 1.0, atol=1e-6)
    fn = mesh.face_normals()
    assert np.all(np.linalg.norm(fn, axis=1) > 0)
    assert np.all(fn[:, 2] > 0)  # front-facing


def test_pixel_size_scales_xy_only():
    z = np.array([[1.0, 2.0], [3.0, 4.0]])
    mesh = heightfield_to_mesh(DepthMap(z), ForegroundMask(np.ones((2, 2), bool)), pixel_size=0.5)
    np.testing.assert_allclose(mesh.vertices[:, 0], [0, 0.5, 0, 0.5])
    np.testing.assert_allclose(mesh.vertices[:, 1], [0.5, 0.5, 0, 0])
    np.testing.assert_allclose(mesh.vertices[:, 2], [1, 2, 3, 4])


def _parse_obj(path):
    """Independent minimal OBJ reader."""
    v, vn, f = [], [], []
    for line in open(path):
        tag, *rest = line.split()
        if tag == "v":
            v.append([float(t) for t in rest])
        elif tag == "vn":
            vn.append([float(t) for t in rest])
        elif tag == "f":
            f.append([int(t.split("//")[0]) - 1 for t in rest])
    return np.array(v), np.array(vn), np.array(f)


def test_obj_empty_mesh(tmp_path):
    save_obj(TriangleMesh(np.zeros((0, 3)), np.zeros((0, 3)), np.zeros((0, 3))), tmp_path / "e.obj")
    lines = (tmp_path / "e.obj").read_text().split()
    assert not any(tok in ("v", "vn", "f") for tok in lines)


def test_obj_single_triangle(tmp_path):
    mesh = TriangleMesh([[0, 0, 0], [1, 0, 0], [0, 1, 0]], [[0, 0, 1]] * 3, [[0, 1, 2]])
    save_obj(mesh, tmp_path / "t.obj")
    lines = (tmp_path / "t.obj").read_text().splitlines()
    assert sum(l.startswith("v ") for l in lines) == 3
    assert sum(l.startswith("vn ") for l in lines) == 3
    assert [l for l in lines if l.startswith("f ")] == ["f 1//1 2//2 3//3"]


def test_obj_round_trip(tmp_path):
    rng = np.random.default_rng(2)
    mask = rng.random((9, 7)) < 0.8
    mesh = _mesh(mask, rng.standard_normal((9, 7)) * 3.7)
    save_obj(mesh, tmp_path / "m.obj")
    v, vn, f = _parse_obj(tmp_path / "m.obj")
    np.testing.assert_allclose(v, mesh.vertices, rtol=1e-8, atol=1e-12)
    np.testing.assert_allclose(vn, mesh.normals, rtol=1e-8, atol=1e-12)
    np.testing.assert_array_equal(f, mesh.triangles)
    again = load_obj(tmp_path / "m.obj")
    np.testing.assert_allclose(again.vertices, mesh.vertices, rtol=1e-8, atol=1e-12)
    np.testing.assert_array_equal(again.triangles, mesh.triangles)
