import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from facedetail.formats import FormatError
from facedetail.geometry import (Camera, MeshError, TriMesh, compute_vertex_normals, icosphere,
                                 project, read_mesh, visibility, write_mesh)
from facedetail.renderer import build_plan, raster_plan

from conftest import grid_mesh


def test_flat_square_normals_point_up():
    normals = compute_vertex_normals(grid_mesh(5))
    np.testing.assert_allclose(normals, np.tile([0.0, 0.0, 1.0], (25, 1)), atol=1e-15)


def _sphere_normal_error(subdivisions):
    mesh = icosphere(subdivisions)
    normals = compute_vertex_normals(mesh)
    radial = mesh.vertices / np.linalg.norm(mesh.vertices, axis=1, keepdims=True)
    return np.arccos(np.clip(np.sum(normals * radial, axis=1), -1, 1))


@pytest.mark.xfail(strict=True, reason="area weighting peaks at 0.0118 rad on the "
                   "642-vertex icosphere; see decisions ledger")
def test_icosphere_normals_within_1e2_at_three_subdivisions():
    assert _sphere_normal_error(3).max() < 1e-2


def test_icosphere_normals_converge_to_positions():
    e3 = _sphere_normal_error(3)
    e4 = _sphere_normal_error(4)
    assert e3.mean() < 1e-2
    assert e4.max() < 1e-2
    assert e4.max() < 0.6 * e3.max()


def test_zero_area_triangle_is_ignored():
    verts = np.array([[0, 0, 0], [1, 0, 0], [0, 1, 0], [2, 0, 0]], dtype=float)
    # (0,1,3) is collinear; vertex 3 also sits in the proper triangle (1,3,4).
    mesh = TriMesh(np.vstack([verts, [[0.5, 0.5, 0]]]),
                   np.array([[0, 1, 2], [0, 1, 3], [1, 3, 4]]), np.zeros((5, 2)))
    normals = compute_vertex_normals(mesh)
    assert np.all(np.isfinite(normals))
    np.testing.assert_allclose(normals[:3], np.tile([0, 0, 1.0], (3, 1)))


def test_vertex_only_in_degenerate_triangles_is_named():
    verts = np.array([[0, 0, 0], [1, 0, 0], [0, 1, 0], [3, 0, 0]], dtype=float)
    mesh = TriMesh(verts, np.array([[0, 1, 2], [0, 1, 3]]), np.zeros((4, 2)))
    with pytest.raises(MeshError, match="vertex 3"):
        compute_vertex_normals(mesh)


@given(st.floats(0.1, 50.0))
@settings(max_examples=30, deadline=None)
def test_normals_invariant_to_uniform_scaling(k):
    mesh = icosphere(1)
    scaled = TriMesh(mesh.vertices * k, mesh.triangles, mesh.uv)
    np.testing.assert_allclose(compute_vertex_normals(scaled), compute_vertex_normals(mesh),
                               atol=1e-9)


def test_mesh_validation():
    v = np.zeros((3, 3))
    v[1, 0] = v[2, 1] = 1
    with pytest.raises(MeshError):
        TriMesh(v, np.array([[0, 1, 3]]), np.zeros((3, 2)))
    with pytest.raises(MeshError):
        TriMesh(v, np.array([[0, 1, 2]]), np.full((3, 2), 1.5))
    bad = v.copy()
    bad[0, 0] = np.nan
    with pytest.raises(MeshError):
        TriMesh(bad, np.array([[0, 1, 2]]), np.zeros((3, 2)))
    with pytest.raises(MeshError):
        TriMesh(np.zeros((3, 3)), np.array([[0, 1, 2]]), np.zeros((3, 2)))


def test_camera_validation():
    with pytest.raises(ValueError):
        Camera(0.0, (0, 0), (64, 64))
    with pytest.raises(ValueError):
        Camera(1.0, (0, 0), (7, 64))
    cam = Camera(2.0, (1.0, 3.0), (32, 16))
    assert Camera.from_dict(cam.to_dict()) == cam
    assert (cam.width, cam.height) == (32, 16)


def test_project_examples():
    mesh = TriMesh(np.array([[0, 0, 0], [1, 2, 3], [1, 0, 0]], dtype=float),
                   np.array([[0, 2, 1]]), np.zeros((3, 2)))
    xy, depth = project(mesh, Camera(1.0, (64, 64), (128, 128)))
    np.testing.assert_array_equal(xy[0], [64, 64])
    assert depth[0] == 0
    xy, depth = project(mesh, Camera(10.0, (0, 0), (128, 128)))
    np.testing.assert_array_equal(xy[1], [10, 20])
    assert depth[1] == 3


@given(st.floats(0, 1), st.lists(st.floats(-5, 5), min_size=6, max_size=6),
       st.floats(0.1, 20), st.floats(-50, 50), st.floats(-50, 50))
@settings(max_examples=50, deadline=None)
def test_project_is_affine(alpha, coords, scale, tx, ty):
    v1, v2 = np.array(coords[:3]), np.array(coords[3:])
    verts = np.array([v1, v2, alpha * v1 + (1 - alpha) * v2])
    mesh = TriMesh(np.vstack([verts, [[0, 0, 0], [1, 0, 0], [0, 1, 0]]]),
                   np.array([[3, 4, 5]]), np.zeros((6, 2)))
    xy, _ = project(mesh, Camera(scale, (tx, ty), (64, 64)))
    np.testing.assert_allclose(xy[2], alpha * xy[0] + (1 - alpha) * xy[1], atol=1e-9)


def _single_triangle():
    verts = np.array([[0.2, 0.2, 0.0], [0.8, 0.2, 0.0], [0.2, 0.8, 0.0]])
    return TriMesh(verts, np.array([[0, 1, 2]]), np.zeros((3, 2)))


def test_single_triangle_fully_visible():
    mesh = _single_triangle()
    cam = Camera(40.0, (0.0, 0.0), (40, 40))
    plan = raster_plan(mesh, cam)
    assert visibility(mesh, project(mesh, cam), plan).all()
    assert visibility(mesh, project(mesh, cam), plan.depth).all()


def test_occluded_triangle_is_invisible():
    near = np.array([[0.1, 0.1, 1.0], [0.9, 0.1, 1.0], [0.1, 0.9, 1.0], [0.9, 0.9, 1.0]])
    far = np.array([[0.3, 0.3, 0.0], [0.6, 0.3, 0.0], [0.3, 0.6, 0.0]])
    mesh = TriMesh(np.vstack([near, far]), np.array([[0, 1, 3], [0, 3, 2], [4, 5, 6]]),
                   np.zeros((7, 2)))
    cam = Camera(40.0, (0.0, 0.0), (40, 40))
    vis = visibility(mesh, project(mesh, cam), raster_plan(mesh, cam))
    np.testing.assert_array_equal(vis, [True] * 4 + [False] * 3)


def test_out_of_frame_vertex_is_invisible():
    verts = np.array([[0.2, 0.2, 0.0], [0.8, 0.2, 0.0], [0.2, 1.5, 0.0]])
    mesh = TriMesh(verts, np.array([[0, 1, 2]]), np.zeros((3, 2)))
    cam = Camera(40.0, (0.0, 0.0), (40, 40))
    vis = visibility(mesh, project(mesh, cam), raster_plan(mesh, cam))
    np.testing.assert_array_equal(vis, [True, True, False])


def test_visibility_rejects_wrong_shapes(model):
    proj = project(model.mesh, model.camera)
    with pytest.raises(ValueError):
        visibility(model.mesh, proj, np.zeros(5))
    with pytest.raises(MeshError):
        visibility(model.mesh, (proj[0][:10], proj[1][:10]), raster_plan(model.mesh, model.camera))


@given(st.floats(0.0, 0.5), st.floats(0.0, 0.5))
@settings(max_examples=25, deadline=None)
def test_visibility_monotone_in_eps(e1, e2):
    from facedetail.synth import build_model
    model = build_model(0)
    lo, hi = sorted((e1, e2))
    proj = project(model.mesh, model.camera)
    plan = raster_plan(model.mesh, model.camera)
    v_lo = visibility(model.mesh, proj, plan, eps=lo)
    v_hi = visibility(model.mesh, proj, plan, eps=hi)
    assert np.all(v_hi[v_lo])


def test_mesh_file_round_trip(tmp_path):
    mesh = icosphere(1)
    write_mesh(tmp_path / "s.mesh", mesh)
    back = read_mesh(tmp_path / "s.mesh")
    np.testing.assert_array_equal(back.vertices, mesh.vertices)
    np.testing.assert_array_equal(back.triangles, mesh.triangles)
    np.testing.assert_array_equal(back.uv, mesh.uv)
    assert back.key == mesh.key


def test_mesh_file_rejects_unknown_tags(tmp_path):
    p = tmp_path / "bad.mesh"
    p.write_text("v 0 0 0 0 0\nv 1 0 0 1 0\nv 0 1 0 0 1\nvn 0 0 1\nf 0 1 2\n")
    with pytest.raises(FormatError, match="unsupported record"):
        read_mesh(p)


def test_fully_out_of_frame_triangle_covers_nothing():
    plan = build_plan(np.array([[-50.0, -50], [-40, -50], [-50, -40]]), np.zeros(3),
                      np.array([[0, 1, 2]]), 16, 16)
    assert not plan.coverage.any()
