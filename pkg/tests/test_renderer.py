import numpy as np
import pytest
from hypothesis import assume, given, settings, strategies as st

from facedetail.geometry import Camera, TriMesh, project, visibility
from facedetail.renderer import bilinear, build_plan, raster_plan, rasterize, sample_at_vertices
from facedetail.sh_lighting import LightingParams, shade

from conftest import grid_mesh


def _brute_force(xy, depth, tris, w, h):
    """Per-pixel closed-triangle membership by solving for barycentrics."""
    inside = np.zeros((len(tris), h, w), dtype=bool)
    strict = np.zeros_like(inside)
    z = np.full((len(tris), h, w), -np.inf)
    py, px = np.mgrid[0:h, 0:w].astype(float)
    for t, (i, j, k) in enumerate(tris):
        a, b, c = xy[i], xy[j], xy[k]
        m = np.array([[b[0] - a[0], c[0] - a[0]], [b[1] - a[1], c[1] - a[1]]])
        if abs(np.linalg.det(m)) < 1e-9:
            continue
        l12 = np.linalg.solve(m, np.stack([px.ravel() - a[0], py.ravel() - a[1]]))
        l = np.stack([1 - l12.sum(0), l12[0], l12[1]]).reshape(3, h, w)
        inside[t] = (l >= -1e-9).all(0)
        strict[t] = (l > 1e-9).all(0)
        z[t] = np.where(inside[t], l[0] * depth[i] + l[1] * depth[j] + l[2] * depth[k], -np.inf)
    return inside, strict, z


coord = st.floats(-4.0, 20.0, allow_nan=False)


@given(st.lists(st.tuples(coord, coord, st.floats(-1, 1)), min_size=6, max_size=6))
@settings(max_examples=40, deadline=None)
def test_coverage_and_depth_match_brute_force(pts):
    arr = np.array(pts)
    xy, depth = arr[:, :2], arr[:, 2]
    tris = np.array([[0, 1, 2], [3, 4, 5]])
    for i, j, k in tris:
        e1, e2 = xy[j] - xy[i], xy[k] - xy[i]
        assume(abs(e1[0] * e2[1] - e1[1] * e2[0]) > 0.5)
    plan = build_plan(xy, depth, tris, 16, 16)
    inside, strict, z = _brute_force(xy, depth, tris, 16, 16)
    cov = plan.coverage
    assert np.all(cov[strict.any(0)])          # strictly interior pixels are painted
    assert np.all(inside.any(0)[cov])          # nothing outside every footprint is painted
    unambiguous = strict.any(0) & ~((inside & ~strict).any(0))
    np.testing.assert_allclose(plan.depth[unambiguous], z.max(0)[unambiguous], atol=1e-9)


def test_top_left_rule_shares_edges_exactly():
    # a 4x4-pixel square split along its diagonal, edges on pixel centers
    xy = np.array([[2.0, 2.0], [6.0, 2.0], [6.0, 6.0], [2.0, 6.0]])
    plan = build_plan(xy, np.zeros(4), np.array([[0, 1, 2], [0, 2, 3]]), 10, 10)
    expected = np.zeros((10, 10), dtype=bool)
    expected[2:6, 2:6] = True
    np.testing.assert_array_equal(plan.coverage, expected)
    # the shared diagonal belongs to exactly one triangle
    diag = [plan.tri[i, i] for i in range(2, 6)]
    assert len(set(diag)) == 1


def test_constant_triangle_color():
    mesh = TriMesh(np.array([[5.0, 5, 0], [20, 5, 0], [5, 20, 0]]), np.array([[0, 1, 2]]),
                   np.zeros((3, 2)))
    cam = Camera(1.0, (0.0, 0.0), (32, 32))
    img = rasterize(mesh, cam, np.tile([1.0, 0.0, 0.0], (3, 1)))
    np.testing.assert_array_equal(img.pixels[10, 10], [1, 0, 0])
    assert img.coverage[10, 10]
    assert np.all(np.isfinite(img.depth) == img.coverage)
    assert not img.pixels[~img.coverage].any()


def test_nearer_triangle_wins():
    verts = np.array([[2.0, 2, 1], [20, 2, 1], [2, 20, 1], [2.0, 2, 0], [20, 2, 0], [2, 20, 0]])
    mesh = TriMesh(verts, np.array([[0, 1, 2], [3, 4, 5]]), np.zeros((6, 2)))
    colors = np.array([[0, 1, 0]] * 3 + [[1, 0, 0]] * 3, dtype=float)
    img = rasterize(mesh, Camera(1.0, (0.0, 0.0), (24, 24)), colors)
    np.testing.assert_allclose(img.pixels[img.coverage], np.tile([0, 1, 0], (img.coverage.sum(), 1)),
                               atol=1e-15)


def test_out_of_frame_mesh_has_no_coverage():
    mesh = grid_mesh(4)
    img = rasterize(mesh, Camera(10.0, (500.0, 500.0), (32, 32)), np.ones((16, 3)))
    assert not img.coverage.any()
    assert np.all(np.isneginf(img.depth))


def test_colors_are_clamped_and_checked():
    mesh = grid_mesh(4)
    cam = Camera(20.0, (4.0, 4.0), (32, 32))
    img = rasterize(mesh, cam, np.full((16, 3), 3.0))
    assert img.pixels.max() == 1.0
    with pytest.raises(ValueError):
        rasterize(mesh, cam, np.ones((15, 3)))


def test_rasterization_is_deterministic(model, rng):
    colors = rng.uniform(0, 1, size=(model.mesh.n_vertices, 3))
    a = rasterize(model.mesh, model.camera, colors)
    b = rasterize(model.mesh, model.camera, colors)
    assert a.pixels.tobytes() == b.pixels.tobytes()


def test_constant_image_samples(model):
    proj = project(model.mesh, model.camera)
    img = np.full((128, 128, 3), 0.3)
    vals, valid = sample_at_vertices(img, proj)
    assert valid.mean() > 0.95
    np.testing.assert_allclose(vals[valid], 0.3, atol=1e-15)
    vals, valid = sample_at_vertices(img, proj, mask=np.zeros(model.mesh.n_vertices, bool))
    assert not valid.any() and not vals.any()


def test_render_sample_round_trip(model, rng):
    light = LightingParams(np.tile([2.0, 0.2, -0.1, 0.5, 0.05, 0, 0, 0, 0], (3, 1)))
    colors = shade(model.texture_model.mean, model.basis, light)
    img = rasterize(model.mesh, model.camera, colors)
    proj = project(model.mesh, model.camera)
    plan = raster_plan(model.mesh, model.camera)
    vis = visibility(model.mesh, proj, plan)
    vals, valid = sample_at_vertices(img, proj, vis)
    err = np.abs(vals - colors)[valid]
    assert err.max() < 0.02
    assert err.mean() < 0.01


def test_bilinear_exact_on_affine_image():
    yy, xx = np.mgrid[0:20, 0:30].astype(float)
    img = (0.01 * xx + 0.02 * yy)[..., None]
    pts = np.array([[3.25, 4.5], [0.0, 0.0], [29.0, 19.0], [12.7, 18.9]])
    vals, valid = bilinear(img, pts)
    assert valid.all()
    np.testing.assert_allclose(vals[:, 0], 0.01 * pts[:, 0] + 0.02 * pts[:, 1], atol=1e-14)
    _, valid = bilinear(img, np.array([[-0.5, 3.0], [30.0, 1.0]]))
    assert not valid.any()


def test_coverage_aware_bilinear_ignores_background():
    img = np.zeros((4, 4, 1))
    img[:, :2] = 1.0
    cov = np.zeros((4, 4), dtype=bool)
    cov[:, :2] = True
    vals, valid = bilinear(img, np.array([[1.5, 1.5]]), cov)
    assert valid[0] and vals[0, 0] == 1.0
