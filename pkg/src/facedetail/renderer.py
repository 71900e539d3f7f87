"""Z-buffered triangle rasterization and bilinear read-back at vertices.

Coverage, depth and barycentric weights depend only on the projected
geometry, so they are computed once into a :class:`RasterPlan` and cached;
colouring a plan is a gather.
"""
from __future__ import annotations

import threading
from collections import OrderedDict
from dataclasses import dataclass

import numpy as np

from .geometry import Camera, TriMesh, footprint, project


@dataclass(frozen=True, eq=False)
class RasterPlan:
    """Per-pixel winning triangle, barycentrics and depth for a fixed geometry."""

    triangles: np.ndarray  # (M,3) vertex indices
    tri: np.ndarray        # (H,W) triangle id, -1 for background
    bary: np.ndarray       # (H,W,3)
    depth: np.ndarray      # (H,W), -inf for background
    xy: np.ndarray         # (N,2) vertex positions the plan was built from
    vertex_depth: np.ndarray  # (N,)

    @property
    def coverage(self) -> np.ndarray:
        return self.tri >= 0

    @property
    def shape(self) -> tuple[int, int]:
        return self.tri.shape

    def interpolate(self, values: np.ndarray) -> np.ndarray:
        """Barycentric interpolation of per-vertex values; zeros off coverage."""
        values = np.asarray(values, dtype=np.float64)
        squeeze = values.ndim == 1
        if squeeze:
            values = values[:, None]
        out = np.zeros(self.tri.shape + (values.shape[1],))
        cov = self.coverage
        corners = self.triangles[self.tri[cov]]
        b = self.bary[cov]
        out[cov] = (b[:, 0:1] * values[corners[:, 0]]
                    + b[:, 1:2] * values[corners[:, 1]]
                    + b[:, 2:3] * values[corners[:, 2]])
        return out[..., 0] if squeeze else out

    def plane_depth(self, points: np.ndarray, tri_ids: np.ndarray) -> np.ndarray:
        """Depth of each triangle's plane at the given 2D points (extrapolating)."""
        corners = self.triangles[tri_ids]
        a, b, c = (self.xy[corners[..., k]] for k in range(3))
        za, zb, zc = (self.vertex_depth[corners[..., k]] for k in range(3))
        e1 = b - a
        e2 = c - a
        q = points - a
        det = e1[..., 0] * e2[..., 1] - e1[..., 1] * e2[..., 0]
        det = np.where(det == 0, np.inf, det)
        l1 = (q[..., 0] * e2[..., 1] - q[..., 1] * e2[..., 0]) / det
        l2 = (e1[..., 0] * q[..., 1] - e1[..., 1] * q[..., 0]) / det
        return za + l1 * (zb - za) + l2 * (zc - za)


def _top_left(dx, dy):
    return (dy < 0) | ((dy == 0) & (dx > 0))


def build_plan(xy: np.ndarray, depth: np.ndarray, triangles: np.ndarray,
               width: int, height: int) -> RasterPlan:
    """Rasterize triangles given in continuous pixel coordinates.

    Pixel (row r, column c) has its center at (x=c, y=r). Shared edges are
    resolved with a top-left rule, and the fragment with larger depth wins.
    """
    xy = np.asarray(xy, dtype=np.float64)
    depth = np.asarray(depth, dtype=np.float64)
    triangles = np.asarray(triangles, dtype=np.int64)
    zbuf = np.full((height, width), -np.inf)
    tri_id = np.full((height, width), -1, dtype=np.int64)
    bary = np.zeros((height, width, 3))

    def edge(i, j, px, py):
        # Evaluated from the lower vertex index so that a shared edge gives
        # exactly opposite values in its two triangles.
        lo, hi, sign = (i, j, 1.0) if i < j else (j, i, -1.0)
        ax, ay = xy[lo]
        bx, by = xy[hi]
        e = (bx - ax) * (py - ay) - (by - ay) * (px - ax)
        return sign * e, sign * (bx - ax), sign * (by - ay)

    for t, (i, j, k) in enumerate(triangles):
        (ax, ay), (bx, by), (cx, cy) = xy[i], xy[j], xy[k]
        area = (bx - ax) * (cy - ay) - (by - ay) * (cx - ax)
        if area == 0 or not np.isfinite(area):
            continue
        x0 = max(int(np.ceil(min(ax, bx, cx))), 0)
        x1 = min(int(np.floor(max(ax, bx, cx))), width - 1)
        y0 = max(int(np.ceil(min(ay, by, cy))), 0)
        y1 = min(int(np.floor(max(ay, by, cy))), height - 1)
        if x0 > x1 or y0 > y1:
            continue
        px = np.arange(x0, x1 + 1, dtype=np.float64)[None, :]
        py = np.arange(y0, y1 + 1, dtype=np.float64)[:, None]
        inside = np.ones((y1 - y0 + 1, x1 - x0 + 1), dtype=bool)
        ws = []
        s = 1.0 if area > 0 else -1.0
        for (p, q) in ((j, k), (k, i), (i, j)):
            e, dx, dy = edge(p, q, px, py)
            e, dx, dy = s * e, s * dx, s * dy
            inside &= (e > 0) | ((e == 0) & _top_left(dx, dy))
            ws.append(e)
        if not inside.any():
            continue
        l0 = ws[0] * (s / area)
        l1 = ws[1] * (s / area)
        l2 = ws[2] * (s / area)
        d = l0 * depth[i] + l1 * depth[j] + l2 * depth[k]
        win = zbuf[y0:y1 + 1, x0:x1 + 1]
        upd = inside & (d > win)
        if not upd.any():
            continue
        win[upd] = d[upd]
        tri_id[y0:y1 + 1, x0:x1 + 1][upd] = t
        bary[y0:y1 + 1, x0:x1 + 1][upd] = np.stack([l0, l1, l2], axis=-1)[upd]
    return RasterPlan(triangles, tri_id, bary, zbuf, xy, depth)


_CACHE: OrderedDict = OrderedDict()
_CACHE_LOCK = threading.Lock()
_CACHE_SIZE = 16


def cached(key, factory):
    """Small process-wide LRU for geometry-only products."""
    with _CACHE_LOCK:
        if key in _CACHE:
            _CACHE.move_to_end(key)
            return _CACHE[key]
    value = factory()
    with _CACHE_LOCK:
        _CACHE[key] = value
        while len(_CACHE) > _CACHE_SIZE:
            _CACHE.popitem(last=False)
    return value


def camera_key(camera: Camera):
    return (camera.scale, camera.translation, camera.image_size)


def raster_plan(mesh: TriMesh, camera: Camera) -> RasterPlan:
    def make():
        xy, depth = project(mesh, camera)
        return build_plan(xy, depth, mesh.triangles, camera.width, camera.height)
    return cached(("image", mesh.key, camera_key(camera)), make)


@dataclass(frozen=True, eq=False)
class RasterImage:
    pixels: np.ndarray    # (H,W,3) in [0,1]
    depth: np.ndarray     # (H,W), -inf on background
    coverage: np.ndarray  # (H,W) bool


def rasterize(mesh: TriMesh, camera: Camera, vertex_colors: np.ndarray) -> RasterImage:
    """Render per-vertex colors with z-buffering; background black, colors clamped."""
    colors = np.asarray(vertex_colors, dtype=np.float64)
    if colors.shape != (mesh.n_vertices, 3):
        raise ValueError(
            f"vertex_colors must be ({mesh.n_vertices}, 3), got {colors.shape}")
    plan = raster_plan(mesh, camera)
    pixels = np.clip(plan.interpolate(colors), 0.0, 1.0)
    return RasterImage(pixels, plan.depth.copy(), plan.coverage.copy())


def bilinear(pixels: np.ndarray, xy: np.ndarray, coverage: np.ndarray | None = None):
    """Sample an (H,W,C) image at continuous positions.

    With ``coverage`` the uncovered corners are dropped and the remaining
    weights renormalized. Returns ``(values, valid)``.
    """
    h, w = pixels.shape[:2]
    inside, ix, iy, wts = footprint(np.asarray(xy, dtype=np.float64), w, h)
    if coverage is not None:
        wts = wts * coverage[iy, ix]
    total = wts.sum(axis=1)
    valid = inside & (total > 1e-12)
    safe = np.where(valid, total, 1.0)
    vals = np.einsum("nk,nkc->nc", wts, pixels[iy, ix]) / safe[:, None]
    vals[~valid] = 0.0
    return vals, valid


def sample_at_vertices(image, projected, mask: np.ndarray | None = None,
                       coverage: np.ndarray | None = None):
    """Bilinear image colors at projected vertex positions.

    ``image`` is a :class:`RasterImage` (its coverage is honoured) or an
    (H,W,3) array. Vertices outside ``mask`` or out of frame are invalid.
    Returns ``(colors (N,3), valid (N,))``.
    """
    if isinstance(image, RasterImage):
        pixels = image.pixels
        if coverage is None:
            coverage = image.coverage
    else:
        pixels = np.asarray(image, dtype=np.float64)
    xy = projected[0] if isinstance(projected, tuple) else projected
    vals, valid = bilinear(pixels, xy, coverage)
    if mask is not None:
        valid &= np.asarray(mask, dtype=bool)
    vals[~valid] = 0.0
    return vals, valid
