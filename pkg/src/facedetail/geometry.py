"""Triangle meshes, vertex normals, weak-perspective projection and visibility."""
from __future__ import annotations

import hashlib
from dataclasses import dataclass
from functools import cached_property

import numpy as np

from .formats import FormatError

DEPTH_EPS = 1e-3


class MeshError(ValueError):
    pass


def _frozen(arr, dtype):
    out = np.array(arr, dtype=dtype, copy=True)
    out.setflags(write=False)
    return out


@dataclass(frozen=True, eq=False)
class TriMesh:
    """Vertices (N,3), triangles (M,3) as 0-based indices, per-vertex uv (N,2)."""

    vertices: np.ndarray
    triangles: np.ndarray
    uv: np.ndarray | None = None

    def __post_init__(self):
        v = _frozen(self.vertices, np.float64)
        t = _frozen(self.triangles, np.int64)
        if v.ndim != 2 or v.shape[1] != 3:
            raise MeshError(f"vertices must be (N,3), got {v.shape}")
        if t.ndim != 2 or t.shape[1] != 3:
            raise MeshError(f"triangles must be (M,3), got {t.shape}")
        if not np.all(np.isfinite(v)):
            raise MeshError("vertex coordinates contain NaN or inf")
        if t.size and (t.min() < 0 or t.max() >= len(v)):
            raise MeshError("triangle index out of range")
        object.__setattr__(self, "vertices", v)
        object.__setattr__(self, "triangles", t)
        if self.uv is not None:
            uv = _frozen(self.uv, np.float64)
            if uv.shape != (len(v), 2):
                raise MeshError(f"uv must be ({len(v)},2), got {uv.shape}")
            if not np.all(np.isfinite(uv)) or uv.min() < 0.0 or uv.max() > 1.0:
                raise MeshError("uv coordinates must lie in [0,1]^2")
            object.__setattr__(self, "uv", uv)
        if not np.any(self.face_areas > 0):
            raise MeshError("mesh has no non-degenerate triangle")

    @property
    def n_vertices(self) -> int:
        return len(self.vertices)

    @cached_property
    def face_cross(self) -> np.ndarray:
        """Unnormalized face normals (length = twice the triangle area)."""
        a, b, c = (self.vertices[self.triangles[:, k]] for k in range(3))
        return np.cross(b - a, c - a)

    @cached_property
    def face_areas(self) -> np.ndarray:
        return 0.5 * np.linalg.norm(self.face_cross, axis=1)

    @cached_property
    def key(self) -> str:
        h = hashlib.blake2b(digest_size=16)
        h.update(self.vertices.tobytes())
        h.update(self.triangles.tobytes())
        if self.uv is not None:
            h.update(self.uv.tobytes())
        return h.hexdigest()


@dataclass(frozen=True)
class Camera:
    """Scaled orthographic camera: pixel = scale * (x, y) + translation."""

    scale: float
    translation: tuple[float, float] = (0.0, 0.0)
    image_size: tuple[int, int] = (128, 128)  # (width, height)

    def __post_init__(self):
        if not np.isfinite(self.scale) or self.scale <= 0:
            raise ValueError(f"camera scale must be > 0, got {self.scale}")
        w, h = self.image_size
        if w < 8 or h < 8:
            raise ValueError(f"image size must be at least 8x8, got {w}x{h}")
        object.__setattr__(self, "scale", float(self.scale))
        object.__setattr__(self, "translation", tuple(float(t) for t in self.translation))
        object.__setattr__(self, "image_size", (int(w), int(h)))

    @property
    def width(self) -> int:
        return self.image_size[0]

    @property
    def height(self) -> int:
        return self.image_size[1]

    def to_dict(self) -> dict:
        return {"scale": self.scale, "translation": list(self.translation),
                "image_size": list(self.image_size)}

    @classmethod
    def from_dict(cls, d: dict) -> "Camera":
        return cls(d["scale"], tuple(d["translation"]), tuple(d["image_size"]))


def compute_vertex_normals(mesh: TriMesh) -> np.ndarray:
    """Area-weighted unit vertex normals, shape (N,3).

    Zero-area triangles contribute nothing. Counter-clockwise winding seen
    from +z yields normals pointing toward +z.
    """
    cross = mesh.face_cross
    keep = mesh.face_areas > 0
    acc = np.zeros_like(mesh.vertices)
    tris = mesh.triangles[keep]
    for k in range(3):
        np.add.at(acc, tris[:, k], cross[keep])
    length = np.linalg.norm(acc, axis=1)
    bad = np.flatnonzero(length == 0)
    if bad.size:
        raise MeshError(f"vertex {bad[0]} is not part of any non-degenerate triangle")
    return acc / length[:, None]


def project(mesh: TriMesh, camera: Camera) -> tuple[np.ndarray, np.ndarray]:
    """Return per-vertex pixel positions (N,2) as (x, y) and depth (N,).

    Larger depth is nearer the viewer.
    """
    xy = camera.scale * mesh.vertices[:, :2] + np.asarray(camera.translation)
    return xy, mesh.vertices[:, 2].copy()


def footprint(xy: np.ndarray, width: int, height: int):
    """Bilinear footprint of continuous pixel positions.

    Pixel centers sit at integer coordinates. Returns ``(inside, ix, iy, w)``
    where ``ix``/``iy`` are (n,4) corner indices and ``w`` the (n,4) bilinear
    weights; positions outside [0,W-1]x[0,H-1] have ``inside`` False.
    """
    x = xy[:, 0]
    y = xy[:, 1]
    inside = (x >= 0) & (x <= width - 1) & (y >= 0) & (y <= height - 1)
    xc = np.clip(x, 0, width - 1)
    yc = np.clip(y, 0, height - 1)
    x0 = np.minimum(np.floor(xc).astype(np.int64), width - 2)
    y0 = np.minimum(np.floor(yc).astype(np.int64), height - 2)
    fx = xc - x0
    fy = yc - y0
    ix = np.stack([x0, x0 + 1, x0, x0 + 1], axis=1)
    iy = np.stack([y0, y0, y0 + 1, y0 + 1], axis=1)
    w = np.stack([(1 - fx) * (1 - fy), fx * (1 - fy), (1 - fx) * fy, fx * fy], axis=1)
    return inside, ix, iy, w


def depth_test(xy, depth, zbuffer, eps: float = DEPTH_EPS) -> np.ndarray:
    """Visibility of surface points against a z-buffer.

    ``zbuffer`` is a depth image or a raster plan. A point is visible when it
    lies in frame and its depth is no more than ``eps`` behind the z-buffer
    surface in its bilinear footprint, taking the farthest covered corner.
    With a plan, each corner's winning triangle plane is evaluated at the
    point itself rather than at the pixel center, which keeps silhouette
    vertices from being occluded by their own neighbours. Points whose
    footprint has no coverage are unoccluded.
    """
    xy = np.asarray(xy, dtype=np.float64)
    depth = np.asarray(depth, dtype=np.float64)
    plan = None if isinstance(zbuffer, np.ndarray) else zbuffer
    zimg = zbuffer if plan is None else plan.depth
    h, w = zimg.shape
    inside, ix, iy, _ = footprint(xy, w, h)
    covered = np.isfinite(zimg[iy, ix])
    if plan is None:
        z = zimg[iy, ix]
    else:
        tri = plan.tri[iy, ix]
        z = plan.plane_depth(np.broadcast_to(xy[:, None, :], tri.shape + (2,)),
                             np.where(covered, tri, 0))
    ref = np.where(covered, z, np.inf).min(axis=1)
    return inside & (~covered.any(axis=1) | (depth >= ref - eps))


def visibility(mesh: TriMesh, projected, zbuffer, eps: float = DEPTH_EPS) -> np.ndarray:
    """Per-vertex visibility mask from projected positions and a z-buffer.

    ``zbuffer`` is the raster plan of the same projection (preferred) or a
    plain depth image.
    """
    xy, depth = projected
    if len(xy) != mesh.n_vertices:
        raise MeshError("projected positions do not match the mesh vertex count")
    zimg = zbuffer if isinstance(zbuffer, np.ndarray) else zbuffer.depth
    if zimg.ndim != 2:
        raise ValueError(f"zbuffer must be 2D, got shape {zimg.shape}")
    return depth_test(xy, depth, zbuffer, eps)


def check_zbuffer(zbuffer: np.ndarray, camera: Camera) -> None:
    if zbuffer.shape != (camera.height, camera.width):
        raise ValueError(
            f"zbuffer is {zbuffer.shape[1]}x{zbuffer.shape[0]}, camera expects "
            f"{camera.width}x{camera.height}")


def icosphere(subdivisions: int = 3) -> TriMesh:
    """Unit icosphere with outward CCW winding and spherical uv."""
    t = (1.0 + 5 ** 0.5) / 2.0
    verts = [(-1, t, 0), (1, t, 0), (-1, -t, 0), (1, -t, 0),
             (0, -1, t), (0, 1, t), (0, -1, -t), (0, 1, -t),
             (t, 0, -1), (t, 0, 1), (-t, 0, -1), (-t, 0, 1)]
    faces = [(0, 11, 5), (0, 5, 1), (0, 1, 7), (0, 7, 10), (0, 10, 11),
             (1, 5, 9), (5, 11, 4), (11, 10, 2), (10, 7, 6), (7, 1, 8),
             (3, 9, 4), (3, 4, 2), (3, 2, 6), (3, 6, 8), (3, 8, 9),
             (4, 9, 5), (2, 4, 11), (6, 2, 10), (8, 6, 7), (9, 8, 1)]
    v = [np.array(p, dtype=np.float64) / np.linalg.norm(p) for p in verts]
    for _ in range(subdivisions):
        cache: dict[tuple[int, int], int] = {}

        def mid(i, j):
            key = (min(i, j), max(i, j))
            if key not in cache:
                m = v[i] + v[j]
                v.append(m / np.linalg.norm(m))
                cache[key] = len(v) - 1
            return cache[key]

        new = []
        for a, b, c in faces:
            ab, bc, ca = mid(a, b), mid(b, c), mid(c, a)
            new += [(a, ab, ca), (b, bc, ab), (c, ca, bc), (ab, bc, ca)]
        faces = new
    vv = np.array(v)
    uv = np.stack([(np.arctan2(vv[:, 1], vv[:, 0]) + np.pi) / (2 * np.pi),
                   np.arccos(np.clip(vv[:, 2], -1, 1)) / np.pi], axis=1)
    return TriMesh(vv, np.array(faces), np.clip(uv, 0, 1))


def read_mesh(path) -> TriMesh:
    """Parse the text mesh format: ``v x y z u w`` and ``f i j k`` records."""
    verts, uvs, faces = [], [], []
    with open(path, encoding="ascii") as fh:
        for lineno, line in enumerate(fh, 1):
            parts = line.split()
            if not parts:
                continue
            tag = parts[0]
            try:
                if tag == "v" and len(parts) == 6:
                    vals = [float(p) for p in parts[1:]]
                    verts.append(vals[:3])
                    uvs.append(vals[3:])
                elif tag == "f" and len(parts) == 4:
                    faces.append([int(p) for p in parts[1:]])
                else:
                    raise FormatError(f"{path}:{lineno}: unsupported record {line.strip()!r}")
            except ValueError as exc:
                if isinstance(exc, FormatError):
                    raise
                raise FormatError(f"{path}:{lineno}: malformed number") from exc
    if not verts or not faces:
        raise FormatError(f"{path}: mesh needs at least one vertex and one face")
    return TriMesh(np.array(verts), np.array(faces), np.array(uvs))


def write_mesh(path, mesh: TriMesh) -> None:
    if mesh.uv is None:
        raise MeshError("the text mesh format requires uv coordinates")
    with open(path, "w", encoding="ascii") as fh:
        for p, t in zip(mesh.vertices, mesh.uv):
            fh.write("v " + " ".join(repr(float(x)) for x in (*p, *t)) + "\n")
        for f in mesh.triangles:
            fh.write(f"f {f[0]} {f[1]} {f[2]}\n")
