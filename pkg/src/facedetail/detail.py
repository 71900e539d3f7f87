"""UV warping, facial detail, the eight composition variants and attention targets."""
from __future__ import annotations

from dataclasses import dataclass
from enum import Enum

import numpy as np
import scipy.sparse

from .fitting import Decomposition, TextureModel
from .geometry import Camera, DEPTH_EPS, MeshError, TriMesh, depth_test, footprint, project
from .renderer import (RasterImage, build_plan, cached, camera_key,
                       raster_plan, rasterize)
from .sh_lighting import C0, LightingParams

UV_RESOLUTION = 256
ATTENTION_SIZE = 19
GRAY = np.array([0.299, 0.587, 0.114])


@dataclass(frozen=True, eq=False)
class MaskedImage:
    """Pixels (R,C,3) with a validity mask; invalid pixels hold 0."""

    pixels: np.ndarray
    validity: np.ndarray

    def __post_init__(self):
        if self.pixels.shape[:2] != self.validity.shape:
            raise ValueError("pixels and validity shapes differ")


class UVImage(MaskedImage):
    """A MaskedImage living in the mesh's UV parameterization."""


class Variant(str, Enum):
    """Inputs (a)-(h): four image-space compositions and their UV warps."""

    IN_A = "in-a"  # face image
    IN_B = "in-b"  # ambient light + common texture + shape
    IN_C = "in-c"  # identity texture + direct light + shape
    IN_D = "in-d"  # identity texture + shape
    IN_E = "in-e"  # face image without shape
    IN_F = "in-f"  # ambient light + common texture
    IN_G = "in-g"  # identity texture + direct light (facial detail)
    IN_H = "in-h"  # identity texture

    @property
    def in_uv(self) -> bool:
        return self in (Variant.IN_E, Variant.IN_F, Variant.IN_G, Variant.IN_H)


def remap(signed: np.ndarray) -> np.ndarray:
    """Store a signed value in [-1,1] as [0,1]."""
    return np.clip((signed + 1.0) * 0.5, 0.0, 1.0)


@dataclass(frozen=True, eq=False)
class UVPlan:
    """For each texel: the image position it reads from and whether it is valid."""

    xy: np.ndarray        # (R,R,2)
    validity: np.ndarray  # (R,R) bool
    weights: scipy.sparse.csr_matrix  # (valid texels, H*W) coverage-aware bilinear


def uv_plan(mesh: TriMesh, camera: Camera, resolution: int = UV_RESOLUTION,
            eps_z: float = DEPTH_EPS) -> UVPlan:
    if mesh.uv is None:
        raise MeshError("mesh has no uv coordinates")

    def make():
        r = resolution
        xy, depth = project(mesh, camera)
        layout = build_plan(mesh.uv * (r - 1), depth, mesh.triangles, r, r)
        cov = layout.coverage
        pos = layout.interpolate(xy)
        z = layout.interpolate(depth)
        img = raster_plan(mesh, camera)
        h, w = img.shape
        valid = np.zeros_like(cov)
        flat_pos = pos[cov]
        ok = depth_test(flat_pos, z[cov], img, eps_z)
        inside, ix, iy, wts = footprint(flat_pos, w, h)
        wts = wts * img.coverage[iy, ix]
        total = wts.sum(axis=1)
        # A texel also needs at least one covered image pixel to read from.
        keep = ok & inside & (total > 1e-12)
        valid[cov] = keep
        pos[~valid] = 0.0
        wts = wts[keep] / total[keep, None]
        rows = np.repeat(np.arange(int(keep.sum())), 4)
        cols = (iy[keep] * w + ix[keep]).reshape(-1)
        mat = scipy.sparse.csr_matrix((wts.reshape(-1), (rows, cols)),
                                      shape=(int(keep.sum()), h * w))
        return UVPlan(pos, valid, mat)

    return cached(("uv", mesh.key, camera_key(camera), resolution, eps_z), make)


def _pixels(image) -> np.ndarray:
    if isinstance(image, (RasterImage, MaskedImage)):
        return image.pixels
    return np.asarray(image, dtype=np.float64)


def uv_warp(image, mesh: TriMesh, camera: Camera,
            resolution: int = UV_RESOLUTION) -> UVImage:
    """Transfer image pixels into the mesh's UV space.

    Each texel covered by a triangle in UV space reads the image bilinearly
    at its projected position, using only pixels covered by the mesh; texels
    that are occluded, out of frame or uncovered are invalid.
    """
    pixels = _pixels(image)
    if pixels.shape[:2] != (camera.height, camera.width):
        raise ValueError(
            f"image is {pixels.shape[1]}x{pixels.shape[0]}, camera expects "
            f"{camera.width}x{camera.height}")
    plan = uv_plan(mesh, camera, resolution)
    out = np.zeros((resolution, resolution, pixels.shape[2]))
    out[plan.validity] = plan.weights @ pixels.reshape(-1, pixels.shape[2])
    return UVImage(out, plan.validity.copy())


def ambient_common_colors(light: LightingParams, beta, model: TextureModel) -> np.ndarray:
    """Per-vertex h1*gamma1 * (T_mean + B beta)."""
    return model.common(beta) * (C0 * light.gamma[:, 0])[None, :]


def _signed_detail(image, mesh, camera, light, beta, model) -> np.ndarray:
    pixels = _pixels(image)
    amb = rasterize(mesh, camera, ambient_common_colors(light, beta, model))
    diff = np.where(amb.coverage[..., None], pixels - amb.pixels, 0.0)
    return diff


def _warp_signed(signed, mesh, camera, resolution) -> UVImage:
    uv = uv_warp(signed, mesh, camera, resolution)
    px = np.where(uv.validity[..., None], remap(uv.pixels), 0.0)
    return UVImage(px, uv.validity)


def facial_detail(image, mesh: TriMesh, camera: Camera, light: LightingParams, beta,
                  model: TextureModel, resolution: int = UV_RESOLUTION) -> UVImage:
    """UV map of the image minus its ambient-lit common texture, stored via remap."""
    signed = _signed_detail(image, mesh, camera, light, beta, model)
    return _warp_signed(signed, mesh, camera, resolution)


def _image_variant(signed_or_plain: np.ndarray, coverage: np.ndarray, signed: bool) -> MaskedImage:
    px = remap(signed_or_plain) if signed else signed_or_plain
    px = np.where(coverage[..., None], px, 0.0)
    return MaskedImage(px, coverage.copy())


def compose_all(decomp: Decomposition, mesh: TriMesh, camera: Camera, model: TextureModel,
                original, variants=None, resolution: int = UV_RESOLUTION) -> dict:
    """Build several variants at once, sharing intermediate renders."""
    wanted = [Variant(v) for v in (variants or list(Variant))]
    pixels = _pixels(original)
    plan = raster_plan(mesh, camera)
    cov = plan.coverage
    out: dict[Variant, MaskedImage] = {}
    cache: dict[str, np.ndarray] = {}

    def amb():
        if "amb" not in cache:
            cache["amb"] = rasterize(
                mesh, camera, ambient_common_colors(decomp.light, decomp.beta, model)).pixels
        return cache["amb"]

    def detail():
        if "detail" not in cache:
            cache["detail"] = _signed_detail(pixels, mesh, camera, decomp.light,
                                             decomp.beta, model)
        return cache["detail"]

    def itex():
        if "itex" not in cache:
            cache["itex"] = plan.interpolate(decomp.t_id)
        return cache["itex"]

    for v in wanted:
        if v is Variant.IN_A:
            out[v] = MaskedImage(pixels, np.ones(pixels.shape[:2], dtype=bool))
        elif v is Variant.IN_B:
            out[v] = _image_variant(amb(), cov, signed=False)
        elif v is Variant.IN_C:
            out[v] = _image_variant(detail(), cov, signed=True)
        elif v is Variant.IN_D:
            out[v] = _image_variant(itex(), cov, signed=True)
        elif v is Variant.IN_E:
            out[v] = uv_warp(pixels, mesh, camera, resolution)
        elif v is Variant.IN_F:
            uv = uv_warp(amb(), mesh, camera, resolution)
            out[v] = UVImage(uv.pixels, uv.validity)
        elif v is Variant.IN_G:
            out[v] = _warp_signed(detail(), mesh, camera, resolution)
        elif v is Variant.IN_H:
            out[v] = _warp_signed(itex(), mesh, camera, resolution)
    return out


def compose_variant(decomp: Decomposition, mesh: TriMesh, camera: Camera,
                    model: TextureModel, variant: Variant, original,
                    resolution: int = UV_RESOLUTION) -> MaskedImage:
    variant = Variant(variant)
    return compose_all(decomp, mesh, camera, model, original, [variant], resolution)[variant]


def grayscale(pixels: np.ndarray) -> np.ndarray:
    return pixels @ GRAY


def pool_mean(values: np.ndarray, out_size: int) -> np.ndarray:
    """Average-pool a square map into ``out_size`` x ``out_size`` near-equal bins."""
    r = values.shape[0]
    edges = np.linspace(0, r, out_size + 1).round().astype(int)
    sums = np.add.reduceat(np.add.reduceat(values, edges[:-1], axis=0), edges[:-1], axis=1)
    counts = np.diff(edges)
    return sums / np.outer(counts, counts)


def attention_target(fd_real: MaskedImage, fd_fake: MaskedImage,
                     out_size: int = ATTENTION_SIZE) -> np.ndarray:
    """|gray(FD_real) - gray(FD_fake)| on shared valid texels, average-pooled."""
    if fd_real.pixels.shape != fd_fake.pixels.shape:
        raise ValueError(
            f"facial detail resolutions differ: {fd_real.pixels.shape} vs {fd_fake.pixels.shape}")
    if fd_real.pixels.shape[0] != fd_real.pixels.shape[1]:
        raise ValueError("facial detail maps must be square")
    if not 1 <= out_size <= fd_real.pixels.shape[0]:
        raise ValueError(f"out_size must be in [1, {fd_real.pixels.shape[0]}]")
    both = fd_real.validity & fd_fake.validity
    diff = np.abs(grayscale(fd_real.pixels) - grayscale(fd_fake.pixels))
    diff = np.where(both, diff, 0.0)
    return pool_mean(diff, out_size)


def pooled_region(mask: np.ndarray, mesh: TriMesh, camera: Camera,
                  out_size: int = ATTENTION_SIZE, resolution: int = UV_RESOLUTION) -> np.ndarray:
    """Attention cells touched by an image-space region mask.

    The mask is warped to UV like any image; a texel belongs to the region
    when any of its bilinear footprint lies inside the mask.
    """
    m = np.asarray(mask, dtype=np.float64)[..., None]
    uv = uv_warp(m, mesh, camera, resolution)
    region = uv.validity & (uv.pixels[..., 0] > 0)
    return pool_mean(region.astype(np.float64), out_size) > 0
