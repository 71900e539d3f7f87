"""Synthetic morphable face model, face sampling and lighting-mismatched splices."""
from __future__ import annotations

import json
import math
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np
from scipy.ndimage import gaussian_filter

from . import formats
from .fitting import TextureModel, interior_vertices
from .geometry import (Camera, TriMesh, compute_vertex_normals, project, visibility,
                       write_mesh, read_mesh)
from .renderer import RasterImage, raster_plan, rasterize
from .sh_lighting import C0, DIRECT_BASIS_NORM, LightingParams, directional_light, sh_basis

MAX_SOURCE_RETRIES = 1000


class InsufficientLightingInconsistency(ValueError):
    def __init__(self, angle, required):
        super().__init__(
            f"insufficient lighting inconsistency: {angle:.1f} deg between source and "
            f"target light, need {required:.1f}")


class DatasetExhaustedError(RuntimeError):
    def __init__(self, index, tries):
        self.index = index
        super().__init__(
            f"item {index}: no admissible source/target light pair after {tries} retries")


@dataclass(frozen=True)
class SamplingRanges:
    gamma1: tuple[float, float] = (0.8, 2.5)        # ambient gamma1 (shading = gamma1 / sqrt(4 pi))
    direct_ratio: tuple[float, float] = (0.0, 0.6)  # peak direct shading / ambient shading
    light_cone_deg: float = 70.0                    # light directions within this angle of +z
    tint: float = 0.08                              # per-channel light color jitter
    t_id_amplitude: float = 0.15
    t_id_smoothness: float = 1.0                    # gaussian sigma in grid cells


@dataclass(frozen=True, eq=False)
class SyntheticModel:
    mesh: TriMesh
    camera: Camera
    texture_model: TextureModel
    ranges: SamplingRanges = field(default_factory=SamplingRanges)
    grid_n: int = 48
    seed: int = 0

    @property
    def basis(self) -> np.ndarray:
        return _basis_cache(self)


def _basis_cache(model: SyntheticModel) -> np.ndarray:
    key = "_sh_basis"
    if key not in model.__dict__:
        model.__dict__[key] = sh_basis(compute_vertex_normals(model.mesh))
    return model.__dict__[key]


def default_camera(image_size: int = 128) -> Camera:
    s = image_size / 128.0
    return Camera(scale=46.0 * s, translation=(63.5 * s, 63.5 * s),
                  image_size=(image_size, image_size))


def face_mesh(grid_n: int = 48, radii=(1.0, 1.3, 0.9),
              max_azimuth_deg: float = 75.0, max_elevation_deg: float = 70.0) -> TriMesh:
    """Front half-ellipsoid sampled on a grid_n x grid_n lattice; uv = lattice coords.

    Image rows grow with model y, so the top of the lattice (v=0) is the
    forehead and the surface faces +z.
    """
    a, b, c = radii
    u = np.linspace(0.0, 1.0, grid_n)
    v = np.linspace(0.0, 1.0, grid_n)
    uu, vv = np.meshgrid(u, v)  # row = v, column = u
    theta = np.radians(max_azimuth_deg) * (2 * uu - 1)
    phi = np.radians(max_elevation_deg) * (1 - 2 * vv)
    x = a * np.cos(phi) * np.sin(theta)
    y = -b * np.sin(phi)
    z = c * np.cos(phi) * np.cos(theta)
    verts = np.stack([x, y, z], axis=-1).reshape(-1, 3)
    uv = np.stack([uu, vv], axis=-1).reshape(-1, 2)
    idx = np.arange(grid_n * grid_n).reshape(grid_n, grid_n)
    p00, p01 = idx[:-1, :-1].ravel(), idx[:-1, 1:].ravel()
    p10, p11 = idx[1:, :-1].ravel(), idx[1:, 1:].ravel()
    tris = np.concatenate([np.stack([p00, p10, p01], 1), np.stack([p01, p10, p11], 1)])
    mesh = TriMesh(verts, tris, uv)
    # Orient so that face normals point toward the viewer (+z).
    if np.mean(mesh.face_cross[:, 2]) < 0:
        mesh = TriMesh(verts, tris[:, [0, 2, 1]], uv)
    return mesh


def _gram_schmidt(cols: np.ndarray) -> np.ndarray:
    out = []
    for col in cols.T:
        w = col.copy()
        for _ in range(2):  # re-orthogonalize once for stability
            for q in out:
                w -= (q @ w) * q
        n = np.linalg.norm(w)
        if n < 1e-10:
            raise ValueError("texture basis candidates are linearly dependent")
        out.append(w / n)
    return np.stack(out, axis=1)


def lighting_design_space(mesh: TriMesh, mean: np.ndarray) -> np.ndarray:
    """The 27 vectors (3N each) h_j * T_mean restricted to one color channel."""
    H = sh_basis(compute_vertex_normals(mesh))
    n = len(mean)
    cols = np.zeros((n, 3, 3, 9))
    for c in range(3):
        cols[:, c, c, :] = H * mean[:, c:c + 1]
    return cols.reshape(3 * n, 27)


def build_model(seed: int = 0, grid_n: int = 48, k: int = 8,
                image_size: int = 128) -> SyntheticModel:
    """Deterministic synthetic morphable model.

    The mean texture is a smooth skin-tone gradient in [0.3, 0.8]; the K
    texture bases are low-frequency cosine patterns with random channel
    mixes, made orthogonal to the lighting design space of the mean texture
    on the interior vertices and then orthonormalized by Gram-Schmidt.
    """
    if grid_n < 8:
        raise ValueError(f"grid_n must be >= 8, got {grid_n}")
    if k < 1:
        raise ValueError(f"K must be >= 1, got {k}")
    n = grid_n * grid_n
    if k > 3 * n:
        raise ValueError(f"K={k} exceeds the texture dimension 3N={3 * n}")
    if k > 3 * n - 27:
        raise ValueError(f"K={k} leaves no room beside the 27 lighting directions")
    rng = np.random.default_rng(np.random.SeedSequence([seed, 0x7E47]))
    mesh = face_mesh(grid_n)
    u, v = mesh.uv[:, 0], mesh.uv[:, 1]

    skin = np.array([0.68, 0.52, 0.42])
    shade = 0.06 * np.cos(np.pi * (u - 0.5)) + 0.05 * (0.5 - v)
    wobble = 0.03 * np.sin(2 * np.pi * (u + rng.uniform())) * np.cos(np.pi * v)
    mean = np.clip(skin[None, :] + (shade + wobble)[:, None] * np.array([1.0, 0.9, 0.8]),
                   0.3, 0.8)

    cands = []
    freqs = [(fu, fv) for total in range(0, 8) for fu in range(total + 1)
             for fv in [total - fu]]
    for j in range(3 * n):
        if j >= len(freqs):
            cands.append(rng.normal(size=3 * n))
        else:
            fu, fv = freqs[j]
            phase_u, phase_v = rng.uniform(0, np.pi, size=2)
            pattern = np.cos(np.pi * fu * u + phase_u) * np.cos(np.pi * fv * v + phase_v)
            mix = rng.normal(size=3) * 0.3 + np.array([1.0, 0.85, 0.7]) * (1 if j % 2 == 0 else -0.3)
            cands.append((pattern[:, None] * mix[None, :]).reshape(-1))
        if len(cands) == k:
            break
    # Keep the bases out of span{h_j * T_mean_c}, the space the mean-texture
    # lighting fit can express; otherwise common texture leaks into gamma.
    # The fit sees only the interior vertices, so orthogonality is imposed
    # there. The correction is a combination of the smooth design columns
    # over the whole mesh, so the bases stay smooth across the rim.
    camera = default_camera(image_size)
    design = lighting_design_space(mesh, mean)
    seen = np.repeat(interior_vertices(mesh, camera), 3)
    cands = np.stack(cands, axis=1)
    for _ in range(2):
        coef = np.linalg.lstsq(design[seen], cands[seen], rcond=None)[0]
        cands = cands - design @ coef
    basis = _gram_schmidt(cands)
    # beta_k ~ N(0, scale_k^2) gives albedo rms of about 0.05 / sqrt(k+1) per component.
    scales = 0.05 * np.sqrt(3 * n) / np.sqrt(np.arange(1, k + 1))
    tex = TextureModel(mean, basis, scales)
    return SyntheticModel(mesh, camera, tex, SamplingRanges(), grid_n, seed)


@dataclass(frozen=True, eq=False)
class FaceParams:
    light: LightingParams
    beta: np.ndarray
    t_id: np.ndarray


@dataclass(frozen=True, eq=False)
class FaceSample:
    params: FaceParams
    image: RasterImage
    vertex_colors: np.ndarray          # pre-clamp shading
    label: str = "real"
    forgery_region: np.ndarray | None = None
    source_params: FaceParams | None = None

    @property
    def is_fake(self) -> bool:
        return self.label == "fake"


def _random_direction(rng, cone_deg: float) -> np.ndarray:
    cos_max = math.cos(math.radians(cone_deg))
    cz = rng.uniform(cos_max, 1.0)
    phi = rng.uniform(0, 2 * math.pi)
    s = math.sqrt(1 - cz * cz)
    return np.array([s * math.cos(phi), s * math.sin(phi), cz])


def random_direct_light(rng, ambient_gamma1: np.ndarray, ranges: SamplingRanges,
                        direction=None) -> np.ndarray:
    """Bands 1-2 of a directional light, scaled so peak direct shading stays
    within ``direct_ratio`` of the ambient shading on every channel."""
    if direction is None:
        direction = _random_direction(rng, ranges.light_cone_deg)
    ratio = rng.uniform(*ranges.direct_ratio)
    coeffs = directional_light(direction)[1:]
    tint = 1.0 + ranges.tint * rng.uniform(-1, 1, size=3)
    amb_shading = C0 * ambient_gamma1.min()
    norm = ratio * amb_shading / DIRECT_BASIS_NORM
    return np.outer(tint / tint.max(), coeffs * norm / np.linalg.norm(coeffs))


def random_identity_texture(rng, grid_n: int, ranges: SamplingRanges) -> np.ndarray:
    noise = rng.normal(size=(grid_n, grid_n, 3))
    smooth = gaussian_filter(noise, sigma=(ranges.t_id_smoothness, ranges.t_id_smoothness, 0),
                             mode="reflect")
    peak = np.abs(smooth).max()
    amp = rng.uniform(0.0, ranges.t_id_amplitude)
    return (smooth / peak * amp).reshape(-1, 3)


def render_params(model: SyntheticModel, params: FaceParams):
    """Pre-clamp vertex colors and the rasterized image for ground-truth params."""
    albedo = model.texture_model.common(params.beta) + params.t_id
    colors = (model.basis @ params.light.gamma.T) * albedo
    return colors, rasterize(model.mesh, model.camera, colors)


def sample_params(model: SyntheticModel, rng, *, ambient=None, beta=None,
                  direct: bool = True) -> FaceParams:
    r = model.ranges
    if ambient is None:
        g1 = rng.uniform(*r.gamma1)
        ambient = g1 * (1.0 + r.tint * rng.uniform(-1, 1, size=3))
    gamma = np.zeros((3, 9))
    gamma[:, 0] = ambient
    d = random_direct_light(rng, ambient, r)
    if direct:
        gamma[:, 1:] = d
    if beta is None:
        beta = rng.normal(size=model.texture_model.k) * model.texture_model.scales
    t_id = random_identity_texture(rng, model.grid_n, r)
    return FaceParams(LightingParams(gamma), np.asarray(beta, dtype=np.float64), t_id)


def sample_face(model: SyntheticModel, rng, *, direct: bool = True) -> FaceSample:
    """Draw a real face: lighting, common texture, identity texture, then render."""
    params = sample_params(model, rng, direct=direct)
    colors, image = render_params(model, params)
    return FaceSample(params, image, colors)


def sample_source(model: SyntheticModel, target: FaceSample, rng) -> FaceSample:
    """A donor face that shares the target's ambient light and common texture
    but has its own identity texture and direct light."""
    params = sample_params(model, rng, ambient=target.params.light.gamma[:, 0].copy(),
                           beta=target.params.beta.copy())
    colors, image = render_params(model, params)
    return FaceSample(params, image, colors)


@dataclass(frozen=True)
class ForgeryConfig:
    center: tuple[float, float] = (63.5, 62.0)   # (x, y) pixels
    radii: tuple[float, float] = (24.0, 28.0)    # (rx, ry) pixels
    feather_sigma: float = 1.0
    light_mismatch: float = 40.0                 # degrees

    def __post_init__(self):
        if min(self.radii) <= 0:
            raise ValueError("forgery region radii must be > 0 (empty region is degenerate)")
        if self.feather_sigma < 0:
            raise ValueError("feather_sigma must be >= 0")
        if not 0.0 <= self.light_mismatch <= 180.0:
            raise ValueError("light_mismatch must lie in [0, 180] degrees")

    def scaled(self, factor: float) -> "ForgeryConfig":
        """The same region for an image ``factor`` times larger."""
        c = tuple((x + 0.5) * factor - 0.5 for x in self.center)
        return replace(self, center=c, radii=tuple(r * factor for r in self.radii),
                       feather_sigma=self.feather_sigma * factor)


def blend_alpha(shape, cfg: ForgeryConfig) -> np.ndarray:
    """Feathered ellipse alpha; exactly 0 beyond four sigmas of the boundary."""
    h, w = shape
    yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)
    cx, cy = cfg.center
    rx, ry = cfg.radii
    inside = (((xx - cx) / rx) ** 2 + ((yy - cy) / ry) ** 2 <= 1.0).astype(np.float64)
    if cfg.feather_sigma == 0:
        return inside
    alpha = gaussian_filter(inside, cfg.feather_sigma, mode="constant", truncate=4.0)
    alpha[alpha < 1e-12] = 0.0
    return np.clip(alpha, 0.0, 1.0)


def light_angle(a: LightingParams, b: LightingParams) -> float:
    da, db = a.dominant_direction(), b.dominant_direction()
    if not da.any() or not db.any():
        return 0.0
    return math.degrees(math.acos(float(np.clip(da @ db, -1.0, 1.0))))


def forge(target: FaceSample, source: FaceSample, cfg: ForgeryConfig) -> FaceSample:
    """Alpha-blend the source face into the target inside the configured ellipse."""
    if target.image.pixels.shape != source.image.pixels.shape:
        raise ValueError("source and target must be rendered with the same camera")
    angle = light_angle(target.params.light, source.params.light)
    if angle < cfg.light_mismatch:
        raise InsufficientLightingInconsistency(angle, cfg.light_mismatch)
    alpha = blend_alpha(target.image.pixels.shape[:2], cfg)
    a = alpha[..., None]
    blended = a * source.image.pixels + (1.0 - a) * target.image.pixels
    pixels = np.where(a > 0, blended, target.image.pixels)
    image = RasterImage(pixels, target.image.depth.copy(), target.image.coverage.copy())
    return FaceSample(target.params, image, target.vertex_colors, "fake", alpha > 0,
                      source.params)


def item_rng(seed: int, index: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([int(seed), int(index)]))


def make_item(model: SyntheticModel, index: int, fake: bool, cfg: ForgeryConfig,
              seed: int) -> FaceSample:
    rng = item_rng(seed, index)
    target = sample_face(model, rng)
    if not fake:
        return target
    for _ in range(MAX_SOURCE_RETRIES):
        source = sample_source(model, target, rng)
        if light_angle(target.params.light, source.params.light) >= cfg.light_mismatch:
            return forge(target, source, cfg)
    raise DatasetExhaustedError(index, MAX_SOURCE_RETRIES)


# ----------------------------------------------------------------------------- files

def save_model(model: SyntheticModel, path) -> None:
    """Write the model as JSON plus a raw ``.bin`` sidecar and a text mesh."""
    path = Path(path)
    sidecar = path.with_suffix(".bin")
    meshfile = path.with_suffix(".mesh")
    layout = formats.save_arrays(sidecar, {
        "vertices": model.mesh.vertices, "triangles": model.mesh.triangles,
        "uv": model.mesh.uv, "mean": model.texture_model.mean,
        "basis": model.texture_model.basis, "scales": model.texture_model.scales,
    })
    write_mesh(meshfile, model.mesh)
    r = model.ranges
    formats.write_json(path, {
        "format": "facedetail-model/1", "seed": model.seed, "grid_n": model.grid_n,
        "k": model.texture_model.k, "camera": model.camera.to_dict(),
        "ranges": {"gamma1": list(r.gamma1), "direct_ratio": list(r.direct_ratio),
                   "light_cone_deg": r.light_cone_deg, "tint": r.tint,
                   "t_id_amplitude": r.t_id_amplitude, "t_id_smoothness": r.t_id_smoothness},
        "sidecar": sidecar.name, "mesh": meshfile.name, "arrays": layout,
    })


def load_model(path) -> SyntheticModel:
    path = Path(path)
    meta = formats.read_json(path)
    if meta.get("format") != "facedetail-model/1":
        raise formats.FormatError(f"{path}: not a facedetail model file")
    arr = formats.load_arrays(path.parent / meta["sidecar"], meta["arrays"])
    mesh = TriMesh(arr["vertices"], arr["triangles"], arr["uv"])
    tex = TextureModel(arr["mean"], arr["basis"], arr["scales"])
    rr = meta["ranges"]
    ranges = SamplingRanges(tuple(rr["gamma1"]), tuple(rr["direct_ratio"]), rr["light_cone_deg"],
                            rr["tint"], rr["t_id_amplitude"], rr["t_id_smoothness"])
    return SyntheticModel(mesh, Camera.from_dict(meta["camera"]), tex, ranges,
                          meta["grid_n"], meta["seed"])


def save_params(path, params: FaceParams, extra: dict | None = None,
                source: FaceParams | None = None) -> None:
    path = Path(path)
    sidecar = path.with_suffix(".f64")
    arrays = {"t_id": params.t_id}
    doc = {"gamma": params.light.gamma.tolist(), "beta": params.beta.tolist()}
    if source is not None:
        arrays["source_t_id"] = source.t_id
        doc["source_gamma"] = source.light.gamma.tolist()
        doc["source_beta"] = source.beta.tolist()
    doc["arrays"] = formats.save_arrays(sidecar, arrays)
    doc["sidecar"] = sidecar.name
    doc.update(extra or {})
    formats.write_json(path, doc)


def load_params(path) -> tuple[FaceParams, FaceParams | None]:
    path = Path(path)
    doc = formats.read_json(path)
    arr = formats.load_arrays(path.parent / doc["sidecar"], doc["arrays"])
    p = FaceParams(LightingParams(np.array(doc["gamma"])), np.array(doc["beta"]), arr["t_id"])
    src = None
    if "source_gamma" in doc:
        src = FaceParams(LightingParams(np.array(doc["source_gamma"])),
                         np.array(doc["source_beta"]), arr["source_t_id"])
    return p, src


def _write_item(out_dir: Path, index: int, sample: FaceSample) -> dict:
    stem = f"{index:05d}"
    img = f"images/{stem}.ppm"
    prm = f"params/{stem}.json"
    formats.write_ppm(out_dir / img, sample.image.pixels)
    save_params(out_dir / prm, sample.params, {"label": sample.label},
                sample.source_params)
    rec = {"path": img, "label": sample.label, "params": prm}
    if sample.forgery_region is not None:
        msk = f"masks/{stem}.pgm"
        formats.write_mask(out_dir / msk, sample.forgery_region)
        rec["mask"] = msk
    return rec


def generate_dataset(model: SyntheticModel, n_real: int, n_fake: int, cfg: ForgeryConfig,
                     seed: int, out_dir, workers: int = 1) -> Path:
    """Render a labelled corpus and write ``manifest.jsonl``.

    Items 0..n_real-1 are real, the rest fake. Each item draws from its own
    RNG stream keyed by (seed, index), so output does not depend on
    ``workers``. Returns the manifest path.
    """
    if n_real < 1 or n_fake < 1:
        raise ValueError("n_real and n_fake must both be >= 1")
    out_dir = Path(out_dir)
    for sub in ("images", "params", "masks"):
        (out_dir / sub).mkdir(parents=True, exist_ok=True)
    if not os.access(out_dir, os.W_OK):
        raise PermissionError(f"output directory {out_dir} is not writable")
    save_model(model, out_dir / "model.json")
    # Warm geometry caches once before fanning out.
    raster_plan(model.mesh, model.camera)
    _ = model.basis

    def job(index):
        sample = make_item(model, index, index >= n_real, cfg, seed)
        return _write_item(out_dir, index, sample)

    total = n_real + n_fake
    if workers <= 1:
        records = [job(i) for i in range(total)]
    else:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            records = list(pool.map(job, range(total)))
    manifest = out_dir / "manifest.jsonl"
    with open(manifest, "w", encoding="utf-8") as fh:
        for rec in records:
            fh.write(formats.json_line(rec))
    return manifest


def read_manifest(path) -> list[dict]:
    path = Path(path)
    out = []
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            if line.strip():
                out.append(json.loads(line))
    return out


def vertex_visibility_fraction(model: SyntheticModel) -> float:
    plan = raster_plan(model.mesh, model.camera)
    vis = visibility(model.mesh, project(model.mesh, model.camera), plan)
    return float(vis.mean())


__all__ = [
    "SyntheticModel", "SamplingRanges", "FaceParams", "FaceSample", "ForgeryConfig",
    "build_model", "sample_face", "sample_source", "forge", "generate_dataset",
    "save_model", "load_model", "save_params", "load_params", "read_manifest",
    "read_mesh", "InsufficientLightingInconsistency", "DatasetExhaustedError",
]
