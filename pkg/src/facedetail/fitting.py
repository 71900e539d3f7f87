"""Inverse problems: SH lighting, common texture, identity texture.

The fast path fits lighting against the mean texture, then the PCA texture
coefficients with lighting fixed, then takes the albedo residual. The slow
analysis-by-synthesis loop alternates the two linear solves and serves as an
oracle for the fast path.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np
import scipy.linalg

from .geometry import Camera, TriMesh, compute_vertex_normals, footprint, project, visibility
from .renderer import RasterImage, raster_plan, sample_at_vertices
from .sh_lighting import LightingParams, N_COEFFS, sh_basis, shading

log = logging.getLogger(__name__)

EPS_DIV = 0.05
DEFAULT_RIDGE = 0.05
# grazing vertices sample a few pixels across a steep slope; keep them out of the solves
MIN_FACING = 0.3


class FittingError(ValueError):
    pass


class InsufficientVisibilityError(FittingError):
    def __init__(self, n_valid, needed):
        super().__init__(f"insufficient visibility: {n_valid} valid vertices, need {needed}")


class DegenerateNormalsError(FittingError):
    def __init__(self):
        super().__init__("degenerate normals: lighting design matrix is rank deficient")


@dataclass(frozen=True, eq=False)
class TextureModel:
    """Mean albedo (N,3), orthonormal basis (3N,K) over vertex-major RGB, stdevs (K,)."""

    mean: np.ndarray
    basis: np.ndarray
    scales: np.ndarray

    def __post_init__(self):
        mean = np.array(self.mean, dtype=np.float64)
        basis = np.array(self.basis, dtype=np.float64)
        scales = np.array(self.scales, dtype=np.float64)
        if mean.ndim != 2 or mean.shape[1] != 3:
            raise ValueError(f"mean texture must be (N,3), got {mean.shape}")
        if basis.ndim != 2 or basis.shape[0] != mean.size or basis.shape[1] < 1:
            raise ValueError(f"basis must be ({mean.size}, K>=1), got {basis.shape}")
        if scales.shape != (basis.shape[1],) or np.any(scales <= 0):
            raise ValueError("scales must be K positive stdevs")
        if mean.min() < 0 or mean.max() > 1:
            raise ValueError("mean texture must lie in [0,1]")
        gram = basis.T @ basis
        off = gram - np.diag(np.diag(gram))
        if np.abs(off).max(initial=0.0) > 1e-8:
            raise ValueError("basis columns are not mutually orthogonal")
        for a in (mean, basis, scales):
            a.setflags(write=False)
        object.__setattr__(self, "mean", mean)
        object.__setattr__(self, "basis", basis)
        object.__setattr__(self, "scales", scales)

    @property
    def k(self) -> int:
        return self.basis.shape[1]

    @property
    def n_vertices(self) -> int:
        return self.mean.shape[0]

    def common(self, beta) -> np.ndarray:
        """T_mean + B beta as (N,3)."""
        return self.mean + (self.basis @ np.asarray(beta, dtype=np.float64)).reshape(-1, 3)


@dataclass(frozen=True, eq=False)
class Decomposition:
    light: LightingParams
    beta: np.ndarray
    t_id: np.ndarray        # (N,3), zero where not visible
    visibility: np.ndarray  # (N,) bool; vertices that produced a valid sample

    def to_dict(self) -> dict:
        return {"gamma": self.light.gamma.tolist(), "beta": self.beta.tolist()}


def qr_lstsq(A: np.ndarray, b: np.ndarray, rtol: float = 1e-10) -> np.ndarray:
    """Least squares via column-pivoted Householder QR.

    Raises ``np.linalg.LinAlgError`` when A is numerically rank deficient.
    """
    Q, R, piv = scipy.linalg.qr(A, mode="economic", pivoting=True)
    d = np.abs(np.diag(R))
    if d.size == 0 or d[-1] <= rtol * d[0]:
        raise np.linalg.LinAlgError("rank deficient")
    z = scipy.linalg.solve_triangular(R, Q.T @ b)
    x = np.empty_like(z)
    x[piv] = z
    return x


def illumination_design(basis: np.ndarray, texture: np.ndarray, valid: np.ndarray,
                        channel: int) -> np.ndarray:
    return basis[valid] * texture[valid, channel][:, None]


def fit_illumination(samples: np.ndarray, valid: np.ndarray, basis: np.ndarray,
                     texture: np.ndarray) -> LightingParams:
    """Per-channel least squares for gamma in I(S) = (H gamma) * T.

    ``texture`` is the mean texture on the fast path.
    """
    valid = np.asarray(valid, dtype=bool)
    n_valid = int(valid.sum())
    if n_valid < N_COEFFS:
        raise InsufficientVisibilityError(n_valid, N_COEFFS)
    gamma = np.empty((3, N_COEFFS))
    for c in range(3):
        A = illumination_design(basis, texture, valid, c)
        try:
            gamma[c] = qr_lstsq(A, samples[valid, c])
        except np.linalg.LinAlgError:
            raise DegenerateNormalsError() from None
    return LightingParams(gamma)


def _texture_system(samples, valid, basis, light, model, scale=1.0):
    s = shading(basis, light)[valid] * scale              # (n,3)
    B = model.basis.reshape(model.n_vertices, 3, model.k)[valid]   # (n,3,K)
    A = (s[:, :, None] * B).reshape(-1, model.k)
    rhs = (samples[valid] - s * model.mean[valid]).reshape(-1)
    return A, rhs


def fit_common_texture(samples: np.ndarray, valid: np.ndarray, basis: np.ndarray,
                       light: LightingParams, model: TextureModel,
                       ridge: float = DEFAULT_RIDGE, *, _scale: float = 1.0) -> np.ndarray:
    """Ridge-regularized beta for I(S) = (H gamma) * (T_mean + B beta), lighting fixed."""
    if ridge < 0:
        raise ValueError("ridge must be >= 0")
    valid = np.asarray(valid, dtype=bool)
    A, rhs = _texture_system(samples, valid, basis, light, model, _scale)
    if ridge == 0 and A.shape[0] < model.k:
        raise FittingError(
            f"{A.shape[0]} equations for {model.k} texture coefficients without ridge")
    if ridge > 0:
        A = np.vstack([A, np.sqrt(ridge) * np.diag(1.0 / model.scales)])
        rhs = np.concatenate([rhs, np.zeros(model.k)])
    try:
        return qr_lstsq(A, rhs)
    except np.linalg.LinAlgError:
        raise FittingError("common-texture system is rank deficient") from None


def identity_texture(samples: np.ndarray, valid: np.ndarray, basis: np.ndarray,
                     light: LightingParams, model: TextureModel, beta,
                     eps_div: float = EPS_DIV) -> np.ndarray:
    """Albedo residual I(S) / max(H gamma, eps) - (T_mean + B beta); zero where invalid."""
    valid = np.asarray(valid, dtype=bool)
    s = np.maximum(shading(basis, light), eps_div)
    t_id = samples / s - model.common(beta)
    t_id[~valid] = 0.0
    return t_id


@dataclass(frozen=True, eq=False)
class VertexObservation:
    """Everything the linear fits need from one image.

    ``valid`` marks every sampled vertex; ``fit_mask`` the subset whose
    bilinear footprint lies wholly on covered pixels, which the lighting and
    texture solves use. Border and silhouette vertices outside it would be
    extrapolated from one side of the face.
    """

    samples: np.ndarray
    valid: np.ndarray
    basis: np.ndarray
    fit_mask: np.ndarray


def interior_vertices(mesh: TriMesh, camera: Camera, eps_z: float | None = None) -> np.ndarray:
    """Visible, camera-facing vertices whose four bilinear neighbours are all face pixels.

    Depends only on geometry, so a texture model can be built around it.
    """
    plan = raster_plan(mesh, camera)
    projected = project(mesh, camera)
    kw = {} if eps_z is None else {"eps": eps_z}
    vis = visibility(mesh, projected, plan, **kw)
    h, w = plan.coverage.shape
    inside, ix, iy, wts = footprint(projected[0], w, h)
    full = (plan.coverage[iy, ix] | (wts == 0)).all(axis=1)
    facing = compute_vertex_normals(mesh)[:, 2] > MIN_FACING
    return vis & inside & full & facing


def observe(image, mesh: TriMesh, camera: Camera, eps_z: float | None = None) -> VertexObservation:
    """Sample an image at the visible vertices of ``mesh``."""
    pixels = image.pixels if isinstance(image, RasterImage) else np.asarray(image, dtype=np.float64)
    if pixels.shape[:2] != (camera.height, camera.width):
        raise ValueError(
            f"image is {pixels.shape[1]}x{pixels.shape[0]}, camera expects "
            f"{camera.width}x{camera.height}")
    plan = raster_plan(mesh, camera)
    projected = project(mesh, camera)
    kw = {} if eps_z is None else {"eps": eps_z}
    vis = visibility(mesh, projected, plan, **kw)
    samples, valid = sample_at_vertices(pixels, projected, vis, coverage=plan.coverage)
    fit_mask = valid & interior_vertices(mesh, camera, eps_z)
    return VertexObservation(samples, valid, sh_basis(compute_vertex_normals(mesh)), fit_mask)


def decompose(image, mesh: TriMesh, camera: Camera, model: TextureModel,
              ridge: float = DEFAULT_RIDGE) -> Decomposition:
    """Fast decomposition: lighting on the mean texture, then beta, then T_id."""
    obs = observe(image, mesh, camera)
    return _fast_path(obs, model, ridge)


def _fast_path(obs: VertexObservation, model: TextureModel, ridge: float) -> Decomposition:
    light = fit_illumination(obs.samples, obs.fit_mask, obs.basis, model.mean)
    beta = fit_common_texture(obs.samples, obs.fit_mask, obs.basis, light, model, ridge)
    t_id = identity_texture(obs.samples, obs.valid, obs.basis, light, model, beta)
    return Decomposition(light, beta, t_id, obs.valid.copy())


@dataclass(frozen=True, eq=False)
class OracleResult:
    decomposition: Decomposition
    converged: bool
    iterations: int
    texture_scale: float
    objective: list = field(default_factory=list)   # vertex-level loss per iterate
    residual: list = field(default_factory=list)    # image-space MSE per iterate
    status: str = "converged"


def _vertex_objective(obs, light, model, beta, scale, ridge):
    pred = shading(obs.basis, light) * scale * model.common(beta)
    r = (obs.samples - pred)[obs.fit_mask]
    return float(np.sum(r * r) + ridge * np.sum((beta / model.scales) ** 2))


def analysis_by_synthesis_oracle(image: RasterImage, mesh: TriMesh, camera: Camera,
                                 model: TextureModel, iters: int = 50,
                                 ridge: float = DEFAULT_RIDGE, tol: float = 1e-6) -> OracleResult:
    """Block-coordinate descent on the image reconstruction loss, shape fixed.

    Alternates the lighting solve against the current full texture
    s * (T_mean + B beta) and the beta solve with lighting fixed. The
    lighting/texture scale ambiguity is fixed by holding the green-channel
    gamma at unit norm and carrying the scale in ``s``.
    """
    from .renderer import rasterize

    coverage = image.coverage if isinstance(image, RasterImage) else None
    if coverage is not None and not coverage.any():
        raise FittingError("no face pixels")
    plan = raster_plan(mesh, camera)
    if not plan.coverage.any():
        raise FittingError("no face pixels")
    pixels = image.pixels if isinstance(image, RasterImage) else np.asarray(image)
    obs = observe(image, mesh, camera)
    mask = plan.coverage if coverage is None else coverage & plan.coverage

    fast = _fast_path(obs, model, ridge)
    light, beta, scale = fast.light, fast.beta, 1.0

    def image_residual(light, beta, scale):
        colors = shading(obs.basis, light) * scale * model.common(beta)
        syn = rasterize(mesh, camera, colors).pixels
        d = (pixels - syn)[mask]
        return float(np.mean(d * d))

    objective = [_vertex_objective(obs, light, model, beta, scale, ridge)]
    residual = [image_residual(light, beta, scale)]
    converged = iters == 0
    done = 0
    for it in range(iters):
        tex = scale * model.common(beta)
        light = fit_illumination(obs.samples, obs.fit_mask, obs.basis, tex)
        g = np.linalg.norm(light.gamma[1])
        if g > 0:
            light = LightingParams(light.gamma / g)
            scale = scale * g
        beta = fit_common_texture(obs.samples, obs.fit_mask, obs.basis, light, model,
                                  ridge, _scale=scale)
        objective.append(_vertex_objective(obs, light, model, beta, scale, ridge))
        residual.append(image_residual(light, beta, scale))
        done = it + 1
        if residual[-2] - residual[-1] < tol:
            converged = True
            break
    if not converged:
        log.warning("analysis-by-synthesis did not converge in %d iterations", iters)

    # Report lighting in the model's own texture scale so the result plugs
    # straight into the fast-path consumers.
    unscaled = LightingParams(light.gamma * scale)
    t_id = identity_texture(obs.samples, obs.valid, obs.basis, unscaled, model, beta)
    decomp = Decomposition(unscaled, beta, t_id, obs.valid.copy())
    return OracleResult(decomp, converged, done, scale, objective, residual,
                        "converged" if converged else "unconverged")
