"""Second-order spherical-harmonics irradiance basis and Lambertian shading."""
from __future__ import annotations

import json
import math
from dataclasses import dataclass

import numpy as np

N_COEFFS = 9

# h1..h9 normalization constants of the real SH basis, bands 0-2.
C0 = 1.0 / math.sqrt(4 * math.pi)
C1 = math.sqrt(3.0 / (4 * math.pi))
C2 = 0.5 * math.sqrt(5.0 / (4 * math.pi))
C3 = 3.0 * math.sqrt(5.0 / (12 * math.pi))
C4 = 1.5 * math.sqrt(5.0 / (12 * math.pi))

# |h2..h9| summed in quadrature is constant on the unit sphere: 8 / (4 pi).
DIRECT_BASIS_NORM = math.sqrt(8.0 / (4 * math.pi))


@dataclass(frozen=True, eq=False)
class LightingParams:
    """SH reflectance coefficients, shape (3, 9): one row of 9 per RGB channel."""

    gamma: np.ndarray

    def __post_init__(self):
        g = np.array(self.gamma, dtype=np.float64)
        if g.shape != (3, N_COEFFS):
            raise ValueError(f"gamma must have shape (3, 9), got {g.shape}")
        if not np.all(np.isfinite(g)):
            raise ValueError("gamma contains non-finite values")
        g.setflags(write=False)
        object.__setattr__(self, "gamma", g)

    def __add__(self, other: "LightingParams") -> "LightingParams":
        return LightingParams(self.gamma + other.gamma)

    @property
    def ambient_level(self) -> np.ndarray:
        """Per-channel ambient shading h1*gamma1."""
        return C0 * self.gamma[:, 0]

    def dominant_direction(self) -> np.ndarray:
        """Unit direction of the channel-averaged band-1 coefficients."""
        d = self.gamma[:, 1:4].mean(axis=0)
        n = np.linalg.norm(d)
        return d / n if n > 0 else d

    def to_json(self) -> str:
        return json.dumps([[float(x) for x in row] for row in self.gamma])

    @classmethod
    def from_json(cls, text: str) -> "LightingParams":
        return cls(np.array(json.loads(text), dtype=np.float64))


def sh_basis(normals: np.ndarray, tol: float = 1e-4) -> np.ndarray:
    """Evaluate h1..h9 at each unit normal; returns an (N, 9) matrix."""
    n = np.asarray(normals, dtype=np.float64)
    if n.ndim != 2 or n.shape[1] != 3:
        raise ValueError(f"normals must be (N,3), got {n.shape}")
    length = np.linalg.norm(n, axis=1)
    bad = np.flatnonzero(np.abs(length - 1.0) > tol)
    if bad.size:
        raise ValueError(f"normal {bad[0]} is not unit length (|n| = {length[bad[0]]:.6g})")
    x, y, z = n[:, 0], n[:, 1], n[:, 2]
    H = np.empty((len(n), N_COEFFS))
    H[:, 0] = C0
    H[:, 1] = C1 * x
    H[:, 2] = C1 * y
    H[:, 3] = C1 * z
    H[:, 4] = C2 * (2 * z * z - x * x - y * y)
    H[:, 5] = C3 * y * z
    H[:, 6] = C3 * x * z
    H[:, 7] = C3 * x * y
    H[:, 8] = C4 * (x * x - y * y)
    return H


def shading(basis: np.ndarray, light: LightingParams) -> np.ndarray:
    """Per-vertex, per-channel irradiance H @ gamma^T, shape (N, 3)."""
    return basis @ light.gamma.T


def shade(texture: np.ndarray, basis: np.ndarray, light: LightingParams) -> np.ndarray:
    """Lambertian vertex colors (H gamma_c) * T_c. No clamping."""
    texture = np.asarray(texture, dtype=np.float64)
    if texture.shape != (basis.shape[0], 3):
        raise ValueError(
            f"texture shape {texture.shape} does not match basis with {basis.shape[0]} rows")
    return shading(basis, light) * texture


def split_ambient_direct(light: LightingParams) -> tuple[LightingParams, LightingParams]:
    amb = np.zeros_like(light.gamma)
    amb[:, 0] = light.gamma[:, 0]
    direct = light.gamma.copy()
    direct[:, 0] = 0.0
    return LightingParams(amb), LightingParams(direct)


def directional_light(direction, intensity: float = 1.0) -> np.ndarray:
    """Bands 0-2 of the clamped-cosine irradiance from one distant light.

    Returns 9 coefficients (not per channel) for a unit light of given
    intensity arriving from ``direction``.
    """
    d = np.asarray(direction, dtype=np.float64)
    d = d / np.linalg.norm(d)
    y = sh_basis(d[None, :])[0]
    band_gain = np.array([math.pi] + [2 * math.pi / 3] * 3 + [math.pi / 4] * 5)
    return intensity * band_gain * y
