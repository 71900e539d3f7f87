import numpy as np
import pytest

from facedetail.geometry import TriMesh
from facedetail.synth import build_model


@pytest.fixture(scope="session")
def model():
    return build_model(0)


@pytest.fixture(scope="session")
def small_model():
    return build_model(3, grid_n=16, k=4, image_size=64)


def grid_mesh(n=8, extent=1.0, z=0.0):
    """Flat (n x n) lattice in the z plane with counter-clockwise triangles."""
    u = np.linspace(0.0, 1.0, n)
    uu, vv = np.meshgrid(u, u)
    verts = np.stack([uu * extent, vv * extent, np.full_like(uu, z)], -1).reshape(-1, 3)
    idx = np.arange(n * n).reshape(n, n)
    a, b = idx[:-1, :-1].ravel(), idx[:-1, 1:].ravel()
    c, d = idx[1:, :-1].ravel(), idx[1:, 1:].ravel()
    tris = np.concatenate([np.stack([a, b, d], 1), np.stack([a, d, c], 1)])
    return TriMesh(verts, tris, np.stack([uu, vv], -1).reshape(-1, 2))


@pytest.fixture
def rng():
    return np.random.default_rng(12345)
