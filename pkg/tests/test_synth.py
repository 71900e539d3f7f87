import hashlib

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from facedetail.detail import facial_detail, uv_warp
from facedetail.fitting import decompose
from facedetail.synth import (DatasetExhaustedError, FaceParams, ForgeryConfig,
                              InsufficientLightingInconsistency, blend_alpha, build_model,
                              forge, generate_dataset, item_rng, light_angle, load_model,
                              load_params, make_item, read_manifest, render_params, sample_face,
                              sample_source, save_model, save_params,
                              vertex_visibility_fraction)
from facedetail.sh_lighting import LightingParams


def _digest(root):
    h = hashlib.sha256()
    for p in sorted(root.rglob("*")):
        if p.is_file():
            h.update(str(p.relative_to(root)).encode())
            h.update(p.read_bytes())
    return h.hexdigest()


def test_build_model_is_deterministic():
    a, b = build_model(7, grid_n=16, k=4), build_model(7, grid_n=16, k=4)
    assert a.texture_model.basis.tobytes() == b.texture_model.basis.tobytes()
    assert a.texture_model.mean.tobytes() == b.texture_model.mean.tobytes()
    assert a.mesh.key == b.mesh.key
    c = build_model(8, grid_n=16, k=4)
    assert c.texture_model.basis.tobytes() != a.texture_model.basis.tobytes()


def test_basis_is_orthonormal(model):
    B = model.texture_model.basis
    np.testing.assert_allclose(B.T @ B, np.eye(B.shape[1]), atol=1e-10)
    mean = model.texture_model.mean
    assert mean.min() >= 0.3 and mean.max() <= 0.8


def test_single_component_model():
    m = build_model(1, grid_n=8, k=1)
    assert m.texture_model.basis.shape == (3 * 64, 1)
    np.testing.assert_allclose(m.texture_model.basis.T @ m.texture_model.basis, 1.0,
                               atol=1e-10)


def test_build_model_errors():
    with pytest.raises(ValueError):
        build_model(0, grid_n=7)
    with pytest.raises(ValueError):
        build_model(0, grid_n=8, k=0)
    with pytest.raises(ValueError, match="exceeds"):
        build_model(0, grid_n=8, k=3 * 64 + 1)


def test_default_mesh_is_mostly_visible(model):
    assert model.grid_n == 48 and model.texture_model.k == 8
    assert vertex_visibility_fraction(model) >= 0.95


def test_real_sample_re_renders_from_params(model):
    face = sample_face(model, item_rng(0, 3))
    colors, image = render_params(model, face.params)
    assert np.abs(colors - face.vertex_colors).max() <= 1e-6
    assert np.abs(image.pixels - face.image.pixels).max() <= 1e-6


def test_ambient_only_sample_has_null_detail(model):
    face = sample_face(model, item_rng(0, 1), direct=False)
    assert not face.params.light.gamma[:, 1:].any()
    p = face.params
    flat = FaceParams(p.light, p.beta, np.zeros_like(p.t_id))
    img = render_params(model, flat)[1]
    d = decompose(img.pixels, model.mesh, model.camera, model.texture_model)
    fd = facial_detail(img.pixels, model.mesh, model.camera, d.light, d.beta,
                       model.texture_model)
    assert np.mean(np.abs(fd.pixels - 0.5)[fd.validity] <= 0.02) >= 0.99


def test_zero_texture_sample_is_lit_mean(model):
    g = np.zeros((3, 9))
    g[:, 0] = 1.8
    params = FaceParams(LightingParams(g), np.zeros(8), np.zeros_like(model.texture_model.mean))
    colors, _ = render_params(model, params)
    np.testing.assert_allclose(colors, model.texture_model.mean * 1.8 / np.sqrt(4 * np.pi),
                               rtol=1e-12)


def test_disjoint_streams_give_different_images(model):
    a = sample_face(model, item_rng(0, 0))
    b = sample_face(model, item_rng(0, 1))
    assert a.image.pixels.tobytes() != b.image.pixels.tobytes()


def test_sample_ranges(model):
    for i in range(30):
        face = sample_face(model, item_rng(5, i))
        g = face.params.light.gamma
        assert np.all(g[:, 0] >= 0.8 * 0.92) and np.all(g[:, 0] <= 2.5 * 1.08)
        assert np.abs(face.params.t_id).max() <= 0.15 + 1e-12


@pytest.fixture(scope="module")
def pair(model):
    rng = item_rng(11, 0)
    target = sample_face(model, rng)
    while True:
        source = sample_source(model, target, rng)
        if light_angle(target.params.light, source.params.light) >= 40:
            return target, source


def test_forge_leaves_alpha_zero_pixels(pair):
    target, source = pair
    cfg = ForgeryConfig()
    fake = forge(target, source, cfg)
    alpha = blend_alpha(target.image.pixels.shape[:2], cfg)
    outside = alpha == 0
    assert fake.image.pixels[outside].tobytes() == target.image.pixels[outside].tobytes()
    assert fake.is_fake
    np.testing.assert_array_equal(fake.forgery_region, alpha > 0)


def test_altered_pixels_match_mask_area(pair):
    target, source = pair
    fake = forge(target, source, ForgeryConfig())
    changed = np.any(fake.image.pixels != target.image.pixels, axis=2)
    assert not changed[~fake.forgery_region].any()
    assert abs(changed.sum() - fake.forgery_region.sum()) <= 0.01 * fake.forgery_region.sum()


def test_hard_edge_splice(pair):
    target, source = pair
    cfg = ForgeryConfig(feather_sigma=0.0)
    fake = forge(target, source, cfg)
    yy, xx = np.mgrid[0:128, 0:128]
    inside = ((xx - 63.5) / 24) ** 2 + ((yy - 62.0) / 28) ** 2 <= 1
    np.testing.assert_array_equal(fake.image.pixels[inside], source.image.pixels[inside])
    np.testing.assert_array_equal(fake.image.pixels[~inside], target.image.pixels[~inside])


@given(st.floats(0.0, 4.0))
@settings(max_examples=20, deadline=None)
def test_alpha_in_unit_interval(sigma):
    a = blend_alpha((64, 64), ForgeryConfig((30.0, 33.0), (10.0, 12.0), sigma))
    assert a.min() >= 0 and a.max() <= 1
    assert a[33, 30] > 0.9 and a[0, 0] == 0


def test_forge_requires_light_mismatch(model):
    rng = item_rng(2, 0)
    target = sample_face(model, rng)
    with pytest.raises(InsufficientLightingInconsistency, match="insufficient lighting"):
        forge(target, target, ForgeryConfig())


def test_config_validation():
    with pytest.raises(ValueError, match="degenerate"):
        ForgeryConfig(radii=(0.0, 5.0))
    with pytest.raises(ValueError):
        ForgeryConfig(feather_sigma=-1)
    with pytest.raises(ValueError):
        ForgeryConfig(light_mismatch=181)


def test_fake_item_shares_real_target(model):
    real = make_item(model, 4, False, ForgeryConfig(), 9)
    fake = make_item(model, 4, True, ForgeryConfig(), 9)
    assert fake.params.light.gamma.tobytes() == real.params.light.gamma.tobytes()
    out = ~fake.forgery_region
    assert fake.image.pixels[out].tobytes() == real.image.pixels[out].tobytes()
    assert light_angle(fake.params.light, fake.source_params.light) >= 40.0


def test_detail_difference_concentrates_in_region(model):
    """FD of the fake vs the target, both under the target's decomposition."""
    tm = model.texture_model
    ratios = []
    for i in range(5):
        fake = make_item(model, i, True, ForgeryConfig(), 21)
        target = make_item(model, i, False, ForgeryConfig(), 21)
        d = decompose(target.image.pixels, model.mesh, model.camera, tm)
        fd_t = facial_detail(target.image.pixels, model.mesh, model.camera, d.light, d.beta, tm)
        fd_f = facial_detail(fake.image.pixels, model.mesh, model.camera, d.light, d.beta, tm)
        region = uv_warp(fake.forgery_region[..., None].astype(float), model.mesh,
                         model.camera)
        inside = fd_t.validity & (region.pixels[..., 0] > 0)
        outside = fd_t.validity & ~inside
        delta = np.abs(fd_f.pixels - fd_t.pixels).mean(axis=2)
        ratios.append(delta[inside].mean() / max(delta[outside].mean(), 1e-12))
    assert min(ratios) >= 5.0


def test_exhaustion_reports_index(model):
    with pytest.raises(DatasetExhaustedError, match="item 3") as info:
        make_item(model, 3, True, ForgeryConfig(light_mismatch=179.9), 0)
    assert info.value.index == 3


def test_generate_dataset_small(small_model, tmp_path):
    m = generate_dataset(small_model, 1, 1, ForgeryConfig().scaled(0.5), 0, tmp_path)
    recs = read_manifest(m)
    assert [r["label"] for r in recs] == ["real", "fake"]
    assert "mask" not in recs[0] and "mask" in recs[1]
    for r in recs:
        for key in ("path", "params", "mask"):
            if key in r:
                assert (tmp_path / r[key]).is_file()


def test_generate_dataset_deterministic_across_workers(small_model, tmp_path):
    cfg = ForgeryConfig().scaled(0.5)
    digests = []
    for name, workers in (("a", 1), ("b", 1), ("c", 4)):
        generate_dataset(small_model, 3, 3, cfg, 5, tmp_path / name, workers=workers)
        digests.append(_digest(tmp_path / name))
    assert len(set(digests)) == 1


def test_generate_dataset_rejects_empty(small_model, tmp_path):
    with pytest.raises(ValueError):
        generate_dataset(small_model, 0, 1, ForgeryConfig(), 0, tmp_path)


def test_params_round_trip(model, tmp_path):
    fake = make_item(model, 2, True, ForgeryConfig(), 0)
    save_params(tmp_path / "p.json", fake.params, source=fake.source_params)
    p, src = load_params(tmp_path / "p.json")
    np.testing.assert_array_equal(p.light.gamma, fake.params.light.gamma)
    np.testing.assert_array_equal(p.beta, fake.params.beta)
    np.testing.assert_array_equal(p.t_id, fake.params.t_id)
    np.testing.assert_array_equal(src.t_id, fake.source_params.t_id)
    # stored real params re-render the stored image
    real = make_item(model, 2, False, ForgeryConfig(), 0)
    save_params(tmp_path / "r.json", real.params)
    p, src = load_params(tmp_path / "r.json")
    assert src is None
    assert np.abs(render_params(model, p)[0] - real.vertex_colors).max() <= 1e-6


def test_model_round_trip(small_model, tmp_path):
    save_model(small_model, tmp_path / "m.json")
    back = load_model(tmp_path / "m.json")
    assert back.mesh.key == small_model.mesh.key
    np.testing.assert_array_equal(back.texture_model.basis, small_model.texture_model.basis)
    assert back.camera == small_model.camera
    assert back.ranges == small_model.ranges
    save_model(back, tmp_path / "n.json")
    assert (tmp_path / "m.bin").read_bytes() == (tmp_path / "n.bin").read_bytes()
