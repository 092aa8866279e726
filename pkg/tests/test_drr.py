import math

import numpy as np
import pytest

from carmreg import _backend
from carmreg.drr import (CROP_COLS, CROP_ROWS, DRRRenderer, Image2, RenderConfig, attenuation,
                         crop_upper, load_image, normalize_image, pgm_bytes, read_pgm, render_drr,
                         save_image)
from carmreg.errors import FormatError, SizeMismatch, TooSmall
from carmreg.geom import CArmPose, DetectorSpec, carm_extrinsics
from carmreg.volume import MaskVolume, Volume3

SMALL_DET = DetectorSpec(64, 48, 4.0)
needs_compiled = pytest.mark.skipif("compiled" not in _backend.BACKENDS, reason="extension not built")


def cube_volume(n=40, lo=10, hi=30, spacing=1.0):
    vox = np.full((n, n, n), -1000.0, dtype=np.float32)
    vox[lo:hi, lo:hi, lo:hi] = 0.0  # water: attenuation 1 per mm
    origin = -(n - 1) / 2.0 * spacing
    return Volume3(vox, (spacing,) * 3, (origin,) * 3)


def test_attenuation_map():
    v = Volume3(np.array([[[-2000, -1000, 0, 1000]]], dtype=np.float32))
    np.testing.assert_allclose(attenuation(v), [[[0, 0, 1, 2]]])
    m = MaskVolume(np.array([[[0, 1]]], dtype=np.float32))
    np.testing.assert_array_equal(attenuation(m), [[[0, 1]]])


def test_default_step_is_half_spacing():
    v = Volume3(np.zeros((2, 2, 2)), (1.0, 0.8, 2.0))
    assert DRRRenderer(v).step_mm == pytest.approx(0.4)


@pytest.mark.parametrize("beta", [0.0, 20.0])
def test_uniform_cube_chord(beta):
    vol = cube_volume()
    det = DetectorSpec(64, 64, 0.5, principal_point_px=(32.5, 32.5))
    model = carm_extrinsics(CArmPose(0.0, beta, 0.0, 1000.0, 750.0, (0.0, 0.0, 0.0)), det)
    r = DRRRenderer(vol, RenderConfig(step_mm=0.5))
    val = r.render_pixels(model, [32], [32])[0, 0]
    chord = 20.0 / math.cos(math.radians(beta))
    assert abs(val - chord) <= r.step_mm


def test_linearity(small_phantom, ap_pose):
    vol, _ = small_phantom
    model = carm_extrinsics(ap_pose, SMALL_DET)
    base = render_drr(vol, model).pixels
    scaled = Volume3(-1000.0 + 3.0 * (np.maximum(vol.voxels, -1000.0) + 1000.0), vol.spacing_mm, vol.origin_mm)
    np.testing.assert_allclose(render_drr(scaled, model).pixels, 3.0 * base, rtol=1e-6)


def test_superposition(small_phantom, ap_pose):
    vol, _ = small_phantom
    mu = np.maximum(vol.voxels, -1000.0) + 1000.0
    half = np.zeros_like(mu)
    half[:, :32, :] = mu[:, :32, :]
    a = Volume3(half - 1000.0, vol.spacing_mm, vol.origin_mm)
    b = Volume3(mu - half - 1000.0, vol.spacing_mm, vol.origin_mm)
    model = carm_extrinsics(CArmPose(1.0, 30.0, 5.0, 1000.0, 750.0, (3.0, -2.0, 1.0)), SMALL_DET)
    full = render_drr(vol, model).pixels
    np.testing.assert_allclose(render_drr(a, model).pixels + render_drr(b, model).pixels, full,
                               rtol=1e-6, atol=1e-9 * full.max())


def test_air_volume_renders_zero(ap_pose):
    v = Volume3(np.full((8, 8, 8), -1000.0))
    assert not render_drr(v, carm_extrinsics(ap_pose, SMALL_DET)).pixels.any()


def test_ray_missing_volume_is_zero():
    vol = cube_volume(n=20, lo=5, hi=15)
    det = DetectorSpec(16, 16, 0.5)
    # isocenter 500 mm lateral: no ray meets the volume
    model = carm_extrinsics(CArmPose(isocenter_mm=(500.0, 0.0, 0.0)), det)
    assert not render_drr(vol, model).pixels.any()


def test_pixels_subset_matches_full(small_phantom):
    vol, _ = small_phantom
    model = carm_extrinsics(CArmPose(0.0, 35.0, -4.0, 1100.0, 760.0, (0.0, 10.0, -5.0)), SMALL_DET)
    r = DRRRenderer(vol)
    full = r.render(model).pixels
    rows, cols = np.arange(3, 40, 5), np.arange(0, 64, 3)
    np.testing.assert_array_equal(r.render_pixels(model, rows, cols), full[np.ix_(rows, cols)])


def test_empty_space_skip_is_exact(small_phantom):
    vol, _ = small_phantom
    model = carm_extrinsics(CArmPose(-1.5, 45.0, 8.0, 1200.0, 800.0, (20.0, -30.0, 15.0)), SMALL_DET)
    r = DRRRenderer(vol)
    skipped = r.render(model).pixels
    nx, ny, nz = vol.dims
    r.active = np.array([0, nx - 1, 0, ny - 1, 0, nz - 1])
    np.testing.assert_allclose(skipped, r.render(model).pixels, rtol=1e-12, atol=1e-12)


@needs_compiled
def test_backends_bit_identical(small_phantom):
    vol, _ = small_phantom
    for pose in [CArmPose(), CArmPose(1.0, 48.0, -9.0, 900.0, 730.0, (12.0, -40.0, 7.0))]:
        model = carm_extrinsics(pose, SMALL_DET)
        a = DRRRenderer(vol, backend="compiled").render(model).pixels
        b = DRRRenderer(vol, backend="python").render(model).pixels
        np.testing.assert_array_equal(a, b)


@needs_compiled
def test_thread_count_does_not_change_output(small_phantom):
    vol, _ = small_phantom
    model = carm_extrinsics(CArmPose(0.5, 25.0, 3.0, 1000.0, 750.0, (0.0, 0.0, 0.0)), SMALL_DET)
    r = DRRRenderer(vol, backend="compiled")
    outs = [r.render(model, threads=t).pixels for t in (1, 2, 3, 8)]
    for o in outs[1:]:
        np.testing.assert_array_equal(o, outs[0])


def test_crop_upper():
    img = Image2(np.arange(512 * 600, dtype=float).reshape(512, 600))
    c = crop_upper(img)
    assert c.shape == (CROP_ROWS, CROP_COLS)
    np.testing.assert_array_equal(c.pixels, img.pixels[:352, 44:556])
    with pytest.raises(TooSmall):
        crop_upper(Image2(np.zeros((300, 512))))


def test_normalize():
    n = normalize_image(Image2(np.array([[2.0, 4.0], [6.0, 10.0]])))
    assert n.normalized
    np.testing.assert_allclose(n.pixels, [[0, 0.25], [0.5, 1]])
    assert not normalize_image(Image2(np.full((2, 2), 7.0))).pixels.any()


@pytest.mark.parametrize("dtype", ["f64", "f32"])
def test_image_round_trip(tmp_path, rng, dtype):
    img = Image2(rng.normal(size=(5, 7)))
    save_image(img, tmp_path / "i.hdr", dtype)
    back = load_image(tmp_path / "i.hdr")
    want = img.pixels if dtype == "f64" else img.pixels.astype(np.float32)
    np.testing.assert_array_equal(back.pixels, want)
    assert (tmp_path / "i.pgm").exists()


def test_image_errors(tmp_path):
    save_image(Image2(np.zeros((2, 3))), tmp_path / "i.hdr")
    (tmp_path / "i.raw").write_bytes(b"\0" * 8)
    with pytest.raises(SizeMismatch):
        load_image(tmp_path / "i.hdr")
    (tmp_path / "j.hdr").write_text("dims: 2 3\ndtype: f16\nnormalized: 0\ndata_file: i.raw\n")
    with pytest.raises(FormatError):
        load_image(tmp_path / "j.hdr")
    with pytest.raises(ValueError):
        Image2(np.zeros(4))


def test_pgm_encoding(tmp_path):
    img = Image2(np.array([[0.0, 1.0], [2.0, 4.0]]))
    data = pgm_bytes(img)
    assert data.startswith(b"P5\n2 2\n65535\n")
    (tmp_path / "a.pgm").write_bytes(data)
    np.testing.assert_array_equal(read_pgm(tmp_path / "a.pgm"), [[0, 16384], [32768, 65535]])
    # payload bytes that look like whitespace must survive the header parse
    img = Image2(np.array([[10.0, 0.0]]))
    (tmp_path / "b.pgm").write_bytes(pgm_bytes(img))
    np.testing.assert_array_equal(read_pgm(tmp_path / "b.pgm"), [[65535, 0]])


def test_render_config_validation():
    with pytest.raises(ValueError):
        RenderConfig(step_mm=0)
    with pytest.raises(ValueError):
        RenderConfig(threads=0)


def test_hundred_mm_cube_chord():
    vol = cube_volume(n=120, lo=10, hi=110)
    det = DetectorSpec(16, 16, 0.5, principal_point_px=(8.5, 8.5))
    r = DRRRenderer(vol, RenderConfig(step_mm=0.5))
    val = r.render_pixels(carm_extrinsics(CArmPose(), det), [8], [8])[0, 0]
    assert abs(val - 100.0) <= r.step_mm


def test_step_halving_converges(small_phantom):
    vol, _ = small_phantom
    model = carm_extrinsics(CArmPose(0.0, 20.0, 0.0), SMALL_DET)
    coarse = DRRRenderer(vol).render(model).pixels
    fine = DRRRenderer(vol, RenderConfig(step_mm=DRRRenderer(vol).step_mm / 2)).render(model).pixels
    assert np.abs(fine - coarse).sum() / fine.sum() < 0.01


def test_crop_identity_and_pgm_zero(tmp_path, rng):
    img = Image2(rng.normal(size=(352, 512)))
    np.testing.assert_array_equal(crop_upper(img).pixels, img.pixels)
    (tmp_path / "z.pgm").write_bytes(pgm_bytes(Image2(np.zeros((3, 4)))))
    assert not read_pgm(tmp_path / "z.pgm").any()


def test_normalize_idempotent(rng):
    for _ in range(20):
        once = normalize_image(Image2(rng.normal(size=(9, 11)) * rng.uniform(0.1, 100)))
        np.testing.assert_allclose(normalize_image(once).pixels, once.pixels, atol=1e-7)
