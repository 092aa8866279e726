import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.ndimage import map_coordinates

from carmreg.errors import FormatError, SizeMismatch, SpecError
from carmreg.landmarks import LandmarkSet, load_landmarks, save_landmarks
from carmreg.volume import (MaskVolume, PhantomSpec, Volume3, load_volume, make_phantom, phantom_layout,
                            save_volume, threshold_segment, trilinear_sample, trilinear_sample_many)


def test_volume_is_immutable_copy():
    a = np.zeros((2, 3, 4), dtype=np.float32)
    v = Volume3(a)
    a[0, 0, 0] = 5
    assert v.voxels[0, 0, 0] == 0
    assert v.dims == (4, 3, 2)
    with pytest.raises(ValueError):
        v.voxels[0, 0, 0] = 1


def test_volume_validation():
    with pytest.raises(ValueError):
        Volume3(np.zeros((2, 2)))
    with pytest.raises(ValueError):
        Volume3(np.zeros((2, 2, 2)), spacing_mm=(1, 0, 1))
    with pytest.raises(ValueError):
        Volume3(np.full((2, 2, 2), np.nan))


@pytest.mark.parametrize("dtype", ["f32", "i16"])
def test_volume_round_trip(tmp_path, rng, dtype):
    vox = rng.integers(-1000, 1500, size=(5, 6, 7)).astype(np.float32)
    v = Volume3(vox, (0.5, 0.75, 1.25), (-3.0, 4.5, 10.0))
    save_volume(v, tmp_path / "v.hdr", dtype)
    w = load_volume(tmp_path / "v.hdr")
    assert w.same_grid(v)
    np.testing.assert_array_equal(w.voxels, v.voxels)


def test_header_errors(tmp_path):
    v = Volume3(np.zeros((2, 2, 2)))
    save_volume(v, tmp_path / "v.hdr")
    text = (tmp_path / "v.hdr").read_text()
    (tmp_path / "a.hdr").write_text(text + "colour: red\n")
    with pytest.raises(FormatError, match="unknown header key"):
        load_volume(tmp_path / "a.hdr")
    (tmp_path / "b.hdr").write_text(text.replace("dtype: f32\n", ""))
    with pytest.raises(FormatError, match="missing"):
        load_volume(tmp_path / "b.hdr")
    (tmp_path / "c.hdr").write_text(text + "dtype: f32\n")
    with pytest.raises(FormatError, match="duplicate"):
        load_volume(tmp_path / "c.hdr")
    (tmp_path / "d.hdr").write_text(text.replace("dtype: f32", "dtype: u8"))
    with pytest.raises(FormatError):
        load_volume(tmp_path / "d.hdr")


def test_short_raw_is_size_mismatch(tmp_path):
    save_volume(Volume3(np.zeros((2, 2, 2))), tmp_path / "v.hdr")
    raw = tmp_path / "v.raw"
    raw.write_bytes(raw.read_bytes()[:-4])
    with pytest.raises(SizeMismatch):
        load_volume(tmp_path / "v.hdr")


def test_i16_rejects_fractional(tmp_path):
    with pytest.raises(ValueError):
        save_volume(Volume3(np.full((2, 2, 2), 0.5)), tmp_path / "v.hdr", "i16")


def test_trilinear_matches_scipy(rng):
    vox = rng.normal(size=(6, 7, 8)).astype(np.float32)
    v = Volume3(vox, (1.0, 2.0, 0.5), (1.0, -2.0, 3.0))
    idx = rng.uniform(0, 1, (500, 3)) * (np.array(v.dims) - 1)
    pts = np.asarray(v.origin_mm) + idx * np.asarray(v.spacing_mm)
    got = trilinear_sample_many(v, pts)
    want = map_coordinates(vox.astype(np.float64), idx[:, ::-1].T, order=1)
    np.testing.assert_allclose(got, want, atol=1e-5)


def test_trilinear_exact_at_voxel_centers(rng):
    vox = rng.normal(size=(3, 4, 5)).astype(np.float32)
    v = Volume3(vox)
    for k, j, i in [(0, 0, 0), (2, 3, 4), (1, 2, 3)]:
        assert trilinear_sample(v, [i, j, k]) == pytest.approx(float(vox[k, j, i]), abs=1e-7)


def test_trilinear_zero_outside():
    v = Volume3(np.ones((3, 3, 3)))
    assert trilinear_sample(v, [-0.01, 1, 1]) == 0.0
    assert trilinear_sample(v, [1, 1, 2.01]) == 0.0
    assert trilinear_sample(v, [2.0, 2.0, 2.0]) == 1.0


@settings(max_examples=40, deadline=None)
@given(st.floats(0, 3), st.floats(0, 3), st.floats(0, 3), st.floats(-5, 5), st.floats(0.1, 4))
def test_trilinear_reproduces_affine_fields(x, y, z, b, a):
    # trilinear interpolation is exact for affine functions
    zz, yy, xx = np.meshgrid(np.arange(4), np.arange(4), np.arange(4), indexing="ij")
    field = a * xx + 0.5 * yy - zz + b
    v = Volume3(field.astype(np.float32))
    assert trilinear_sample(v, [x, y, z]) == pytest.approx(a * x + 0.5 * y - z + b, abs=1e-4)


def test_threshold_segment():
    v = Volume3(np.array([[[-1000, 299.9, 300, 700]]], dtype=np.float32))
    m = threshold_segment(v)
    assert isinstance(m, MaskVolume)
    np.testing.assert_array_equal(m.voxels.ravel(), [0, 0, 1, 1])
    with pytest.raises(ValueError):
        MaskVolume(np.full((1, 1, 2), 0.5))


def test_phantom_values_and_determinism(small_phantom):
    vol, lm = small_phantom
    assert set(np.unique(vol.voxels)) <= {-1000.0, 40.0, 700.0}
    assert np.count_nonzero(vol.voxels == 700.0) > 0
    assert len(lm) == 6
    again, _ = make_phantom(PhantomSpec(dims=(64, 64, 64), spacing_mm=(382.5 / 63,) * 3), seed=0)
    np.testing.assert_array_equal(vol.voxels, again.voxels)
    other, _ = make_phantom(PhantomSpec(dims=(64, 64, 64), spacing_mm=(382.5 / 63,) * 3), seed=1)
    assert not np.array_equal(vol.voxels, other.voxels)


def test_phantom_centroid_and_landmarks(small_phantom):
    vol, lm = small_phantom
    np.testing.assert_allclose(vol.centroid_mm, 0.0, atol=1e-9)
    lo, hi = vol.extent_mm
    assert np.all(lm.points_mm > lo) and np.all(lm.points_mm < hi)


def test_vertebrae_are_bone(small_phantom):
    vol, _ = small_phantom
    layout = phantom_layout(PhantomSpec(dims=(64, 64, 64), spacing_mm=(382.5 / 63,) * 3), 0)
    vals = trilinear_sample_many(vol, layout.vertebra_centers)
    assert np.all(vals > 300)


def test_phantom_spec_errors():
    with pytest.raises(SpecError):
        make_phantom(PhantomSpec(dims=(32, 32, 32), spacing_mm=(1.0,) * 3))
    with pytest.raises(SpecError):
        make_phantom(PhantomSpec(landmarks=[("far", (500.0, 0.0, 0.0))]))
    with pytest.raises(SpecError):
        make_phantom(PhantomSpec(dims=(0, 10, 10)))


def test_landmark_csv_round_trip(tmp_path):
    lm = LandmarkSet(("a", "b"), [[1.5, -2.0, 3.25], [0.1, 0.2, 0.3]])
    save_landmarks(lm, tmp_path / "l.csv")
    back = load_landmarks(tmp_path / "l.csv")
    assert back.names == lm.names
    np.testing.assert_array_equal(back.points_mm, lm.points_mm)


def test_landmark_errors(tmp_path):
    (tmp_path / "a.csv").write_text("id,x,y,z\n")
    with pytest.raises(FormatError):
        load_landmarks(tmp_path / "a.csv")
    (tmp_path / "b.csv").write_text("name,x_mm,y_mm,z_mm\np,1,2\n")
    with pytest.raises(FormatError):
        load_landmarks(tmp_path / "b.csv")
    with pytest.raises(ValueError):
        LandmarkSet(("a", "a"), np.zeros((2, 3)))
