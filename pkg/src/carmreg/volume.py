"""CT volumes: raw+header I/O, trilinear sampling, threshold segmentation and
the synthetic thorax phantom used in place of clinical CT."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import _backend
from .errors import FormatError, SizeMismatch, SpecError
from .landmarks import LandmarkSet

DEFAULT_BONE_THRESHOLD_HU = 300.0

_DTYPES = {"f32": np.dtype("<f4"), "i16": np.dtype("<i2")}


@dataclass(frozen=True, eq=False)
class Volume3:
    """Scalar voxel grid. ``voxels`` is indexed ``[z, y, x]`` (x fastest in memory);
    voxel ``(i, j, k)`` has its center at ``origin_mm + (i, j, k) * spacing_mm``."""

    voxels: np.ndarray
    spacing_mm: tuple[float, float, float] = (1.0, 1.0, 1.0)
    origin_mm: tuple[float, float, float] = (0.0, 0.0, 0.0)

    def __post_init__(self):
        vox = np.ascontiguousarray(self.voxels, dtype=np.float32)
        if vox.ndim != 3 or 0 in vox.shape:
            raise ValueError(f"voxels must be a non-empty 3D array, got shape {vox.shape}")
        spacing = tuple(float(s) for s in self.spacing_mm)
        origin = tuple(float(o) for o in self.origin_mm)
        if len(spacing) != 3 or not all(s > 0 and math.isfinite(s) for s in spacing):
            raise ValueError(f"spacing must be three positive values, got {spacing}")
        if len(origin) != 3 or not all(math.isfinite(o) for o in origin):
            raise ValueError("origin must be three finite values")
        if not np.isfinite(vox).all():
            raise ValueError("voxel values must be finite")
        if vox is self.voxels:
            vox = vox.copy()
        vox.flags.writeable = False
        object.__setattr__(self, "voxels", vox)
        object.__setattr__(self, "spacing_mm", spacing)
        object.__setattr__(self, "origin_mm", origin)

    @property
    def dims(self) -> tuple[int, int, int]:
        nz, ny, nx = self.voxels.shape
        return nx, ny, nz

    @property
    def extent_mm(self) -> tuple[np.ndarray, np.ndarray]:
        """Lower and upper corners of the box spanned by voxel centers."""
        lo = np.asarray(self.origin_mm)
        return lo, lo + (np.asarray(self.dims) - 1) * np.asarray(self.spacing_mm)

    @property
    def centroid_mm(self) -> np.ndarray:
        lo, hi = self.extent_mm
        return (lo + hi) / 2.0

    @property
    def scanning_diameter_mm(self) -> float:
        """Largest physical extent in the axial (x-z) plane."""
        lo, hi = self.extent_mm
        return float(max(hi[0] - lo[0], hi[2] - lo[2]))

    def to_index(self, p_mm) -> np.ndarray:
        return (np.asarray(p_mm, dtype=float) - np.asarray(self.origin_mm)) / np.asarray(self.spacing_mm)

    def same_grid(self, other: Volume3) -> bool:
        return (self.voxels.shape == other.voxels.shape and self.spacing_mm == other.spacing_mm
                and self.origin_mm == other.origin_mm)


@dataclass(frozen=True, eq=False)
class MaskVolume(Volume3):
    """Binary volume on a parent's grid; rendered with voxel value as attenuation."""

    def __post_init__(self):
        super().__post_init__()
        if not np.isin(self.voxels, (0.0, 1.0)).all():
            raise ValueError("mask voxels must be 0 or 1")


def _parse_header(path: Path, expected: dict[str, int]) -> dict[str, list[str]]:
    fields = {}
    for lineno, line in enumerate(path.read_text(encoding="utf-8").splitlines(), start=1):
        if not line.strip():
            continue
        key, sep, value = line.partition(":")
        key = key.strip()
        if not sep or key not in expected:
            raise FormatError(f"{path}:{lineno}: unknown header key {key!r}")
        if key in fields:
            raise FormatError(f"{path}:{lineno}: duplicate key {key!r}")
        parts = value.split()
        if len(parts) != expected[key]:
            raise FormatError(f"{path}:{lineno}: {key} expects {expected[key]} values")
        fields[key] = parts
    missing = [k for k in expected if k not in fields]
    if missing:
        raise FormatError(f"{path}: missing header keys {', '.join(missing)}")
    return fields


def _read_raw(path: Path, dtype: np.dtype, count: int) -> np.ndarray:
    data = path.read_bytes()
    if len(data) != count * dtype.itemsize:
        raise SizeMismatch(f"{path}: expected {count} elements of {dtype.itemsize} bytes, "
                           f"found {len(data)} bytes")
    return np.frombuffer(data, dtype=dtype)


_VOLUME_KEYS = {"dims": 3, "spacing": 3, "origin": 3, "dtype": 1, "data_file": 1}


def load_volume(header_path) -> Volume3:
    header_path = Path(header_path)
    h = _parse_header(header_path, _VOLUME_KEYS)
    try:
        nx, ny, nz = (int(v) for v in h["dims"])
        spacing = tuple(float(v) for v in h["spacing"])
        origin = tuple(float(v) for v in h["origin"])
    except ValueError as exc:
        raise FormatError(f"{header_path}: {exc}") from None
    if min(nx, ny, nz) <= 0:
        raise FormatError(f"{header_path}: dims must be positive")
    dtype = h["dtype"][0]
    if dtype not in _DTYPES:
        raise FormatError(f"{header_path}: dtype must be f32 or i16, got {dtype}")
    raw = _read_raw(header_path.parent / h["data_file"][0], _DTYPES[dtype], nx * ny * nz)
    return Volume3(raw.astype(np.float32).reshape(nz, ny, nx), spacing, origin)


def save_volume(volume: Volume3, header_path, dtype: str = "f32") -> None:
    header_path = Path(header_path)
    if dtype not in _DTYPES:
        raise FormatError(f"dtype must be f32 or i16, got {dtype}")
    vox = volume.voxels
    if dtype == "i16":
        if not (np.all(vox == np.round(vox)) and vox.min() >= -32768 and vox.max() <= 32767):
            raise ValueError("volume is not representable as int16")
    raw_name = header_path.with_suffix(".raw").name
    (header_path.parent / raw_name).write_bytes(vox.astype(_DTYPES[dtype]).tobytes())
    nx, ny, nz = volume.dims
    lines = [
        f"dims: {nx} {ny} {nz}",
        "spacing: " + " ".join(repr(s) for s in volume.spacing_mm),
        "origin: " + " ".join(repr(o) for o in volume.origin_mm),
        f"dtype: {dtype}",
        f"data_file: {raw_name}",
    ]
    header_path.write_text("\n".join(lines) + "\n", encoding="utf-8")


def trilinear_sample_many(volume: Volume3, points_mm) -> np.ndarray:
    """Trilinear interpolation at (N, 3) points; 0 outside the voxel-center box."""
    idx = np.ascontiguousarray(volume.to_index(np.atleast_2d(points_mm)), dtype=np.float64)
    return _backend.trilinear_many(volume.voxels, idx)


def trilinear_sample(volume: Volume3, p_mm) -> float:
    return float(trilinear_sample_many(volume, np.asarray(p_mm, dtype=float).reshape(1, 3))[0])


def threshold_segment(volume: Volume3, hu_threshold: float = DEFAULT_BONE_THRESHOLD_HU) -> MaskVolume:
    """1 where voxel >= threshold, else 0."""
    if not math.isfinite(hu_threshold):
        raise ValueError("threshold must be finite")
    mask = (volume.voxels >= hu_threshold).astype(np.float32)
    return MaskVolume(mask, volume.spacing_mm, volume.origin_mm)


# --- synthetic thorax phantom ------------------------------------------------

def _default_landmarks() -> list[tuple[str, tuple[float, float, float]]]:
    # offsets from the volume centroid, aortic-arch-like positions anterior to the spine
    return [
        ("brachiocephalic", (14.0, -96.0, -22.0)),
        ("left_common_carotid", (-4.0, -102.0, -14.0)),
        ("left_subclavian", (-20.0, -98.0, 0.0)),
        ("arch_apex", (-2.0, -84.0, -10.0)),
        ("descending_aorta", (-22.0, -40.0, 26.0)),
        ("aortic_root", (8.0, -48.0, -30.0)),
    ]


@dataclass(frozen=True)
class PhantomSpec:
    """Geometry of the synthetic thorax. Lengths in mm; landmark offsets are
    relative to the volume centroid. ``origin_mm=None`` centers the grid on 0."""

    dims: tuple[int, int, int] = (256, 256, 256)
    spacing_mm: tuple[float, float, float] = (1.5, 1.5, 1.5)
    origin_mm: tuple[float, float, float] | None = None
    vertebra_count: int = 8
    vertebra_radius_mm: float = 18.0
    vertebra_height_mm: float = 22.0
    vertebra_gap_mm: float = 6.0
    ribs: bool = True
    rib_radius_mm: float = 4.5
    lungs: bool = True
    body_fraction: tuple[float, float, float] = (0.42, 0.47, 0.30)
    landmarks: list[tuple[str, tuple[float, float, float]]] | None = field(default=None)
    bone_hu: float = 700.0
    tissue_hu: float = 40.0
    air_hu: float = -1000.0

    def grid_origin(self) -> np.ndarray:
        if self.origin_mm is not None:
            return np.asarray(self.origin_mm, dtype=float)
        return -(np.asarray(self.dims) - 1) * np.asarray(self.spacing_mm) / 2.0

    def extent(self) -> np.ndarray:
        return (np.asarray(self.dims) - 1) * np.asarray(self.spacing_mm)


@dataclass(frozen=True)
class PhantomLayout:
    """Realised primitive parameters (after seeded jitter), relative to the centroid."""

    body_semi_axes: np.ndarray
    vertebra_centers: np.ndarray  # (n, 3)
    rib_drops: np.ndarray         # (n, 2) caudal drop of the left/right rib over its arc
    lung_centers: np.ndarray      # (2, 3)
    lung_semi_axes: np.ndarray


_RIB_ARC = (math.radians(15.0), math.radians(150.0))
_RIB_SCALE = (0.88, 0.85)


def phantom_layout(spec: PhantomSpec, seed: int) -> PhantomLayout:
    half = spec.extent() / 2.0
    body = np.asarray(spec.body_fraction) * spec.extent()
    rng = np.random.default_rng(np.random.SeedSequence([int(seed), 0x70A7]))
    n = int(spec.vertebra_count)
    pitch = spec.vertebra_height_mm + spec.vertebra_gap_mm
    ys = (np.arange(n) - (n - 1) / 2.0) * pitch
    jitter = rng.uniform(-1.5, 1.5, size=(n, 2))
    centers = np.stack([jitter[:, 0], ys, 0.55 * body[2] + jitter[:, 1]], axis=1)
    drops = rng.uniform(20.0, 30.0, size=(n, 2))
    lung_axes = np.array([0.30 * body[0], 0.46 * body[1], 0.62 * body[2]])
    lung_y = -0.12 * body[1]
    lungs = np.array([[0.45 * body[0], lung_y, -0.05 * body[2]],
                      [-0.45 * body[0], lung_y, -0.05 * body[2]]])
    layout = PhantomLayout(body, centers.reshape(-1, 3), drops.reshape(-1, 2), lungs, lung_axes)

    if np.any(body > half):
        raise SpecError("soft-tissue ellipsoid exceeds the volume extent")
    if n:
        r, hh = spec.vertebra_radius_mm, spec.vertebra_height_mm / 2.0
        c = layout.vertebra_centers
        if (np.any(np.abs(c[:, 0]) + r > half[0]) or np.any(np.abs(c[:, 1]) + hh > half[1])
                or np.any(np.abs(c[:, 2]) + r > half[2])):
            raise SpecError("vertebrae exceed the volume extent")
        if spec.ribs:
            top = c[:, 1].min() - spec.rib_radius_mm
            bottom = c[:, 1].max() + drops.max() + spec.rib_radius_mm
            if top < -half[1] or bottom > half[1]:
                raise SpecError("ribs exceed the volume extent")
    return layout


def _landmark_set(spec: PhantomSpec, centroid: np.ndarray) -> LandmarkSet:
    pairs = spec.landmarks if spec.landmarks is not None else _default_landmarks()
    half = spec.extent() / 2.0
    for name, off in pairs:
        if np.any(np.abs(np.asarray(off, dtype=float)) > half):
            raise SpecError(f"landmark {name!r} lies outside the volume extent")
    if not pairs:
        return LandmarkSet((), np.zeros((0, 3)))
    return LandmarkSet.from_pairs((n, centroid + np.asarray(o, dtype=float)) for n, o in pairs)


def make_phantom(spec: PhantomSpec | None = None, seed: int = 0) -> tuple[Volume3, LandmarkSet]:
    """Render the phantom of ``spec`` to voxels. Deterministic for a fixed seed."""
    spec = spec or PhantomSpec()
    if any(int(d) <= 0 for d in spec.dims):
        raise SpecError("phantom dims must be positive")
    layout = phantom_layout(spec, seed)
    nx, ny, nz = (int(d) for d in spec.dims)
    sx, sy, sz = spec.spacing_mm
    origin = spec.grid_origin()
    centroid = origin + spec.extent() / 2.0
    # coordinates relative to the centroid, broadcastable to [z, y, x]
    x = (np.arange(nx) * sx + origin[0] - centroid[0]).astype(np.float32)[None, None, :]
    y = (np.arange(ny) * sy + origin[1] - centroid[1]).astype(np.float32)[None, :, None]
    z = (np.arange(nz) * sz + origin[2] - centroid[2]).astype(np.float32)[:, None, None]

    vox = np.full((nz, ny, nx), spec.air_hu, dtype=np.float32)
    a = layout.body_semi_axes.astype(np.float32)
    body = (x / a[0]) ** 2 + (y / a[1]) ** 2 + (z / a[2]) ** 2 <= 1.0
    vox[body] = spec.tissue_hu
    del body
    if spec.lungs:
        la = layout.lung_semi_axes.astype(np.float32)
        for c in layout.lung_centers.astype(np.float32):
            lung = ((x - c[0]) / la[0]) ** 2 + ((y - c[1]) / la[1]) ** 2 + ((z - c[2]) / la[2]) ** 2 <= 1.0
            vox[lung] = spec.air_hu
    vox[_bone_mask(spec, layout, x, y, z)] = spec.bone_hu
    volume = Volume3(vox, spec.spacing_mm, tuple(origin))
    return volume, _landmark_set(spec, centroid)


def _bone_mask(spec, layout, x, y, z) -> np.ndarray:
    shape = (z.shape[0], y.shape[1], x.shape[2])
    bone = np.zeros(shape, dtype=bool)
    r2 = np.float32(spec.vertebra_radius_mm ** 2)
    hh = np.float32(spec.vertebra_height_mm / 2.0)
    for c in layout.vertebra_centers.astype(np.float32):
        bone |= (((x - c[0]) ** 2 + (z - c[2]) ** 2 <= r2) & (np.abs(y - c[1]) <= hh))
    if spec.ribs:
        ax = np.float32(_RIB_SCALE[0] * layout.body_semi_axes[0])
        az = np.float32(_RIB_SCALE[1] * layout.body_semi_axes[2])
        phi0, phi1 = (np.float32(v) for v in _RIB_ARC)
        rr = np.float32(spec.rib_radius_mm)
        yflat = y[0, :, 0]
        for c, drops in zip(layout.vertebra_centers, layout.rib_drops):
            rows = np.nonzero((yflat >= c[1] - rr) & (yflat <= c[1] + drops.max() + rr))[0]
            if rows.size == 0:
                continue
            ys = y[:, rows, :]
            for side, drop in zip((1.0, -1.0), drops):
                lateral = np.float32(side) * x
                phi = np.arctan2(lateral / ax, z / az)
                rho = np.sqrt((x / ax) ** 2 + (z / az) ** 2)
                radius = np.sqrt((ax * np.sin(phi)) ** 2 + (az * np.cos(phi)) ** 2)
                radial = (rho - 1.0) * radius
                frac = np.clip((phi - phi0) / (phi1 - phi0), 0.0, 1.0)
                centre_y = np.float32(c[1]) + np.float32(drop) * frac
                on_arc = (lateral > 0) & (phi >= phi0) & (phi <= phi1)
                hit = on_arc & (radial ** 2 + (ys - centre_y) ** 2 <= rr ** 2)
                bone[:, rows, :] |= hit
    return bone
