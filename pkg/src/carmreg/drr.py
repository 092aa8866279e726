"""Ray-cast digitally reconstructed radiographs.

Each pixel is a fixed-step midpoint sum of trilinearly interpolated
attenuation along the ray from the source through the pixel center::

    I(u, v) = sum_k mu(p_k) * step,   mu = max(HU - hu_floor, 0) / 1000

with ``hu_floor = -1000`` making air transparent and water 1. Rays are
clipped to the voxel-center box; samples outside return 0.
"""

from __future__ import annotations

import re
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import _backend
from .errors import FormatError, SizeMismatch, TooSmall
from .geom import ProjectionModel, invert
from .volume import MaskVolume, Volume3, _parse_header, _read_raw

CROP_ROWS = 352
CROP_COLS = 512


@dataclass(frozen=True, eq=False)
class Image2:
    """Row-major 2D image; ``pixels[row, col]``."""

    pixels: np.ndarray
    normalized: bool = False

    def __post_init__(self):
        px = np.array(self.pixels, dtype=np.float64)
        if px.ndim != 2 or 0 in px.shape:
            raise ValueError(f"image must be a non-empty 2D array, got shape {px.shape}")
        if not np.isfinite(px).all():
            raise ValueError("image pixels must be finite")
        px.flags.writeable = False
        object.__setattr__(self, "pixels", px)

    @property
    def width_px(self) -> int:
        return self.pixels.shape[1]

    @property
    def height_px(self) -> int:
        return self.pixels.shape[0]

    @property
    def shape(self) -> tuple[int, int]:
        return self.pixels.shape


@dataclass(frozen=True)
class RenderConfig:
    """``step_mm=None`` uses half the smallest voxel spacing. ``threads=None``
    uses ``CARMREG_THREADS`` or the CPU count; output never depends on it."""

    step_mm: float | None = None
    hu_floor: float = -1000.0
    normalize: bool = False
    threads: int | None = None

    def __post_init__(self):
        if self.step_mm is not None and not self.step_mm > 0:
            raise ValueError("step_mm must be positive")
        if self.threads is not None and self.threads < 1:
            raise ValueError("threads must be >= 1")


def attenuation(volume: Volume3, hu_floor: float = -1000.0) -> np.ndarray:
    """Per-voxel attenuation, float32 ``[z, y, x]``. Masks pass through unchanged."""
    if isinstance(volume, MaskVolume):
        return np.ascontiguousarray(volume.voxels, dtype=np.float32)
    mu = np.maximum(volume.voxels.astype(np.float64) - hu_floor, 0.0) / 1000.0
    return mu.astype(np.float32)


def _active_box(mu: np.ndarray) -> np.ndarray:
    """Index box (xlo, xhi, ylo, yhi, zlo, zhi) outside which interpolation is exactly 0."""
    nz, ny, nx = mu.shape
    nonzero = mu != 0
    if not nonzero.any():
        return np.array([0, -1, 0, -1, 0, -1], dtype=np.int64)
    box = []
    for axis, n in ((2, nx), (1, ny), (0, nz)):
        other = tuple(a for a in range(3) if a != axis)
        hit = np.nonzero(nonzero.any(axis=other))[0]
        box += [max(hit[0] - 1, 0), min(hit[-1] + 1, n - 1)]
    return np.array(box, dtype=np.int64)


class DRRRenderer:
    """A volume prepared for repeated rendering (attenuation map, empty-space
    bounds and per-axis memory layouts are computed once)."""

    def __init__(self, volume: Volume3, cfg: RenderConfig | None = None, backend: str | None = None):
        self.volume = volume
        self.cfg = cfg or RenderConfig()
        self.backend = backend
        self.mu = attenuation(volume, self.cfg.hu_floor)
        self.active = _active_box(self.mu)
        self.step_mm = self.cfg.step_mm or 0.5 * min(volume.spacing_mm)
        self._layouts: dict[int, np.ndarray] = {}

    def _layout(self, fast_axis: int) -> tuple[np.ndarray, list[int]]:
        # kernel axis order (fast, mid, slow) in xyz terms
        order = [fast_axis] + [a for a in (0, 1, 2) if a != fast_axis]
        if fast_axis not in self._layouts:
            self._layouts[fast_axis] = np.ascontiguousarray(
                self.mu.transpose([2 - order[2], 2 - order[1], 2 - order[0]]))
        return self._layouts[fast_axis], order

    def render_pixels(self, model: ProjectionModel, rows, cols, threads: int | None = None,
                      step_mm: float | None = None) -> np.ndarray:
        """Raw line integrals at pixel centers ``(col + 0.5, row + 0.5)`` for the given index arrays.

        ``step_mm`` overrides the configured sampling step for this call only.
        """
        rows = np.asarray(rows, dtype=np.float64) + 0.5
        cols = np.asarray(cols, dtype=np.float64) + 0.5
        vol = self.volume
        ct_from_world = invert(model.world_from_ct)
        origin = np.asarray(vol.origin_mm)
        spacing = np.asarray(vol.spacing_mm)
        pitch = model.detector.pitch_mm
        source = (ct_from_world.apply(model.source_mm) - origin) / spacing
        det0 = (ct_from_world.apply(model.detector_origin_mm) - origin) / spacing
        u_step = ct_from_world.apply_vector(model.detector_u_axis) * pitch / spacing
        v_step = ct_from_world.apply_vector(model.detector_v_axis) * pitch / spacing
        view = ct_from_world.apply_vector(model.view_direction)

        arr, order = self._layout(int(np.argmax(np.abs(view))))
        perm = np.asarray(order)
        act = self.active.reshape(3, 2)[perm].reshape(-1).copy()
        out = np.zeros((rows.size, cols.size), dtype=np.float64)
        if rows.size and cols.size:
            _backend.render_rays(
                arr, source[perm].copy(), det0[perm].copy(), u_step[perm].copy(), v_step[perm].copy(),
                cols, rows, spacing[perm].copy(), act, float(step_mm or self.step_mm), out,
                int(threads or self.cfg.threads or _backend.default_threads()),
                backend=self.backend)
        return out

    def render(self, model: ProjectionModel, threads: int | None = None) -> Image2:
        det = model.detector
        raw = self.render_pixels(model, np.arange(det.height_px), np.arange(det.width_px), threads)
        img = Image2(raw)
        return normalize_image(img) if self.cfg.normalize else img


def render_drr(volume: Volume3, model: ProjectionModel, cfg: RenderConfig | None = None,
               backend: str | None = None) -> Image2:
    """Full-detector DRR of ``volume`` under ``model`` (detector taken from the model)."""
    return DRRRenderer(volume, cfg, backend).render(model)


def crop_indices(height: int, width: int, rows: int = CROP_ROWS, cols: int = CROP_COLS):
    """Row and column index arrays kept by :func:`crop_upper` for a ``height x width`` image."""
    if height < rows or width < cols:
        raise TooSmall(f"image {height}x{width} is smaller than the {rows}x{cols} crop")
    start = (width - cols) // 2
    return np.arange(rows), np.arange(start, start + cols)


def crop_upper(image: Image2, rows: int = CROP_ROWS, cols: int = CROP_COLS) -> Image2:
    """Top ``rows`` rows (cranial side), horizontally center-cropped to ``cols``."""
    r, c = crop_indices(image.height_px, image.width_px, rows, cols)
    return Image2(image.pixels[r[0]:r[-1] + 1, c[0]:c[-1] + 1], image.normalized)


def normalize_image(image: Image2) -> Image2:
    """Linear min->0, max->1 rescale; a constant image maps to zeros."""
    px = image.pixels
    lo, hi = px.min(), px.max()
    if hi == lo:
        return Image2(np.zeros_like(px), True)
    out = (px - lo) / (hi - lo)
    return Image2(np.clip(out, 0.0, 1.0), True)


_IMAGE_KEYS = {"dims": 2, "dtype": 1, "normalized": 1, "data_file": 1}
_IMAGE_DTYPES = {"f32": np.dtype("<f4"), "f64": np.dtype("<f8")}


def save_image(image: Image2, header_path, dtype: str = "f64", pgm: bool = True) -> None:
    """Write header + little-endian raw, and a 16-bit PGM preview next to it."""
    header_path = Path(header_path)
    if dtype not in _IMAGE_DTYPES:
        raise FormatError(f"image dtype must be f32 or f64, got {dtype}")
    raw_name = header_path.with_suffix(".raw").name
    (header_path.parent / raw_name).write_bytes(image.pixels.astype(_IMAGE_DTYPES[dtype]).tobytes())
    lines = [
        f"dims: {image.width_px} {image.height_px}",
        f"dtype: {dtype}",
        f"normalized: {int(image.normalized)}",
        f"data_file: {raw_name}",
    ]
    header_path.write_text("\n".join(lines) + "\n", encoding="utf-8")
    if pgm:
        save_pgm(image, header_path.with_suffix(".pgm"))


def load_image(header_path) -> Image2:
    header_path = Path(header_path)
    h = _parse_header(header_path, _IMAGE_KEYS)
    try:
        w, hgt = (int(v) for v in h["dims"])
        normalized = int(h["normalized"][0])
    except ValueError as exc:
        raise FormatError(f"{header_path}: {exc}") from None
    if w <= 0 or hgt <= 0 or normalized not in (0, 1):
        raise FormatError(f"{header_path}: bad dims or normalized flag")
    dtype = h["dtype"][0]
    if dtype not in _IMAGE_DTYPES:
        raise FormatError(f"{header_path}: image dtype must be f32 or f64, got {dtype}")
    raw = _read_raw(header_path.parent / h["data_file"][0], _IMAGE_DTYPES[dtype], w * hgt)
    return Image2(raw.astype(np.float64).reshape(hgt, w), bool(normalized))


def pgm_bytes(image: Image2) -> bytes:
    """Binary P5, 16-bit big-endian; min->0 and max->65535 (constant image -> 0)."""
    px = image.pixels
    lo, hi = px.min(), px.max()
    if hi == lo:
        scaled = np.zeros(px.shape, dtype=">u2")
    else:
        scaled = np.round((px - lo) / (hi - lo) * 65535.0).astype(">u2")
    header = f"P5\n{image.width_px} {image.height_px}\n65535\n".encode("ascii")
    return header + scaled.tobytes()


def save_pgm(image: Image2, path) -> None:
    Path(path).write_bytes(pgm_bytes(image))


def read_pgm(path) -> np.ndarray:
    data = Path(path).read_bytes()
    m = re.match(rb"P5\s+(\d+)\s+(\d+)\s+(\d+)\s", data)
    if m is None:
        raise FormatError(f"{path}: not a binary PGM")
    w, h, maxval = (int(g) for g in m.groups())
    dtype = ">u2" if maxval > 255 else "u1"
    payload = data[m.end():]
    if len(payload) != w * h * np.dtype(dtype).itemsize:
        raise SizeMismatch(f"{path}: PGM payload length mismatch")
    return np.frombuffer(payload, dtype=dtype).reshape(h, w)
