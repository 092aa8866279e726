"""Sampling of clinical C-arm parameters and seeded virtual X-ray datasets."""

from __future__ import annotations

import hashlib
import json
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import __version__
from .drr import DRRRenderer, Image2, RenderConfig, crop_indices, save_image
from .errors import FormatError, SamplingError
from .geom import CArmPose, DetectorSpec, carm_extrinsics, read_json_record
from .volume import Volume3, threshold_segment

MAX_REJECTIONS = 1000
_RANGE_KEYS = ("alpha_deg", "beta_deg", "gamma_deg", "sid_mm", "ssd_mm")


def _pair(v) -> tuple[float, float]:
    lo, hi = (float(x) for x in v)
    if not lo <= hi:
        raise ValueError(f"range needs lower <= upper, got [{lo}, {hi}]")
    return lo, hi


@dataclass(frozen=True)
class ParamRanges:
    """Uniform sampling box for the device parameters.

    ``isocenter_mm=None`` means "derive from the volume" (see
    :meth:`with_volume_box`); :func:`sample_pose` treats it as the CT origin.
    """

    alpha_deg: tuple[float, float] = (-2.0, 2.0)
    beta_deg: tuple[float, float] = (0.0, 50.0)
    gamma_deg: tuple[float, float] = (-10.0, 10.0)
    sid_mm: tuple[float, float] = (850.0, 1250.0)
    ssd_mm: tuple[float, float] = (720.0, 820.0)
    isocenter_mm: tuple[tuple[float, float], ...] | None = None

    def __post_init__(self):
        for k in _RANGE_KEYS:
            object.__setattr__(self, k, _pair(getattr(self, k)))
        if self.isocenter_mm is not None:
            iso = tuple(_pair(r) for r in self.isocenter_mm)
            if len(iso) != 3:
                raise ValueError("isocenter box needs three ranges")
            object.__setattr__(self, "isocenter_mm", iso)

    def with_volume_box(self, volume: Volume3) -> ParamRanges:
        """Isocenter box centered on the volume centroid, half-width d/4 per axis,
        d being the scanning diameter."""
        c = volume.centroid_mm
        h = volume.scanning_diameter_mm / 4.0
        return ParamRanges(self.alpha_deg, self.beta_deg, self.gamma_deg, self.sid_mm, self.ssd_mm,
                           tuple((float(ci - h), float(ci + h)) for ci in c))

    def contains(self, pose: CArmPose) -> bool:
        ok = all(lo <= getattr(pose, k) <= hi for k, (lo, hi) in
                 ((k, getattr(self, k)) for k in _RANGE_KEYS))
        if self.isocenter_mm is not None:
            ok = ok and all(lo <= p <= hi for p, (lo, hi) in zip(pose.isocenter_mm, self.isocenter_mm))
        return ok

    def to_record(self) -> dict:
        rec = {k: list(getattr(self, k)) for k in _RANGE_KEYS}
        rec["isocenter_mm"] = None if self.isocenter_mm is None else [list(r) for r in self.isocenter_mm]
        return rec

    @classmethod
    def from_record(cls, rec: dict) -> ParamRanges:
        unknown = set(rec) - set(_RANGE_KEYS) - {"isocenter_mm"}
        if unknown:
            raise FormatError(f"unknown range keys: {', '.join(sorted(unknown))}")
        base = cls()
        try:
            kw = {k: tuple(rec.get(k, getattr(base, k))) for k in _RANGE_KEYS}
            iso = rec.get("isocenter_mm")
            return cls(**kw, isocenter_mm=None if iso is None else tuple(tuple(r) for r in iso))
        except (TypeError, ValueError) as exc:
            raise FormatError(f"bad ranges: {exc}") from None


def load_ranges(path) -> ParamRanges:
    return ParamRanges.from_record(read_json_record(path))


def sample_pose(ranges: ParamRanges, rng: np.random.Generator) -> CArmPose:
    """Independent uniform draws; SID/SSD are redrawn until SID > SSD."""
    a = rng.uniform(*ranges.alpha_deg)
    b = rng.uniform(*ranges.beta_deg)
    g = rng.uniform(*ranges.gamma_deg)
    for _ in range(MAX_REJECTIONS):
        sid = rng.uniform(*ranges.sid_mm)
        ssd = rng.uniform(*ranges.ssd_mm)
        if sid > ssd:
            break
    else:
        raise SamplingError(f"no SID > SSD draw in {MAX_REJECTIONS} attempts")
    box = ranges.isocenter_mm or ((0.0, 0.0),) * 3
    iso = tuple(float(rng.uniform(lo, hi)) for lo, hi in box)
    return CArmPose(float(a), float(b), float(g), float(sid), float(ssd), iso)


def sample_seed(seed: int, sample_id: int) -> int:
    """Per-sample stream seed, independent of generation order."""
    return int(np.random.SeedSequence([int(seed), int(sample_id)]).generate_state(1, np.uint64)[0])


def volume_digest(volume: Volume3) -> str:
    return hashlib.sha256(np.ascontiguousarray(volume.voxels).tobytes()).hexdigest()


@dataclass
class DatasetManifest:
    header: dict
    records: list[dict] = field(default_factory=list)

    def lines(self) -> list[str]:
        return [json.dumps(self.header, sort_keys=True)] + [json.dumps(r, sort_keys=True) for r in self.records]

    def save(self, path) -> None:
        Path(path).write_text("\n".join(self.lines()) + "\n", encoding="utf-8")


def load_manifest(path) -> DatasetManifest:
    lines = [ln for ln in Path(path).read_text(encoding="utf-8").splitlines() if ln.strip()]
    if not lines:
        raise FormatError(f"{path}: empty manifest")
    try:
        rows = [json.loads(ln) for ln in lines]
    except json.JSONDecodeError as exc:
        raise FormatError(f"{path}: {exc}") from None
    return DatasetManifest(rows[0], rows[1:])


def generate_dataset(volume: Volume3, ranges: ParamRanges, n: int, out_dir, seed: int,
                     mask_mode: bool = False, detector: DetectorSpec | None = None,
                     render: RenderConfig | None = None, workers: int = 1,
                     threads: int | None = None, volume_ref: str | None = None,
                     backend: str | None = None) -> DatasetManifest:
    """Render ``n`` cropped virtual X-rays at sampled poses into ``out_dir``.

    Writes ``images/sample_XXXXXX.{hdr,raw,pgm}`` (plus ``_mask`` variants in
    mask mode) and ``manifest.jsonl``. Output bytes depend only on the inputs
    and ``seed``, not on ``workers`` or ``threads``.
    """
    if n < 0:
        raise ValueError("n must be >= 0")
    detector = detector or DetectorSpec()
    render = render or RenderConfig()
    if ranges.isocenter_mm is None:
        ranges = ranges.with_volume_box(volume)
    out = Path(out_dir)
    (out / "images").mkdir(parents=True, exist_ok=True)
    rows, cols = crop_indices(detector.height_px, detector.width_px)
    renderer = DRRRenderer(volume, render, backend)
    mask_renderer = DRRRenderer(threshold_segment(volume), render, backend) if mask_mode else None

    header = {
        "type": "header",
        "generator": f"carmreg {__version__}",
        "n": int(n),
        "seed": int(seed),
        "volume": {"ref": volume_ref, "dims": list(volume.dims), "spacing_mm": list(volume.spacing_mm),
                   "origin_mm": list(volume.origin_mm), "sha256": volume_digest(volume)},
        "detector": asdict(detector),
        "render": {"step_mm": renderer.step_mm, "hu_floor": render.hu_floor, "normalize": render.normalize},
        "ranges": ranges.to_record(),
        "mask_mode": bool(mask_mode),
        "image_dims": [int(cols.size), int(rows.size)],
    }

    def one(sample_id: int) -> dict:
        s = sample_seed(seed, sample_id)
        pose = sample_pose(ranges, np.random.default_rng(s))
        model = carm_extrinsics(pose, detector)
        rec = {"sample_id": sample_id, "seed": s, "pose": pose.to_record()}
        name = f"images/sample_{sample_id:06d}"
        img = Image2(renderer.render_pixels(model, rows, cols, threads))
        save_image(img, out / f"{name}.hdr", dtype="f32")
        rec["image_path"] = f"{name}.hdr"
        if mask_renderer is not None:
            mimg = Image2(mask_renderer.render_pixels(model, rows, cols, threads))
            save_image(mimg, out / f"{name}_mask.hdr", dtype="f32")
            rec["mask_path"] = f"{name}_mask.hdr"
        return rec

    if workers > 1 and n > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            records = list(pool.map(one, range(n)))
    else:
        records = [one(i) for i in range(n)]
    manifest = DatasetManifest(header, records)
    manifest.save(out / "manifest.jsonl")
    return manifest
