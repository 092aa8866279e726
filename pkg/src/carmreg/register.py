"""Intensity-based 2D/3D rigid registration of a fixed X-ray against a CT volume.

The device parameters (three gantry angles, SID, SSD, isocenter) are known;
the unknown is the patient's rigid pose relative to the CT, six parameters
``(rx, ry, rz, tx, ty, tz)``. CT points move as::

    p' = R(rx, ry, rz) @ (p - iso) + iso + t

and the device extrinsics are applied after that, so a rotation spins the
patient about the isocenter while ``t`` shifts it in CT axes.
"""

from __future__ import annotations

import itertools
import json
import math
import time
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .drr import DRRRenderer, Image2, RenderConfig, crop_indices
from .errors import DegenerateInput, FormatError, ShapeMismatch
from .geom import (CArmPose, DetectorSpec, ProjectionModel, RigidTransform, carm_extrinsics,
                   compose, euler_to_rotation, read_json_record)
from .metrics import DEFAULT_BINS, METRICS, similarity
from .optim import OptimConfig, OptimResult, powell_minimize
from .volume import Volume3, threshold_segment

PATIENT_KEYS = ("rx_deg", "ry_deg", "rz_deg", "tx_mm", "ty_mm", "tz_mm")
INITIALIZERS = ("identity", "grid", "external")


def wrap_deg(a: float) -> float:
    """Map an angle to (-180, 180]."""
    return float(a - 360.0 * math.ceil((a - 180.0) / 360.0))


@dataclass(frozen=True)
class PatientPose:
    rx_deg: float = 0.0
    ry_deg: float = 0.0
    rz_deg: float = 0.0
    tx_mm: float = 0.0
    ty_mm: float = 0.0
    tz_mm: float = 0.0

    def __post_init__(self):
        vals = self.as_array()
        if not np.isfinite(vals).all():
            raise ValueError("patient pose must be finite")
        for k in PATIENT_KEYS[:3]:
            object.__setattr__(self, k, wrap_deg(float(getattr(self, k))))
        for k in PATIENT_KEYS[3:]:
            object.__setattr__(self, k, float(getattr(self, k)))

    @classmethod
    def from_array(cls, x) -> PatientPose:
        return cls(*(float(v) for v in np.asarray(x, dtype=float).ravel()[:6]))

    def as_array(self) -> np.ndarray:
        return np.array([getattr(self, k) for k in PATIENT_KEYS], dtype=float)

    @property
    def rotation(self) -> np.ndarray:
        return euler_to_rotation(self.rx_deg, self.ry_deg, self.rz_deg)

    def transform(self, center_mm=(0.0, 0.0, 0.0)) -> RigidTransform:
        """CT -> posed CT, rotating about ``center_mm``."""
        c = np.asarray(center_mm, dtype=float)
        rot = self.rotation
        return RigidTransform(rot, c - rot @ c + np.array([self.tx_mm, self.ty_mm, self.tz_mm]))

    def to_record(self) -> dict:
        return {k: getattr(self, k) for k in PATIENT_KEYS}

    @classmethod
    def from_record(cls, rec: dict) -> PatientPose:
        missing = [k for k in PATIENT_KEYS if k not in rec]
        if missing:
            raise FormatError(f"pose record missing keys: {', '.join(missing)}")
        try:
            return cls(*(float(rec[k]) for k in PATIENT_KEYS))
        except (TypeError, ValueError) as exc:
            raise FormatError(f"non-numeric pose value: {exc}") from None


IDENTITY_POSE = PatientPose()


def load_patient_pose(path) -> PatientPose:
    return PatientPose.from_record(read_json_record(path))


def save_patient_pose(pose: PatientPose, path, device: CArmPose | None = None) -> None:
    """Pose file: the device record (when given) plus the six patient keys."""
    rec = device.to_record() if device is not None else {}
    rec.update(pose.to_record())
    Path(path).write_text(json.dumps(rec, indent=2) + "\n", encoding="utf-8")


def posed_model(device: CArmPose, pose: PatientPose, detector: DetectorSpec | None = None) -> ProjectionModel:
    """Device extrinsics composed with the patient pose applied on the CT side."""
    model = carm_extrinsics(device, detector)
    return model.with_world_from_ct(compose(model.world_from_ct, pose.transform(device.isocenter_mm)))


def _default_optim() -> OptimConfig:
    return OptimConfig(x_tol=(0.05,) * 6, f_rel_tol=1e-9, max_iters=30, max_evals=3000,
                       line_tol=1e-3, bounds=((-15.0, 15.0),) * 3 + ((-50.0, 50.0),) * 3)


@dataclass(frozen=True)
class RegistrationConfig:
    """Everything needed to register one image.

    ``pyramid`` lists ``(stride, step_mm)`` levels run coarse to fine: each
    level renders every ``stride``-th detector row and column of the crop with
    ray step ``step_mm`` (``None`` = the render config). The grid initializer
    scans translations in ``[-grid_range_mm, grid_range_mm]`` at
    ``grid_step_mm`` with rotations held at zero, rendering at
    ``grid_stride``. With ``search_frame="view"`` the optimizer moves the
    translation along the detector u/v axes and the beam direction (bounds
    and tolerances apply in that frame); results are always CT-frame poses.
    """

    device: CArmPose = field(default_factory=CArmPose)
    metric: str = "cc"
    detector: DetectorSpec = field(default_factory=DetectorSpec)
    render: RenderConfig = field(default_factory=RenderConfig)
    optim: OptimConfig = field(default_factory=_default_optim)
    initializer: str = "identity"
    init_path: str | None = None
    mask_mode: bool = False
    bins: int = DEFAULT_BINS
    pyramid: tuple[tuple[int, float | None], ...] = ((8, 1.5), (4, 1.5), (2, None))
    grid_range_mm: float = 20.0
    grid_step_mm: float = 5.0
    grid_stride: int = 8
    grid_step_render_mm: float | None = 1.5
    search_frame: str = "view"

    def __post_init__(self):
        if self.metric not in METRICS:
            raise ValueError(f"unknown metric {self.metric!r}; valid options: {', '.join(METRICS)}")
        if self.initializer not in INITIALIZERS:
            raise ValueError(f"unknown initializer {self.initializer!r}; "
                             f"valid options: {', '.join(INITIALIZERS)}")
        if self.initializer == "external" and not self.init_path:
            raise ValueError("external initializer needs init_path")
        if self.search_frame not in ("view", "ct"):
            raise ValueError(f"search_frame must be view or ct, got {self.search_frame!r}")
        if not self.pyramid or any(int(s) < 1 for s, _ in self.pyramid):
            raise ValueError("pyramid needs at least one level with stride >= 1")
        if not (self.grid_step_mm > 0 and self.grid_range_mm >= 0 and self.grid_stride >= 1):
            raise ValueError("bad grid initializer settings")


@dataclass
class RegistrationResult:
    pose: PatientPose
    similarity_final: float
    evals: int
    sweeps: int
    wall_time_s: float
    converged: bool
    initial_pose: PatientPose = IDENTITY_POSE
    trace: list[tuple[list[float], float]] = field(default_factory=list)
    init_evals: int = 0

    def to_json(self) -> dict:
        return {
            "pose": self.pose.to_record(),
            "initial_pose": self.initial_pose.to_record(),
            "similarity_final": self.similarity_final,
            "evals": self.evals,
            "init_evals": self.init_evals,
            "sweeps": self.sweeps,
            "wall_time_s": self.wall_time_s,
            "converged": self.converged,
            "trace": [{"x": list(map(float, x)), "f": float(f)} for x, f in self.trace],
        }

    @classmethod
    def from_json(cls, rec: dict) -> RegistrationResult:
        try:
            return cls(PatientPose.from_record(rec["pose"]), float(rec["similarity_final"]),
                       int(rec["evals"]), int(rec["sweeps"]), float(rec["wall_time_s"]),
                       bool(rec["converged"]), PatientPose.from_record(rec["initial_pose"]),
                       [(list(t["x"]), float(t["f"])) for t in rec["trace"]],
                       int(rec.get("init_evals", 0)))
        except (KeyError, TypeError) as exc:
            raise FormatError(f"bad registration result: {exc}") from None

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_json(), indent=2) + "\n", encoding="utf-8")


class RegistrationProblem:
    """Fixed image, volume and config bound together; renders only the
    cropped (and possibly decimated) pixels the metric needs."""

    def __init__(self, fixed: Image2 | None, volume: Volume3, cfg: RegistrationConfig,
                 backend: str | None = None):
        self.cfg = cfg
        self.rows, self.cols = crop_indices(cfg.detector.height_px, cfg.detector.width_px)
        expected = (self.rows.size, self.cols.size)
        if fixed is not None and fixed.shape != expected:
            raise ShapeMismatch(f"fixed image is {fixed.shape[0]}x{fixed.shape[1]}, "
                                f"expected the {expected[0]}x{expected[1]} crop")
        self.fixed = fixed
        self.volume = threshold_segment(volume) if cfg.mask_mode else volume
        self.renderer = DRRRenderer(self.volume, cfg.render, backend)
        self.base_model = carm_extrinsics(cfg.device, cfg.detector)
        self.evals = 0

    def model(self, pose: PatientPose) -> ProjectionModel:
        t = compose(self.base_model.world_from_ct, pose.transform(self.cfg.device.isocenter_mm))
        return self.base_model.with_world_from_ct(t)

    def render(self, pose: PatientPose, stride: int = 1, step_mm: float | None = None) -> np.ndarray:
        return self.renderer.render_pixels(self.model(pose), self.rows[::stride], self.cols[::stride],
                                           step_mm=step_mm)

    def cost(self, pose: PatientPose, stride: int = 1, step_mm: float | None = None) -> float:
        """``-metric(fixed, DRR)``; raises DegenerateInput when the DRR is constant."""
        self.evals += 1
        moving = self.render(pose, stride, step_mm)
        fixed = self.fixed.pixels[::stride, ::stride]
        return -similarity(self.cfg.metric, fixed, moving, self.cfg.bins)

    def safe_cost(self, pose: PatientPose, stride: int = 1, step_mm: float | None = None) -> float:
        """As :meth:`cost`, but a constant DRR scores the metric's worst value."""
        try:
            return self.cost(pose, stride, step_mm)
        except DegenerateInput:
            return 1.0 if self.cfg.metric == "cc" else -1.0


def render_fixed(volume: Volume3, cfg: RegistrationConfig, pose: PatientPose,
                 backend: str | None = None) -> Image2:
    """Cropped DRR at ``pose`` as the registration sees it (segmented in mask mode)."""
    return Image2(RegistrationProblem(None, volume, cfg, backend).render(pose))


def objective(fixed: Image2, volume: Volume3, cfg: RegistrationConfig, pose: PatientPose,
              backend: str | None = None) -> float:
    """Full-resolution registration cost of ``pose``."""
    return RegistrationProblem(fixed, volume, cfg, backend).cost(pose)


def grid_scan(problem: RegistrationProblem) -> tuple[PatientPose, float]:
    """Best translation on the initializer grid; ties keep the first point in scan order."""
    cfg = problem.cfg
    n = int(math.floor(cfg.grid_range_mm / cfg.grid_step_mm + 1e-9))
    axis = [k * cfg.grid_step_mm for k in range(-n, n + 1)]
    best, best_cost = IDENTITY_POSE, math.inf
    for tx, ty, tz in itertools.product(axis, axis, axis):
        pose = PatientPose(tx_mm=tx, ty_mm=ty, tz_mm=tz)
        c = problem.safe_cost(pose, cfg.grid_stride, cfg.grid_step_render_mm)
        if c < best_cost:
            best, best_cost = pose, c
    return best, best_cost


def initialize(strategy: str, fixed: Image2, volume: Volume3, cfg: RegistrationConfig,
               problem: RegistrationProblem | None = None) -> PatientPose:
    if strategy == "identity":
        return IDENTITY_POSE
    if strategy == "external":
        if not cfg.init_path:
            raise ValueError("external initializer needs init_path")
        return load_patient_pose(cfg.init_path)
    if strategy == "grid":
        problem = problem or RegistrationProblem(fixed, volume, cfg)
        return grid_scan(problem)[0]
    raise ValueError(f"unknown initializer {strategy!r}; valid options: {', '.join(INITIALIZERS)}")


def register(fixed: Image2, volume: Volume3, cfg: RegistrationConfig,
             backend: str | None = None) -> RegistrationResult:
    """Initialize, then run Powell over the six patient parameters at each pyramid level."""
    t0 = time.perf_counter()
    problem = RegistrationProblem(fixed, volume, cfg, backend)
    init = initialize(cfg.initializer, fixed, volume, cfg, problem)
    init_evals = problem.evals
    # search translations along the detector axes and the beam, so depth
    # (magnification only) is decoupled from in-plane shifts
    basis = cfg.device.rotation if cfg.search_frame == "view" else np.eye(3)

    def to_pose(v):
        v = np.asarray(v, dtype=float)
        return PatientPose.from_array(np.concatenate([v[:3], basis @ v[3:]]))

    x0 = init.as_array()
    v = np.concatenate([x0[:3], basis.T @ x0[3:]])
    trace: list[tuple[list[float], float]] = []
    sweeps, converged = 0, True
    for stride, step in cfg.pyramid:
        res: OptimResult = powell_minimize(
            lambda w, s=stride, st=step: problem.safe_cost(to_pose(w), s, st), v, cfg.optim)
        v = res.x_min
        sweeps += res.iters
        converged = converged and res.converged
        trace += [(to_pose(xi).as_array().tolist(), fi) for xi, fi in res.trace]
    x = to_pose(v).as_array()
    pose = PatientPose.from_array(x)
    opt_evals = problem.evals - init_evals
    final = -problem.cost(pose)
    return RegistrationResult(pose, final, opt_evals, sweeps, time.perf_counter() - t0,
                              converged, init, trace, init_evals)


def with_device(cfg: RegistrationConfig, device: CArmPose) -> RegistrationConfig:
    return replace(cfg, device=device)
