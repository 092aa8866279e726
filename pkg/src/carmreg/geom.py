"""Rigid transforms and the isocentric C-arm projection model.

Coordinate conventions
----------------------
CT coordinates are millimetres with axes x (patient lateral), y
(cranio-caudal, cranial towards -y) and z (antero-posterior). World
coordinates are the CT frame translated so that the isocenter sits at the
origin. With all three gantry angles at zero the source lies on -z, the beam
travels along +z and the detector u/v axes are world +x/+y, so detector row 0
is the cranial edge.

Gantry rotation is ``R = Rz(gamma) @ Rx(beta) @ Ry(alpha)``.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import BehindSource, FormatError, InvalidPose

POSE_KEYS = ("alpha_deg", "beta_deg", "gamma_deg", "sid_mm", "ssd_mm",
             "iso_x_mm", "iso_y_mm", "iso_z_mm")


def _rx(deg):
    c, s = math.cos(math.radians(deg)), math.sin(math.radians(deg))
    return np.array([[1.0, 0.0, 0.0], [0.0, c, -s], [0.0, s, c]])


def _ry(deg):
    c, s = math.cos(math.radians(deg)), math.sin(math.radians(deg))
    return np.array([[c, 0.0, s], [0.0, 1.0, 0.0], [-s, 0.0, c]])


def _rz(deg):
    c, s = math.cos(math.radians(deg)), math.sin(math.radians(deg))
    return np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])


def euler_to_rotation(rx_deg: float, ry_deg: float, rz_deg: float) -> np.ndarray:
    """Rotation matrix ``Rz(rz) @ Rx(rx) @ Ry(ry)`` from angles in degrees."""
    return _rz(rz_deg) @ _rx(rx_deg) @ _ry(ry_deg)


def rotation_to_euler(rot: np.ndarray) -> tuple[float, float, float]:
    """Inverse of :func:`euler_to_rotation`, returning ``(rx, ry, rz)`` in degrees.

    The x angle is taken in [-90, 90]; near |rx| = 90 the split between the
    y and z angles is ill-conditioned.
    """
    rot = np.asarray(rot, dtype=float)
    rx = math.asin(max(-1.0, min(1.0, rot[2, 1])))
    ry = math.atan2(-rot[2, 0], rot[2, 2])
    rz = math.atan2(-rot[0, 1], rot[1, 1])
    return math.degrees(rx), math.degrees(ry), math.degrees(rz)


@dataclass(frozen=True)
class RigidTransform:
    """``p -> rotation @ p + translation``."""

    rotation: np.ndarray = field(default_factory=lambda: np.eye(3))
    translation: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self):
        rot = np.array(self.rotation, dtype=float).reshape(3, 3)
        trans = np.array(self.translation, dtype=float).reshape(3)
        if not (np.all(np.isfinite(rot)) and np.all(np.isfinite(trans))):
            raise ValueError("non-finite rigid transform")
        if (np.abs(rot @ rot.T - np.eye(3)).max() > 1e-9
                or abs(np.linalg.det(rot) - 1.0) > 1e-9):
            raise ValueError("rotation is not orthonormal with det +1")
        rot.flags.writeable = False
        trans.flags.writeable = False
        object.__setattr__(self, "rotation", rot)
        object.__setattr__(self, "translation", trans)

    @classmethod
    def from_translation(cls, t) -> RigidTransform:
        return cls(np.eye(3), np.asarray(t, dtype=float))

    @classmethod
    def from_matrix(cls, m: np.ndarray) -> RigidTransform:
        m = np.asarray(m, dtype=float)
        return cls(m[:3, :3], m[:3, 3])

    def matrix(self) -> np.ndarray:
        m = np.eye(4)
        m[:3, :3] = self.rotation
        m[:3, 3] = self.translation
        return m

    def apply(self, points) -> np.ndarray:
        """Transform one point (3,) or many (N, 3)."""
        p = np.asarray(points, dtype=float)
        return p @ self.rotation.T + self.translation

    def apply_vector(self, vectors) -> np.ndarray:
        return np.asarray(vectors, dtype=float) @ self.rotation.T

    def __matmul__(self, other: RigidTransform) -> RigidTransform:
        return compose(self, other)


IDENTITY = RigidTransform()


def compose(a: RigidTransform, b: RigidTransform) -> RigidTransform:
    """``a ∘ b``: apply ``b`` first, then ``a``."""
    return RigidTransform(a.rotation @ b.rotation, a.rotation @ b.translation + a.translation)


def invert(a: RigidTransform) -> RigidTransform:
    rt = a.rotation.T
    return RigidTransform(rt, -(rt @ a.translation))


@dataclass(frozen=True)
class CArmPose:
    """The five device parameters plus the isocenter in CT coordinates."""

    alpha_deg: float = 0.0
    beta_deg: float = 0.0
    gamma_deg: float = 0.0
    sid_mm: float = 1000.0
    ssd_mm: float = 750.0
    isocenter_mm: tuple[float, float, float] = (0.0, 0.0, 0.0)

    def __post_init__(self):
        iso = tuple(float(v) for v in self.isocenter_mm)
        if len(iso) != 3:
            raise InvalidPose("isocenter must have three coordinates")
        object.__setattr__(self, "isocenter_mm", iso)
        vals = (self.alpha_deg, self.beta_deg, self.gamma_deg, self.sid_mm, self.ssd_mm) + iso
        if not all(math.isfinite(v) for v in vals):
            raise InvalidPose("pose parameters must be finite")
        if not self.ssd_mm > 0:
            raise InvalidPose(f"ssd must be positive, got {self.ssd_mm}")
        if not self.sid_mm > self.ssd_mm:
            raise InvalidPose(f"sid ({self.sid_mm}) must exceed ssd ({self.ssd_mm})")

    @property
    def rotation(self) -> np.ndarray:
        return euler_to_rotation(self.beta_deg, self.alpha_deg, self.gamma_deg)

    def to_record(self) -> dict:
        return {
            "alpha_deg": self.alpha_deg, "beta_deg": self.beta_deg, "gamma_deg": self.gamma_deg,
            "sid_mm": self.sid_mm, "ssd_mm": self.ssd_mm,
            "iso_x_mm": self.isocenter_mm[0], "iso_y_mm": self.isocenter_mm[1],
            "iso_z_mm": self.isocenter_mm[2],
        }

    @classmethod
    def from_record(cls, rec: dict) -> CArmPose:
        missing = [k for k in POSE_KEYS if k not in rec]
        if missing:
            raise FormatError(f"pose record missing keys: {', '.join(missing)}")
        try:
            v = {k: float(rec[k]) for k in POSE_KEYS}
        except (TypeError, ValueError) as exc:
            raise FormatError(f"non-numeric pose value: {exc}") from None
        return cls(v["alpha_deg"], v["beta_deg"], v["gamma_deg"], v["sid_mm"], v["ssd_mm"],
                   (v["iso_x_mm"], v["iso_y_mm"], v["iso_z_mm"]))


def read_json_record(path) -> dict:
    try:
        rec = json.loads(Path(path).read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise FormatError(f"{path}: invalid JSON ({exc})") from None
    if not isinstance(rec, dict):
        raise FormatError(f"{path}: expected a JSON object")
    return rec


def load_pose(path) -> CArmPose:
    return CArmPose.from_record(read_json_record(path))


def save_pose(pose: CArmPose, path, **extra) -> None:
    rec = pose.to_record()
    rec.update(extra)
    Path(path).write_text(json.dumps(rec, indent=2) + "\n", encoding="utf-8")


@dataclass(frozen=True)
class DetectorSpec:
    """Flat-panel detector. Pixel ``(col, row)`` covers ``[col, col+1) x [row, row+1)``
    in pixel coordinates; the central ray hits ``principal_point_px``."""

    width_px: int = 512
    height_px: int = 512
    pitch_mm: float = 0.5
    principal_point_px: tuple[float, float] | None = None

    def __post_init__(self):
        if int(self.width_px) != self.width_px or int(self.height_px) != self.height_px \
                or self.width_px <= 0 or self.height_px <= 0:
            raise ValueError("detector dims must be positive integers")
        if not self.pitch_mm > 0:
            raise ValueError("detector pitch must be positive")
        pp = self.principal_point_px
        if pp is None:
            pp = (self.width_px / 2.0, self.height_px / 2.0)
        pp = (float(pp[0]), float(pp[1]))
        if not (0 <= pp[0] < self.width_px and 0 <= pp[1] < self.height_px):
            raise ValueError(f"principal point {pp} outside the detector")
        object.__setattr__(self, "principal_point_px", pp)


@dataclass(frozen=True)
class ProjectionModel:
    """Derived geometry for one C-arm pose.

    ``detector_origin_mm`` is the world position of pixel coordinate (0, 0);
    a pixel coordinate ``(u, v)`` sits at
    ``detector_origin_mm + pitch * (u * detector_u_axis + v * detector_v_axis)``.
    """

    source_mm: np.ndarray
    detector_origin_mm: np.ndarray
    detector_u_axis: np.ndarray
    detector_v_axis: np.ndarray
    world_from_ct: RigidTransform
    detector: DetectorSpec
    sid_mm: float

    @property
    def view_direction(self) -> np.ndarray:
        d = np.cross(self.detector_u_axis, self.detector_v_axis)
        return d / np.linalg.norm(d)

    @property
    def detector_center_mm(self) -> np.ndarray:
        cu, cv = self.detector.principal_point_px
        p = self.detector.pitch_mm
        return self.detector_origin_mm + p * (cu * self.detector_u_axis + cv * self.detector_v_axis)

    def with_world_from_ct(self, world_from_ct: RigidTransform) -> ProjectionModel:
        return ProjectionModel(self.source_mm, self.detector_origin_mm, self.detector_u_axis,
                               self.detector_v_axis, world_from_ct, self.detector, self.sid_mm)


def carm_extrinsics(pose: CArmPose, detector: DetectorSpec | None = None) -> ProjectionModel:
    """Projection model of ``pose``: gantry rotated about the isocenter at the world origin."""
    if detector is None:
        detector = DetectorSpec()
    if not pose.sid_mm > pose.ssd_mm:
        raise InvalidPose(f"sid ({pose.sid_mm}) must exceed ssd ({pose.ssd_mm})")
    rot = pose.rotation
    source = rot @ np.array([0.0, 0.0, -pose.ssd_mm])
    center = rot @ np.array([0.0, 0.0, pose.sid_mm - pose.ssd_mm])
    u_axis = rot @ np.array([1.0, 0.0, 0.0])
    v_axis = rot @ np.array([0.0, 1.0, 0.0])
    cu, cv = detector.principal_point_px
    origin = center - detector.pitch_mm * (cu * u_axis + cv * v_axis)
    world_from_ct = RigidTransform.from_translation(-np.asarray(pose.isocenter_mm))
    return ProjectionModel(source, origin, u_axis, v_axis, world_from_ct, detector, pose.sid_mm)


def project_points(model: ProjectionModel, points_ct) -> np.ndarray:
    """Vectorised :func:`project_point` for (N, 3) CT points -> (N, 2) pixel coordinates."""
    pts = np.atleast_2d(np.asarray(points_ct, dtype=float))
    w = model.world_from_ct.apply(pts)
    n = model.view_direction
    rel = w - model.source_mm
    depth = rel @ n
    if np.any(~(depth > 0)):
        raise BehindSource("point lies at or behind the source plane")
    hit = model.source_mm + rel * (model.sid_mm / depth)[:, None]
    off = hit - model.detector_origin_mm
    pitch = model.detector.pitch_mm
    return np.stack([off @ model.detector_u_axis / pitch, off @ model.detector_v_axis / pitch], axis=1)


def project_point(model: ProjectionModel, p_ct) -> np.ndarray:
    """Pixel coordinates ``(u, v)`` where the ray source -> ``p_ct`` meets the detector."""
    return project_points(model, np.asarray(p_ct, dtype=float).reshape(1, 3))[0]
