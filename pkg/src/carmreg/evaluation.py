"""Registration accuracy: target registration error, gross failures, rotation
error split about the beam, and the benchmark report."""

from __future__ import annotations

import json
import math
import statistics
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np

from .dataset import ParamRanges, sample_pose
from .errors import EmptyInput
from .geom import ProjectionModel, carm_extrinsics
from .landmarks import LandmarkSet
from .register import PatientPose, RegistrationConfig, register, render_fixed
from .volume import Volume3

GFR_THRESHOLD_MM = 10.0
DYNAMIC_ALLOWANCE_MM = 2.95
ACCEPTANCE_LIMIT_MM = 10.0
DEFAULT_METHODS = ("cc", "nmi", "grid+cc", "grid+nmi")

__all__ = ["LandmarkSet", "tre", "mtre", "gfr", "rot_error", "clinically_acceptable",
           "PerturbationSpec", "MethodReport", "EvalReport", "run_benchmark", "format_table",
           "write_report", "parse_method"]


def tre(landmarks: LandmarkSet, pose_est: PatientPose, pose_gt: PatientPose,
        center_mm=(0.0, 0.0, 0.0)) -> np.ndarray:
    """Per-landmark 3D distance (mm) between the two posed landmark sets."""
    landmarks.require_nonempty()
    a = pose_est.transform(center_mm).apply(landmarks.points_mm)
    b = pose_gt.transform(center_mm).apply(landmarks.points_mm)
    return np.linalg.norm(a - b, axis=1)


def mtre(landmarks: LandmarkSet, pose_est: PatientPose, pose_gt: PatientPose,
         center_mm=(0.0, 0.0, 0.0)) -> float:
    return float(np.mean(tre(landmarks, pose_est, pose_gt, center_mm)))


def gfr(tres, threshold_mm: float = GFR_THRESHOLD_MM) -> float:
    """Fraction of cases with TRE strictly above ``threshold_mm``."""
    v = np.asarray(list(tres), dtype=float)
    if v.size == 0:
        raise EmptyInput("gfr needs at least one case")
    return int(np.count_nonzero(v > threshold_mm)) / v.size


def clinically_acceptable(mtre_mm: float, allowance_mm: float = DYNAMIC_ALLOWANCE_MM,
                          limit_mm: float = ACCEPTANCE_LIMIT_MM) -> bool:
    """True iff the error plus the dynamic allowance stays under the vessel-opening limit."""
    return mtre_mm + allowance_mm < limit_mm


def _quaternion(rot: np.ndarray) -> np.ndarray:
    """Unit quaternion (w, x, y, z) with w >= 0."""
    m = np.asarray(rot, dtype=float)
    tr = np.trace(m)
    if tr > 0:
        s = 2.0 * math.sqrt(tr + 1.0)
        q = [0.25 * s, (m[2, 1] - m[1, 2]) / s, (m[0, 2] - m[2, 0]) / s, (m[1, 0] - m[0, 1]) / s]
    else:
        i = int(np.argmax(np.diag(m)))
        j, k = (i + 1) % 3, (i + 2) % 3
        s = 2.0 * math.sqrt(max(1.0 + m[i, i] - m[j, j] - m[k, k], 0.0))
        q = [0.0] * 4
        q[0] = (m[k, j] - m[j, k]) / s
        q[1 + i] = 0.25 * s
        q[1 + j] = (m[j, i] + m[i, j]) / s
        q[1 + k] = (m[k, i] + m[i, k]) / s
    q = np.asarray(q)
    q /= np.linalg.norm(q)
    return q if q[0] >= 0 else -q


def rot_error(pose_est: PatientPose, pose_gt: PatientPose, model: ProjectionModel) -> tuple[float, float]:
    """(in-plane, out-of-plane) degrees of ``R_est @ R_gt.T``.

    Twist about the viewing axis is the in-plane part; the angle of the
    remaining swing is the out-of-plane part.
    """
    rel = pose_est.rotation @ pose_gt.rotation.T
    n = model.world_from_ct.rotation.T @ model.view_direction
    q = _quaternion(rel)
    w, v = q[0], q[1:]
    proj = float(v @ n)
    in_plane = 2.0 * math.atan2(abs(proj), w)
    # swing = q * twist^-1 has scalar part |(w, proj)| and vector norm |v - proj n|
    out_plane = 2.0 * math.atan2(float(np.linalg.norm(v - proj * n)), math.hypot(w, proj))
    return math.degrees(in_plane), math.degrees(out_plane)


@dataclass(frozen=True)
class PerturbationSpec:
    """Ground-truth patient poses drawn uniformly within ``±rot_deg`` and ``±trans_mm``."""

    rot_deg: float = 5.0
    trans_mm: float = 10.0

    def sample(self, rng: np.random.Generator) -> PatientPose:
        r = rng.uniform(-self.rot_deg, self.rot_deg, 3) if self.rot_deg > 0 else np.zeros(3)
        t = rng.uniform(-self.trans_mm, self.trans_mm, 3) if self.trans_mm > 0 else np.zeros(3)
        return PatientPose(*r, *t)


def parse_method(name: str) -> tuple[str, str]:
    """``"grid+cc"`` -> ``("grid", "cc")``; a bare metric uses the identity start."""
    init, _, metric = name.rpartition("+")
    init = init or "identity"
    RegistrationConfig(metric=metric, initializer=init, init_path="-" if init == "external" else None)
    return init, metric


@dataclass
class MethodReport:
    method: str
    trials: list[dict] = field(default_factory=list)

    @property
    def tres(self) -> list[float]:
        return [t["mtre_mm"] for t in self.trials]

    def summary(self, gfr_threshold: float = GFR_THRESHOLD_MM) -> dict:
        tres = self.tres
        times = [t["reg_time_s"] for t in self.trials]
        return {
            "method": self.method,
            "n": len(tres),
            "mtre_mm": float(np.mean(tres)),
            "median_tre_mm": float(statistics.median(tres)),
            "max_tre_mm": float(max(tres)),
            "gfr": gfr(tres, gfr_threshold),
            "rot_in_plane_deg": float(np.mean([t["rot_in_plane_deg"] for t in self.trials])),
            "rot_out_plane_deg": float(np.mean([t["rot_out_plane_deg"] for t in self.trials])),
            "reg_time_mean_s": float(np.mean(times)),
            "reg_time_median_s": float(statistics.median(times)),
            "reg_time_max_s": float(max(times)),
            "acceptable_fraction": float(np.mean([t["clinically_acceptable"] for t in self.trials])),
            "median_evals": float(statistics.median(t["evals"] for t in self.trials)),
        }


@dataclass
class EvalReport:
    methods: dict[str, MethodReport]
    config: dict = field(default_factory=dict)
    gfr_threshold_mm: float = GFR_THRESHOLD_MM

    def to_json(self) -> dict:
        return {
            "config": self.config,
            "gfr_threshold_mm": self.gfr_threshold_mm,
            "summary": [m.summary(self.gfr_threshold_mm) for m in self.methods.values()],
            "trials": {k: m.trials for k, m in self.methods.items()},
        }


def format_table(report: EvalReport) -> str:
    """Aligned text table: one row per method, columns mTRE / GFR / Reg.time / Rot.error."""
    head = ("Method", "mTRE (mm)", "GFR (%)", "Reg.time (s)", "Rot.error (deg)")
    rows = [head]
    for m in report.methods.values():
        s = m.summary(report.gfr_threshold_mm)
        rows.append((s["method"], f"{s['mtre_mm']:.2f}", f"{100 * s['gfr']:.1f}",
                     f"{s['reg_time_mean_s']:.1f}", f"{s['rot_out_plane_deg']:.2f}"))
    widths = [max(len(r[i]) for r in rows) for i in range(len(head))]
    lines = ["  ".join(c.ljust(w) if i == 0 else c.rjust(w) for i, (c, w) in enumerate(zip(r, widths)))
             for r in rows]
    lines.insert(1, "  ".join("-" * w for w in widths))
    return "\n".join(lines) + "\n"


def write_report(report: EvalReport, out_dir) -> tuple[Path, Path]:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    jp, tp = out / "report.json", out / "report.txt"
    jp.write_text(json.dumps(report.to_json(), indent=2) + "\n", encoding="utf-8")
    tp.write_text(format_table(report), encoding="utf-8")
    return jp, tp


def run_benchmark(volume: Volume3, landmarks: LandmarkSet, perturbation: PerturbationSpec,
                  cfg: RegistrationConfig, n_trials: int, seed: int,
                  methods=DEFAULT_METHODS, ranges: ParamRanges | None = None,
                  external_dir=None, progress=None) -> EvalReport:
    """Seeded trials: sample a device pose and a ground-truth patient pose,
    render the fixed image, then register with each method.

    ``external`` methods read ``external_dir/trial_XXX.json``. ``progress`` is
    called with each finished trial record.
    """
    landmarks.require_nonempty()
    if n_trials < 1:
        raise EmptyInput("n_trials must be >= 1")
    ranges = (ranges or ParamRanges())
    if ranges.isocenter_mm is None:
        ranges = ranges.with_volume_box(volume)
    parsed = {m: parse_method(m) for m in methods}
    reports = {m: MethodReport(m) for m in methods}
    for i in range(n_trials):
        rng = np.random.default_rng(np.random.SeedSequence([int(seed), i]))
        device = sample_pose(ranges, rng)
        gt = perturbation.sample(rng)
        base = replace(cfg, device=device, initializer="identity", init_path=None)
        fixed = None
        for m, (init, metric) in parsed.items():
            path = None
            if init == "external":
                path = str(Path(external_dir) / f"trial_{i:03d}.json") if external_dir else None
            mcfg = replace(base, metric=metric, initializer=init, init_path=path)
            if fixed is None:
                fixed = render_fixed(volume, mcfg, gt)
            res = register(fixed, volume, mcfg)
            iso = device.isocenter_mm
            err = mtre(landmarks, res.pose, gt, iso)
            rin, rout = rot_error(res.pose, gt, carm_extrinsics(device, cfg.detector))
            rec = {
                "trial": i, "method": m, "device": device.to_record(),
                "gt": gt.to_record(), "est": res.pose.to_record(),
                "init": res.initial_pose.to_record(),
                "mtre_mm": err, "rot_in_plane_deg": rin, "rot_out_plane_deg": rout,
                "reg_time_s": res.wall_time_s, "evals": res.evals, "init_evals": res.init_evals,
                "sweeps": res.sweeps,
                "converged": res.converged, "similarity_final": res.similarity_final,
                "clinically_acceptable": clinically_acceptable(err),
            }
            reports[m].trials.append(rec)
            if progress is not None:
                progress(rec)
    config = {"perturbation": asdict(perturbation), "n_trials": n_trials, "seed": seed,
              "methods": list(methods), "ranges": ranges.to_record(),
              "pyramid": [list(p) for p in cfg.pyramid], "mask_mode": cfg.mask_mode}
    return EvalReport(reports, config)

