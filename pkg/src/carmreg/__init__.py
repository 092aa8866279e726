"""2D/3D C-arm X-ray to CT registration: geometry, DRR rendering, similarity
metrics, Powell optimisation, encoders, dataset generation and evaluation."""

__version__ = "0.1.0"

from ._backend import BACKEND  # noqa: E402
from .drr import DRRRenderer, Image2, RenderConfig, crop_upper, render_drr  # noqa: E402
from .errors import CarmRegError  # noqa: E402
from .geom import CArmPose, DetectorSpec, ProjectionModel, RigidTransform, carm_extrinsics, project_point  # noqa: E402
from .landmarks import LandmarkSet  # noqa: E402
from .metrics import ncc, nmi  # noqa: E402
from .optim import OptimConfig, OptimResult, powell_minimize  # noqa: E402
from .register import PatientPose, RegistrationConfig, RegistrationResult, register  # noqa: E402
from .volume import PhantomSpec, Volume3, load_volume, make_phantom, save_volume  # noqa: E402

__all__ = [
    "BACKEND", "CArmPose", "CarmRegError", "DRRRenderer", "DetectorSpec", "Image2", "LandmarkSet",
    "OptimConfig", "OptimResult", "PatientPose", "PhantomSpec", "ProjectionModel", "RegistrationConfig",
    "RegistrationResult", "RenderConfig", "RigidTransform", "Volume3", "carm_extrinsics", "crop_upper",
    "load_volume", "make_phantom", "ncc", "nmi", "powell_minimize", "project_point", "register",
    "render_drr", "save_volume",
]
