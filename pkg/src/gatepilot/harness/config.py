"""Run configuration: one JSON-serializable bundle of every parameter.

The full dump is echoed into each trace header so that any result can be
reproduced from the trace file alone.
"""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path

from ..control import (
    AttitudeLimits,
    BoostParams,
    ControlFeatures,
    ControlParams,
    GuidanceParams,
    ThrustParams,
)
from ..estimation import AltKfParams, DragParams, EstimatorParams, MheParams
from ..geometry import CameraModel
from ..perception import DegradationSpec
from ..simdyn.plant import PlantParams
from ..simdyn.sensors import SensorParams
from ..track import PerturbationSpec, TrackMap, load_track


@dataclass(frozen=True)
class CameraConfig:
    """Nominal camera model plus deliberate model errors for calibration studies.

    ``focal_scale`` scales the focal length the perception stack believes in;
    ``mount_yaw_error`` offsets the true mounting yaw from the believed one.
    """

    focal_px: float = 260.0
    cx: float = 180.0
    cy: float = 180.0
    dist_coeffs: tuple[float, float, float] = (-0.02, -0.002, -0.0002)
    mount_yaw: float = 0.5235987755982988  # +30 deg: right-center camera
    mount_pitch: float = 0.17453292519943295  # +10 deg upward-looking
    focal_scale: float = 1.0
    mount_yaw_error: float = 0.0

    def true_model(self) -> CameraModel:
        return CameraModel(
            focal_px=self.focal_px,
            cx=self.cx,
            cy=self.cy,
            dist_coeffs=tuple(self.dist_coeffs),
            mount_yaw=self.mount_yaw + self.mount_yaw_error,
            mount_pitch=self.mount_pitch,
        )

    def nav_model(self) -> CameraModel:
        return CameraModel(
            focal_px=self.focal_px * self.focal_scale,
            cx=self.cx,
            cy=self.cy,
            dist_coeffs=tuple(self.dist_coeffs),
            mount_yaw=self.mount_yaw,
            mount_pitch=self.mount_pitch,
        )


@dataclass(frozen=True)
class RunConfig:
    track: str = "austin"
    seed: int = 0
    t_end: float = 30.0
    repetitions: int = 10
    perturbation: PerturbationSpec = PerturbationSpec()
    degradation: DegradationSpec = DegradationSpec(blur=5, hole_prob=0.05)
    camera: CameraConfig = CameraConfig()
    plant: PlantParams = PlantParams()
    sensors: SensorParams = SensorParams()
    estimator: EstimatorParams = EstimatorParams()
    control: ControlParams = ControlParams()

    def with_stage(self, n: int) -> "RunConfig":
        """Cumulative controller configuration S.1 .. S.5."""
        feats = ControlFeatures.stage(n)
        limits = self.control.limits
        if not feats.coupled_saturation:
            limits = dataclasses.replace(limits, max_bank=0.6108652381980153)  # 35 deg
        control = dataclasses.replace(self.control, features=feats, limits=limits)
        return dataclasses.replace(self, control=control)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True)

    @staticmethod
    def from_dict(d: dict) -> "RunConfig":
        cam = dict(d.get("camera", {}))
        if "dist_coeffs" in cam:
            cam["dist_coeffs"] = tuple(cam["dist_coeffs"])
        est = dict(d.get("estimator", {}))
        if "drag" in est:
            est["drag"] = DragParams(**est["drag"])
        if "mhe" in est:
            est["mhe"] = MheParams(**est["mhe"])
        if "alt_kf" in est:
            est["alt_kf"] = AltKfParams(**est["alt_kf"])
        ctl = dict(d.get("control", {}))
        for key, cls in (
            ("guidance", GuidanceParams),
            ("limits", AttitudeLimits),
            ("thrust", ThrustParams),
            ("boost", BoostParams),
            ("features", ControlFeatures),
        ):
            if key in ctl:
                ctl[key] = cls(**ctl[key])
        return RunConfig(
            track=d.get("track", "austin"),
            seed=d.get("seed", 0),
            t_end=d.get("t_end", 30.0),
            repetitions=d.get("repetitions", 10),
            perturbation=PerturbationSpec(**d.get("perturbation", {})),
            degradation=DegradationSpec(**d.get("degradation", {})),
            camera=CameraConfig(**cam),
            plant=PlantParams(**d.get("plant", {})),
            sensors=SensorParams(**d.get("sensors", {})),
            estimator=EstimatorParams(**est),
            control=ControlParams(**ctl),
        )

    @staticmethod
    def from_json(s: str) -> "RunConfig":
        return RunConfig.from_dict(json.loads(s))

    @staticmethod
    def load(path: str | Path) -> "RunConfig":
        return RunConfig.from_json(Path(path).read_text())

    def save(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2, sort_keys=True))


def default_config() -> RunConfig:
    return RunConfig()


def resolve_track(name: str) -> TrackMap:
    """Bundled track name ('austin', 'baltimore') or a filesystem path."""
    bundled = resources.files("gatepilot.data")
    candidate = bundled / f"{name}.json"
    if candidate.is_file():
        with resources.as_file(candidate) as p:
            return load_track(p)
    return load_track(name)
