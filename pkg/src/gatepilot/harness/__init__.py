from .config import CameraConfig, RunConfig, default_config
from .episode import Autopilot, EpisodeResult, run_race

__all__ = [
    "CameraConfig",
    "RunConfig",
    "default_config",
    "Autopilot",
    "EpisodeResult",
    "run_race",
]
