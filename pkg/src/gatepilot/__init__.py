"""gatepilot: a deterministic drone-racing autonomy simulator.

Monocular gate localization (synthetic segmentation, snake-gate corners,
map-prior validation, attitude-assisted PnP), drag-model odometry with
RANSAC moving-horizon corrections, and a risk-aware cascaded controller,
all driven by a reproducible discrete-event scheduler.
"""

from .geometry import Attitude, CameraModel, Pose
from .track import Gate, TrackMap, load_track, perturb_track

__version__ = "0.1.0"

__all__ = [
    "Attitude",
    "CameraModel",
    "Pose",
    "Gate",
    "TrackMap",
    "load_track",
    "perturb_track",
    "__version__",
]
