from .plant import CommandSet, PlantParams, PlantState, step_plant
from .sensors import SensorEvent, SensorParams, SensorSuite
from .scheduler import EpisodeTrace, run_scheduler

__all__ = [
    "CommandSet",
    "PlantParams",
    "PlantState",
    "step_plant",
    "SensorEvent",
    "SensorParams",
    "SensorSuite",
    "EpisodeTrace",
    "run_scheduler",
]
