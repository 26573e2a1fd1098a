"""Track map: gates, start podium, perturbations, and crossing checks.

Track files are JSON with a ``schema`` field (see ``docs/track-format.md``):
``gates`` is an ordered array of ``{x, y, z, yaw, outer, inner}`` and
``podium`` is ``{x, y, z, yaw}``. Gate ``yaw`` is the direction of the
front-panel normal, pointing toward the approaching drone; a forward
crossing travels from the positive-normal side to the negative side.
"""

from __future__ import annotations

import copy
import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .geometry import Attitude, Pose

TRACK_SCHEMA = "gatepilot-track-v1"


class TrackError(ValueError):
    """Raised for unparsable or invariant-violating track files."""


@dataclass
class Gate:
    center: np.ndarray  # world, m
    yaw: float  # rad, front-panel normal direction
    outer: float = 3.0  # m, outer square side
    inner: float = 2.4  # m, inner square side

    def __post_init__(self):
        self.center = np.asarray(self.center, dtype=float)
        if not (0.0 < self.inner < self.outer):
            raise TrackError(
                f"gate inner side must satisfy 0 < inner < outer, "
                f"got inner={self.inner} outer={self.outer}"
            )

    @property
    def normal(self) -> np.ndarray:
        return np.array([math.cos(self.yaw), math.sin(self.yaw), 0.0])

    @property
    def right(self) -> np.ndarray:
        """In-plane horizontal axis, to the right as seen from the approach side."""
        return np.array([math.sin(self.yaw), -math.cos(self.yaw), 0.0])


@dataclass
class TrackMap:
    gates: list[Gate]
    podium: Pose
    finish_index: int = -1

    def __post_init__(self):
        if not self.gates:
            raise TrackError("track must contain at least one gate")
        if self.finish_index < 0:
            self.finish_index = len(self.gates) - 1
        if not 0 <= self.finish_index < len(self.gates):
            raise TrackError(f"finish gate index {self.finish_index} out of range")

    def path_length(self) -> float:
        """Podium-to-finish cumulative straight-line distance through the gates."""
        pts = [self.podium.position] + [g.center for g in self.gates]
        return float(
            sum(np.linalg.norm(b - a) for a, b in zip(pts[:-1], pts[1:]))
        )


@dataclass(frozen=True)
class PerturbationSpec:
    position_mag: float = 0.0  # m, uniform per-axis
    yaw_mag: float = 0.0  # rad, uniform
    seed: int = 0

    def __post_init__(self):
        if self.position_mag < 0 or self.yaw_mag < 0:
            raise ValueError("perturbation magnitudes must be >= 0")


def load_track(path: str | Path) -> TrackMap:
    """Load and validate a track file; errors name the offending gate."""
    path = Path(path)
    try:
        raw = json.loads(path.read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise TrackError(f"cannot parse track file {path}: {exc}") from exc
    if raw.get("schema") != TRACK_SCHEMA:
        raise TrackError(
            f"{path}: unsupported schema {raw.get('schema')!r}, expected {TRACK_SCHEMA!r}"
        )
    gates = []
    for i, g in enumerate(raw.get("gates", [])):
        try:
            gates.append(
                Gate(
                    center=np.array([g["x"], g["y"], g["z"]], dtype=float),
                    yaw=float(g["yaw"]),
                    outer=float(g.get("outer", 3.0)),
                    inner=float(g.get("inner", 2.4)),
                )
            )
        except (KeyError, TrackError, TypeError, ValueError) as exc:
            raise TrackError(f"{path}: gate {i}: {exc}") from exc
    pod = raw.get("podium", {})
    try:
        podium = Pose(
            position=np.array([pod["x"], pod["y"], pod["z"]], dtype=float),
            attitude=Attitude(yaw=float(pod["yaw"])),
        )
    except (KeyError, TypeError, ValueError) as exc:
        raise TrackError(f"{path}: podium: {exc}") from exc
    return TrackMap(gates=gates, podium=podium, finish_index=raw.get("finish", -1))


def save_track(track: TrackMap, path: str | Path) -> None:
    out = {
        "schema": TRACK_SCHEMA,
        "gates": [
            {
                "x": g.center[0],
                "y": g.center[1],
                "z": g.center[2],
                "yaw": g.yaw,
                "outer": g.outer,
                "inner": g.inner,
            }
            for g in track.gates
        ],
        "podium": {
            "x": track.podium.position[0],
            "y": track.podium.position[1],
            "z": track.podium.position[2],
            "yaw": track.podium.attitude.yaw,
        },
        "finish": track.finish_index,
    }
    Path(path).write_text(json.dumps(out, indent=2))


def perturb_track(track: TrackMap, spec: PerturbationSpec) -> TrackMap:
    """Displace every gate by i.i.d. uniform per-axis offsets and yaw.

    Deterministic for a given seed; the input map is left untouched.
    """
    rng = np.random.default_rng(spec.seed)
    out = copy.deepcopy(track)
    for g in out.gates:
        g.center = g.center + rng.uniform(
            -spec.position_mag, spec.position_mag, size=3
        )
        g.yaw = g.yaw + float(rng.uniform(-spec.yaw_mag, spec.yaw_mag))
    return out


def gate_corner_points(g: Gate) -> np.ndarray:
    """The 8 front-panel corners: 4 outer then 4 inner, TL/TR/BR/BL.

    Order is as seen from the approach side (looking along the negative
    gate normal, world-up being -z).
    """
    right = g.right
    up = np.array([0.0, 0.0, -1.0])
    corners = []
    for half in (g.outer / 2.0, g.inner / 2.0):
        corners.extend(
            [
                g.center - half * right + half * up,  # TL
                g.center + half * right + half * up,  # TR
                g.center + half * right - half * up,  # BR
                g.center - half * right - half * up,  # BL
            ]
        )
    return np.array(corners)


def _plane_hit(g: Gate, p_prev: np.ndarray, p_now: np.ndarray):
    """Signed distances and in-plane intersection of a segment with the gate plane."""
    n = g.normal
    s_prev = float(n @ (p_prev - g.center))
    s_now = float(n @ (p_now - g.center))
    if s_prev == s_now:
        return s_prev, s_now, None, None
    t = s_prev / (s_prev - s_now)
    if not 0.0 <= t <= 1.0:
        return s_prev, s_now, None, None
    q = p_prev + t * (p_now - p_prev)
    u = float(g.right @ (q - g.center))  # horizontal, +right
    w = float(-(q - g.center)[2])  # vertical, +up
    return s_prev, s_now, u, w


def gate_crossed(g: Gate, p_prev: np.ndarray, p_now: np.ndarray) -> bool:
    """True iff the segment crosses the gate plane forward through the inner square."""
    s_prev, s_now, u, w = _plane_hit(g, p_prev, p_now)
    if u is None or not (s_prev > 0.0 >= s_now):
        return False
    half = g.inner / 2.0
    return abs(u) <= half and abs(w) <= half


def panel_hit(g: Gate, p_prev: np.ndarray, p_now: np.ndarray) -> bool:
    """True iff the segment pierces the solid front panel (either direction)."""
    s_prev, s_now, u, w = _plane_hit(g, p_prev, p_now)
    if u is None or (s_prev > 0.0) == (s_now > 0.0):
        return False
    half_o = g.outer / 2.0
    half_i = g.inner / 2.0
    inside_outer = abs(u) <= half_o and abs(w) <= half_o
    inside_inner = abs(u) <= half_i and abs(w) <= half_i
    return inside_outer and not inside_inner
