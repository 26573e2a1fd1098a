"""Deterministic single-threaded event scheduler.

All streams (plant integration, sensors, estimator tick, control tick) are
quantized onto a 10 microsecond master grid so that simultaneity is exact
and the interleaving is reproducible: events sharing a grid time are
processed in fixed kind order (plant step, imu, laser, camera, estimator,
control). Identical seeds therefore yield byte-identical traces.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

import numpy as np

from ..track import TrackMap, gate_crossed, panel_hit
from .plant import CommandSet, PlantParams, PlantState, step_plant
from .sensors import SensorSuite

MICRO = 1e-5  # s, master grid resolution

# kind ranks for same-time ordering
_PLANT, _IMU, _LASER, _CAMERA, _EST, _CONTROL = range(6)

TRUTH_COLUMNS = [
    "t",
    "true_x",
    "true_y",
    "true_z",
    "true_vx",
    "true_vy",
    "true_vz",
    "true_roll",
    "true_pitch",
    "true_yaw",
    "thrust_frac",
    "gates_passed",
    "just_passed",
]


@dataclass
class EpisodeTrace:
    columns: list[str]
    rows: list[list[float]] = field(default_factory=list)
    events: list[tuple[str, float]] = field(default_factory=list)
    finished: bool = False
    gates_passed: int = 0
    finish_time: float | None = None
    crash_cause: str | None = None
    end_time: float = 0.0
    mean_speed: float = 0.0
    max_speed: float = 0.0
    header: str = ""
    error: Exception | None = None

    def column(self, name: str) -> np.ndarray:
        idx = self.columns.index(name)
        return np.array([row[idx] for row in self.rows])

    def to_csv(self, path: str | Path) -> None:
        with open(path, "w", newline="") as f:
            for line in self.header.splitlines():
                f.write(f"# {line}\n")
            f.write(",".join(self.columns) + "\n")
            for row in self.rows:
                f.write(",".join(repr(v) for v in row) + "\n")


def _micro(t: float) -> int:
    return round(t / MICRO)


class _Referee:
    """Truth-side scorer: ordered gate crossings, panel strikes, ground contact."""

    def __init__(self, track: TrackMap | None):
        self.track = track
        self.next_gate = 0
        self.just_passed = 0  # 1-based index of gate passed since last trace row
        self.finish_time: float | None = None
        self.crash_cause: str | None = None

    def check(self, prev: PlantState, now: PlantState) -> bool:
        """Returns True when the episode must stop (finish or crash)."""
        if self.track is None:
            return False
        p_prev = np.array([prev.px, prev.py, prev.pz])
        p_now = np.array([now.px, now.py, now.pz])
        for i, g in enumerate(self.track.gates):
            if panel_hit(g, p_prev, p_now):
                self.crash_cause = f"gate_panel:{i}"
                return True
        if self.next_gate < len(self.track.gates):
            g = self.track.gates[self.next_gate]
            if gate_crossed(g, p_prev, p_now):
                self.just_passed = self.next_gate + 1
                self.next_gate += 1
                if self.next_gate > self.track.finish_index:
                    self.finish_time = now.t
                    return True
        if now.airborne and now.altitude <= 0.0 + 1e-9:
            self.crash_cause = "ground"
            return True
        if abs(now.px) > 200.0 or abs(now.py) > 200.0 or now.altitude > 50.0:
            self.crash_cause = "out_of_bounds"
            return True
        return False


def run_scheduler(
    plant: PlantState,
    plant_params: PlantParams,
    suite: SensorSuite,
    pipeline: Any,
    t_end: float,
    track: TrackMap | None = None,
    est_rate: float = 500.0,
    control_rate: float = 50.0,
    header: str = "",
    record_events: bool = True,
) -> EpisodeTrace:
    """Run one deterministic episode and return its trace.

    ``pipeline`` may be None (sensor events only). Otherwise it must provide
    ``on_imu/on_laser/on_camera/on_est_tick/on_control`` handlers plus
    ``trace_columns`` and ``trace_row()``; ``on_control`` returns the next
    :class:`CommandSet`. A pipeline exception aborts the episode and is
    stored on the trace.
    """
    sp = suite.params
    dt = plant_params.dt
    if _micro(dt) * MICRO != dt and abs(_micro(dt) * MICRO - dt) > 1e-12:
        raise ValueError("plant dt must sit on the 10 us master grid")

    columns = list(TRUTH_COLUMNS)
    if pipeline is not None:
        columns += list(pipeline.trace_columns)
    trace = EpisodeTrace(columns=columns, header=header)
    referee = _Referee(track)

    end_u = _micro(t_end)
    plant_du = _micro(dt)
    cam_latency_u = _micro(sp.camera_latency)
    boot_u = _micro(sp.laser_boot_time)

    # per-stream next event, in microticks; counters index the k-th sample
    def stream_next(k: int, rate: float) -> int:
        return round(k * 1e5 / rate)

    k_imu = k_laser = k_cam = k_est = k_ctl = 1
    next_plant = plant_du
    pending_cam: list[tuple[int, Any]] = []  # (delivery_utick, event), FIFO

    cmd = CommandSet()
    speed_accum = 0.0
    speed_time = 0.0
    failed = False

    while True:
        candidates = [(next_plant, _PLANT)]
        if pipeline is not None or record_events:
            candidates.append((stream_next(k_imu, sp.imu_rate), _IMU))
            lz = stream_next(k_laser, sp.laser_rate)
            while lz < boot_u:
                k_laser += 1
                lz = stream_next(k_laser, sp.laser_rate)
            candidates.append((lz, _LASER))
            candidates.append((stream_next(k_cam, sp.camera_rate), _CAMERA))
        if pending_cam:
            candidates.append((pending_cam[0][0], _CAMERA))
        if pipeline is not None:
            candidates.append((stream_next(k_est, est_rate), _EST))
            candidates.append((stream_next(k_ctl, control_rate), _CONTROL))
        t_u, kind = min(candidates)
        if t_u > end_u:
            break
        t_now = t_u * MICRO

        try:
            if kind == _PLANT:
                prev = plant
                plant = step_plant(plant, cmd, dt, plant_params)
                next_plant += plant_du
                sp_now = (plant.vx**2 + plant.vy**2 + plant.vz**2) ** 0.5
                speed_accum += sp_now * dt
                speed_time += dt
                trace.max_speed = max(trace.max_speed, sp_now)
                if referee.check(prev, plant):
                    trace.end_time = plant.t
                    break
            elif kind == _IMU:
                ev = suite.imu_sample(plant, t_now)
                k_imu += 1
                if record_events:
                    trace.events.append((ev.kind, ev.t))
                if pipeline is not None:
                    pipeline.on_imu(ev)
            elif kind == _LASER:
                ev = suite.laser_sample(plant, t_now)
                k_laser += 1
                if record_events:
                    trace.events.append((ev.kind, ev.t))
                if pipeline is not None:
                    pipeline.on_laser(ev)
            elif kind == _CAMERA:
                # capture and delayed delivery share the kind rank; captures
                # are enqueued, deliveries invoke the pipeline
                if pending_cam and pending_cam[0][0] == t_u:
                    _, ev = pending_cam.pop(0)
                    if record_events:
                        trace.events.append((ev.kind, ev.t))
                    if pipeline is not None:
                        pipeline.on_camera(ev)
                else:
                    ev = suite.camera_sample(plant, t_now)
                    k_cam += 1
                    pending_cam.append((t_u + cam_latency_u, ev))
            elif kind == _EST:
                k_est += 1
                pipeline.on_est_tick(t_now)
            elif kind == _CONTROL:
                k_ctl += 1
                cmd = pipeline.on_control(t_now)
                row = [
                    t_now,
                    plant.px,
                    plant.py,
                    plant.pz,
                    plant.vx,
                    plant.vy,
                    plant.vz,
                    plant.roll,
                    plant.pitch,
                    plant.yaw,
                    plant.thrust_frac,
                    float(referee.next_gate),
                    float(referee.just_passed),
                ]
                referee.just_passed = 0
                row.extend(pipeline.trace_row())
                trace.rows.append(row)
        except Exception as exc:  # pipeline failure: keep the partial trace
            trace.crash_cause = f"pipeline_error:{type(exc).__name__}"
            trace.error = exc
            failed = True
            break

    trace.end_time = trace.end_time or min(t_end, plant.t)
    trace.gates_passed = referee.next_gate
    trace.crash_cause = trace.crash_cause or referee.crash_cause
    trace.finished = referee.finish_time is not None and not failed
    trace.finish_time = referee.finish_time
    trace.mean_speed = speed_accum / speed_time if speed_time > 0 else 0.0
    return trace
