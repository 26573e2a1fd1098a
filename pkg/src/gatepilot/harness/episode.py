"""Episode assembly: wires perception, estimation and control into the
scheduler and scores the outcome.

Two maps exist side by side: the truth track drives the plant, the mask
oracle and the referee; the navigation track (optionally perturbed) is all
the autopilot ever sees. Likewise the true camera renders the masks while
the believed camera model interprets them.
"""

from __future__ import annotations

import dataclasses
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from ..control import Controller, ControlParams, Phase
from ..estimation import Estimator
from ..geometry import CameraModel
from ..perception import (
    CornerSet,
    PriorState,
    derotate_mask,
    gate_prior,
    project_gate_corners,
    refine_corners,
    render_mask,
    rerotate_pixel,
    save_mask_pgm,
    snake_gate,
    solve_pnp,
)
from ..simdyn import PlantParams, PlantState, SensorSuite, run_scheduler
from ..simdyn.scheduler import EpisodeTrace
from ..track import TrackMap, perturb_track
from .config import RunConfig, resolve_track

_PHASE_IDS = {p: i for i, p in enumerate(Phase)}


@dataclass
class EpisodeResult:
    finished: bool
    gates_passed: int
    time: float
    mean_speed: float
    max_speed: float
    crash_cause: str | None = None

    def __post_init__(self):
        if self.mean_speed > self.max_speed + 1e-9:
            raise ValueError("mean speed cannot exceed max speed")


class Autopilot:
    """The full onboard stack, stepped by the scheduler's event loop."""

    trace_columns = [
        "est_x",
        "est_y",
        "est_z",
        "est_vx",
        "est_vy",
        "est_vz",
        "est_roll",
        "est_pitch",
        "est_yaw",
        "cmd_p",
        "cmd_q",
        "cmd_r",
        "cmd_thrust",
        "cmd_pitch",
        "cmd_roll",
        "cmd_yaw",
        "v_cmd_x",
        "v_cmd_y",
        "ax_meas",
        "ay_meas",
        "az_meas",
        "pnp_fresh",
        "pnp_x",
        "pnp_y",
        "pnp_z",
        "pnp_yaw",
        "pnp_rms",
        "pnp_n",
        "corr_x",
        "corr_y",
        "corr_vx",
        "corr_vy",
        "corr_psi_pending",
        "mhe_occupancy",
        "phase",
        "target_gate",
        "prior_recoveries",
    ]

    def __init__(
        self,
        config: RunConfig,
        nav_track: TrackMap,
        true_track: TrackMap,
        mhe_seed,
        degradation_seed,
        mask_dir: str | Path | None = None,
    ):
        self.config = config
        self.nav_track = nav_track
        self.true_track = true_track
        self.true_cam: CameraModel = config.camera.true_model()
        self.nav_cam: CameraModel = config.camera.nav_model()
        init_yaw = float(nav_track.podium.attitude.yaw) - config.camera.mount_yaw
        self.estimator = Estimator(
            config.estimator,
            init_position=nav_track.podium.position,
            init_yaw=init_yaw,
            rng=np.random.default_rng(mhe_seed),
        )
        self.controller = Controller(
            config.control, nav_track, config.camera.mount_yaw
        )
        self.prior_state = PriorState()
        self._deg_rng = np.random.default_rng(degradation_seed)
        self._mask_dir = Path(mask_dir) if mask_dir else None
        self._frame_no = 0
        self._last_cmd = None
        self._pnp_fresh = 0
        self._last_pnp = None
        self.pnp_count = 0

    # -- scheduler event handlers -----------------------------------------

    def on_imu(self, ev) -> None:
        accel, gyro = ev.payload
        self.estimator.on_imu(accel, gyro, ev.t)

    def on_laser(self, ev) -> None:
        if ev.payload is not None:
            self.estimator.on_laser(ev.payload)

    def on_camera(self, ev) -> None:
        frame = ev.payload
        mask = render_mask(
            self.true_track,
            frame.body_pose,
            self.true_cam,
            self.config.degradation,
            t=frame.t_capture,
            rng=self._deg_rng,
        )
        if self._mask_dir is not None:
            save_mask_pgm(mask, self._mask_dir / f"frame_{self._frame_no:05d}.pgm")
        self._frame_no += 1

        roll_est = self.estimator.att.roll
        upright = derotate_mask(mask, roll_est)
        detected = refine_corners(upright, snake_gate(upright))
        raw = CornerSet(pixels_touched=detected.pixels_touched)
        for i in range(4):
            if detected.outer[i] is not None:
                raw.outer[i] = rerotate_pixel(detected.outer[i], roll_est)
                raw.valid_outer[i] = True
            if detected.inner[i] is not None:
                raw.inner[i] = rerotate_pixel(detected.inner[i], roll_est)
                raw.valid_inner[i] = True

        idx = min(self.controller.gate_idx, len(self.nav_track.gates) - 1)
        gate = self.nav_track.gates[idx]
        delayed = self.estimator.delayed_pose()
        expected = project_gate_corners(gate, delayed, self.nav_cam)
        validated = gate_prior(raw, expected, self.prior_state, ev.t)

        pnp = solve_pnp(
            validated,
            gate,
            self.estimator.att.attitude,
            self.nav_cam,
            initial_position=delayed.position,
            initial_yaw=delayed.attitude.yaw,
            t=frame.t_capture,
        )
        if pnp is not None:
            self.estimator.on_pnp(pnp)
            self._pnp_fresh = 1
            self._last_pnp = pnp
            self.pnp_count += 1

    def on_est_tick(self, t: float) -> None:
        self.estimator.tick(t)

    def on_control(self, t: float):
        est = self.estimator.estimate()
        cmd = self.controller.tick(t, est, self.estimator.laser_valid, 0.02)
        if self.controller.gate_passed_pulse:
            self.estimator.gate_pass_reset()
        self._last_cmd = cmd
        self._last_est = est
        return cmd

    def trace_row(self) -> list[float]:
        est = self._last_est
        cmd = self._last_cmd
        ctl = self.controller
        pnp = self._last_pnp
        cor = self.estimator.cor
        cx, cy = cor.position_offset(self.estimator.t)
        acc = self.estimator.latest_accel
        row = [
            *est.position,
            *est.velocity,
            est.attitude.roll,
            est.attitude.pitch,
            est.attitude.yaw,
            cmd.p,
            cmd.q,
            cmd.r,
            cmd.thrust,
            ctl.att_cmd.pitch,
            ctl.att_cmd.roll,
            ctl.yaw_cmd,
            ctl.last_v_cmd[0],
            ctl.last_v_cmd[1],
            float(acc[0]),
            float(acc[1]),
            float(acc[2]),
            float(self._pnp_fresh),
            *(list(pnp.position) if pnp else [0.0, 0.0, 0.0]),
            pnp.yaw if pnp else 0.0,
            pnp.rms if pnp else 0.0,
            float(pnp.n_points) if pnp else 0.0,
            cx,
            cy,
            cor.e_vx if cor.engaged else 0.0,
            cor.e_vy if cor.engaged else 0.0,
            self.estimator.pending_epsi,
            float(self.estimator.buffers.occupancy()),
            float(_PHASE_IDS[ctl.phase]),
            float(ctl.gate_idx),
            float(self.prior_state.recovery_count),
        ]
        self._pnp_fresh = 0
        return row


def build_episode(config: RunConfig, mask_dir=None):
    """Construct plant, sensors and autopilot for one seeded episode."""
    truth = resolve_track(config.track)
    pert = config.perturbation
    if pert.position_mag > 0 or pert.yaw_mag > 0:
        nav = perturb_track(truth, pert)
    else:
        nav = truth
    ss = np.random.SeedSequence(config.seed)
    sensor_ss, mhe_ss, deg_ss = ss.spawn(3)
    suite = SensorSuite(config.sensors, sensor_ss)
    plant_params = dataclasses.replace(
        config.plant, podium_z=float(truth.podium.position[2])
    )
    init_yaw = float(truth.podium.attitude.yaw) - config.camera.mount_yaw
    plant = PlantState(
        px=float(truth.podium.position[0]),
        py=float(truth.podium.position[1]),
        pz=float(truth.podium.position[2]),
        yaw=init_yaw,
    )
    pilot = Autopilot(config, nav, truth, mhe_ss, deg_ss, mask_dir=mask_dir)
    return plant, plant_params, suite, pilot, truth


def run_race(
    config: RunConfig,
    trace_path: str | Path | None = None,
    mask_dir: str | Path | None = None,
) -> tuple[EpisodeResult, EpisodeTrace]:
    """One deterministic episode; optionally writes the trace CSV."""
    plant, plant_params, suite, pilot, truth = build_episode(config, mask_dir)
    trace = run_scheduler(
        plant,
        plant_params,
        suite,
        pilot,
        t_end=config.t_end,
        track=truth,
        est_rate=config.estimator.tick_rate,
        control_rate=50.0,
        header=config.to_json(),
        record_events=False,
    )
    if trace.error is not None:
        raise trace.error
    result = summarize(trace, config)
    if trace_path is not None:
        trace.to_csv(trace_path)
    return result, trace


def summarize(trace: EpisodeTrace, config: RunConfig) -> EpisodeResult:
    """Score a trace; speeds are computed from the 50 Hz truth rows."""
    if trace.rows:
        vx = trace.column("true_vx")
        vy = trace.column("true_vy")
        vz = trace.column("true_vz")
        speed = np.sqrt(vx * vx + vy * vy + vz * vz)
        mean_speed = float(speed.mean())
        max_speed = float(speed.max())
    else:
        mean_speed = max_speed = 0.0
    t = trace.finish_time if trace.finished else trace.end_time
    return EpisodeResult(
        finished=trace.finished,
        gates_passed=trace.gates_passed,
        time=float(t),
        mean_speed=mean_speed,
        max_speed=max_speed,
        crash_cause=trace.crash_cause,
    )
