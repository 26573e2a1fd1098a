"""Asynchronous sensor models: IMU, laser rangefinder, camera snapshots.

Each stream runs on its own phase-locked clock. The camera stream delivers
the true body pose (for the downstream mask oracle) after a fixed pipeline
latency; the laser is silent until its boot time has elapsed. Noise and
per-episode biases come from dedicated seeded generators so that episodes
are bit-reproducible.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Any

import numpy as np

from ..geometry import G, Attitude, Pose
from .plant import PlantState

IMU = "imu"
LASER = "laser"
CAMERA = "camera"


@dataclass(frozen=True)
class SensorEvent:
    kind: str
    t: float  # delivery timestamp, s
    payload: Any


@dataclass(frozen=True)
class CameraFrame:
    """Payload of a camera event: truth snapshot taken at ``t_capture``."""

    t_capture: float
    body_pose: Pose


@dataclass(frozen=True)
class SensorParams:
    imu_rate: float = 430.0
    accel_sigma: float = 1.5  # m/s^2
    accel_bias_mag: float = 0.5  # m/s^2, per-axis uniform bound, drawn per episode
    gyro_sigma: float = 0.02  # rad/s
    gyro_bias_mag: float = 0.01  # rad/s
    accel_clip: float = 24.0 * G
    gyro_clip: float = 34.5  # rad/s
    laser_rate: float = 120.0
    laser_boot_time: float = 1.5  # s, no readings before this
    laser_sigma: float = 0.02  # m
    laser_min: float = 1.0  # m
    laser_max: float = 40.0  # m
    camera_rate: float = 60.0
    camera_latency: float = 0.04  # s, fixed perception-pipeline delay


class SensorSuite:
    """Samples the plant truth into noisy, clipped sensor readings."""

    def __init__(self, params: SensorParams, seed_seq: np.random.SeedSequence | int = 0):
        self.params = params
        if not isinstance(seed_seq, np.random.SeedSequence):
            seed_seq = np.random.SeedSequence(seed_seq)
        imu_ss, laser_ss, bias_ss = seed_seq.spawn(3)
        self._imu_rng = np.random.default_rng(imu_ss)
        self._laser_rng = np.random.default_rng(laser_ss)
        bias_rng = np.random.default_rng(bias_ss)
        self.accel_bias = bias_rng.uniform(
            -params.accel_bias_mag, params.accel_bias_mag, size=3
        )
        self.gyro_bias = bias_rng.uniform(
            -params.gyro_bias_mag, params.gyro_bias_mag, size=3
        )

    def imu_sample(self, s: PlantState, t: float) -> SensorEvent:
        """Specific force and body rates in the body frame, biased and clipped."""
        p = self.params
        cr, sr = math.cos(s.roll), math.sin(s.roll)
        cp, sp = math.cos(s.pitch), math.sin(s.pitch)
        cy, sy = math.cos(s.yaw), math.sin(s.yaw)
        # f_B = R_WB^T (a_W - g_W)
        fx_w, fy_w, fz_w = s.ax, s.ay, s.az - G
        fx = cy * cp * fx_w + sy * cp * fy_w - sp * fz_w
        fy = (
            (cy * sp * sr - sy * cr) * fx_w
            + (sy * sp * sr + cy * cr) * fy_w
            + cp * sr * fz_w
        )
        fz = (
            (cy * sp * cr + sy * sr) * fx_w
            + (sy * sp * cr - cy * sr) * fy_w
            + cp * cr * fz_w
        )
        accel = np.array([fx, fy, fz]) + self.accel_bias
        gyro = np.array([s.p, s.q, s.r]) + self.gyro_bias
        if p.accel_sigma > 0:
            accel = accel + self._imu_rng.normal(0.0, p.accel_sigma, size=3)
        if p.gyro_sigma > 0:
            gyro = gyro + self._imu_rng.normal(0.0, p.gyro_sigma, size=3)
        accel = np.clip(accel, -p.accel_clip, p.accel_clip)
        gyro = np.clip(gyro, -p.gyro_clip, p.gyro_clip)
        return SensorEvent(IMU, t, (accel, gyro))

    def laser_sample(self, s: PlantState, t: float) -> SensorEvent:
        """Downward range along body z; payload None when out of range."""
        p = self.params
        tilt = math.cos(s.roll) * math.cos(s.pitch)
        if tilt <= 0.05:
            return SensorEvent(LASER, t, None)
        rng_true = s.altitude / tilt
        reading = rng_true
        if p.laser_sigma > 0:
            reading += float(self._laser_rng.normal(0.0, p.laser_sigma))
        if not p.laser_min <= reading <= p.laser_max:
            return SensorEvent(LASER, t, None)
        return SensorEvent(LASER, t, reading)

    def camera_sample(self, s: PlantState, t: float) -> SensorEvent:
        pose = Pose(
            position=np.array([s.px, s.py, s.pz]),
            attitude=Attitude(s.roll, s.pitch, s.yaw),
        )
        return SensorEvent(
            CAMERA, t + self.params.camera_latency, CameraFrame(t_capture=t, body_pose=pose)
        )
