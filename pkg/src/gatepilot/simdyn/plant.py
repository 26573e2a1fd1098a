"""6-DoF quadrotor plant with a first-order inner rate loop.

The plant is the simulation truth: its drag coefficients are deliberately
distinct from the estimator's fitted values to emulate the reality gap.
State is kept in plain floats because this is the innermost loop of the
simulator (one step per millisecond of simulated time).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace

from ..geometry import G


@dataclass(frozen=True)
class CommandSet:
    """Rate commands plus thrust fraction, as sent to the inner loop at 50 Hz.

    The pitch-rate channel ``q`` uses the flight-controller sign convention
    (opposite the aerodynamic body rate); the plant negates it internally.
    """

    p: float = 0.0
    q: float = 0.0
    r: float = 0.0
    thrust: float = 0.0

    def __post_init__(self):
        if not 0.0 <= self.thrust <= 1.0:
            raise ValueError(f"thrust fraction must be in [0, 1], got {self.thrust}")


@dataclass(frozen=True)
class PlantParams:
    hover_thrust: float = 0.67  # fraction that hovers at sea level
    tau_rate: float = 0.05  # s, inner rate-loop lag
    tau_thrust: float = 0.02  # s, motor thrust lag
    drag_x: float = -0.55  # 1/s, true flat-body drag (negative)
    drag_y: float = -0.55
    drag_z: float = 0.0
    podium_z: float = -1.0  # m, start platform top (z-down)
    crash_altitude: float = 0.05  # m, ground-contact threshold once airborne
    dt: float = 1e-3  # s, integration step

    @property
    def max_thrust_accel(self) -> float:
        return G / self.hover_thrust


@dataclass
class PlantState:
    """Truth state: position/velocity (world, z-down), ZYX attitude, body rates."""

    px: float = 0.0
    py: float = 0.0
    pz: float = 0.0
    vx: float = 0.0
    vy: float = 0.0
    vz: float = 0.0
    roll: float = 0.0
    pitch: float = 0.0
    yaw: float = 0.0
    p: float = 0.0
    q: float = 0.0
    r: float = 0.0
    thrust_frac: float = 0.0
    t: float = 0.0
    airborne: bool = False
    # last-step world acceleration, for the accelerometer model
    ax: float = 0.0
    ay: float = 0.0
    az: float = 0.0

    @property
    def altitude(self) -> float:
        return -self.pz

    def copy(self) -> "PlantState":
        return replace(self)


def step_plant(s: PlantState, cmd: CommandSet, dt: float, params: PlantParams) -> PlantState:
    """Semi-implicit Euler step: rates -> attitude -> forces -> velocity -> position."""
    if not 0.0 < dt <= 5e-3:
        raise ValueError(f"dt must be in (0, 5 ms], got {dt}")

    out = s.copy()

    # Inner loop: body rates and motor thrust track commands through
    # first-order lags (exact exponential decay, stable for any dt).
    k_rate = 1.0 - math.exp(-dt / params.tau_rate)
    k_thr = 1.0 - math.exp(-dt / params.tau_thrust)
    q_cmd_aero = -cmd.q  # flight-controller convention carries -q
    out.p = s.p + (cmd.p - s.p) * k_rate
    out.q = s.q + (q_cmd_aero - s.q) * k_rate
    out.r = s.r + (cmd.r - s.r) * k_rate
    out.thrust_frac = s.thrust_frac + (cmd.thrust - s.thrust_frac) * k_thr

    # Attitude kinematics (ZYX Euler rates from the new body rates).
    cr, sr = math.cos(s.roll), math.sin(s.roll)
    cp = math.cos(s.pitch)
    tp = math.tan(s.pitch)
    out.roll = s.roll + (out.p + sr * tp * out.q + cr * tp * out.r) * dt
    out.pitch = s.pitch + (cr * out.q - sr * out.r) * dt
    out.yaw = s.yaw + ((sr * out.q + cr * out.r) / cp) * dt

    # Specific forces with the new attitude: thrust along body -z, gravity,
    # linear drag diagonal in the flat-body frame (plant-truth coefficients).
    cr, sr = math.cos(out.roll), math.sin(out.roll)
    cp, sp = math.cos(out.pitch), math.sin(out.pitch)
    cy, sy = math.cos(out.yaw), math.sin(out.yaw)
    thrust = out.thrust_frac * params.max_thrust_accel
    # third column of R_world_from_body times -thrust
    tx = -(cy * sp * cr + sy * sr) * thrust
    ty = -(sy * sp * cr - cy * sr) * thrust
    tz = -(cp * cr) * thrust

    vfx = cy * s.vx + sy * s.vy
    vfy = -sy * s.vx + cy * s.vy
    dfx = params.drag_x * vfx
    dfy = params.drag_y * vfy
    dx = cy * dfx - sy * dfy
    dy = sy * dfx + cy * dfy

    out.ax = tx + dx
    out.ay = ty + dy
    out.az = tz + G + params.drag_z * s.vz

    out.vx = s.vx + out.ax * dt
    out.vy = s.vy + out.ay * dt
    out.vz = s.vz + out.az * dt
    out.px = s.px + out.vx * dt
    out.py = s.py + out.vy * dt
    out.pz = s.pz + out.vz * dt
    out.t = s.t + dt

    # Podium support until takeoff: clamp at platform height, no crash.
    if not out.airborne:
        if out.pz > params.podium_z:
            out.pz = params.podium_z
            out.vz = 0.0
        if out.pz < params.podium_z - 0.2:
            out.airborne = True
    return out


def hover_command(params: PlantParams) -> CommandSet:
    return CommandSet(thrust=params.hover_thrust)
