"""Gate-centered guidance and cascaded control.

The outer loop plans a waypoint on the next gate's centerline and converts
position errors into flat-body velocity commands (lateral mixing law plus
a distance/alignment-gated longitudinal speed schedule). The middle loop
maps velocity commands to pitch/roll with a coupled 45-degree bank
saturation and a pitch-for-altitude relief that activates when thrust
saturates. The inner loop emits feed-forward body-rate commands for the
pre-tuned rate controller, plus a thrust PID with hover feedforward scaled
by the inverse cosine of the bank angle.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from enum import Enum

import numpy as np

from .geometry import Attitude, flat_body_from_world, wrap_angle
from .simdyn.plant import CommandSet
from .track import Gate, TrackMap

DEG = math.pi / 180.0


@dataclass(frozen=True)
class GuidanceParams:
    altitude_setpoint: float = 1.75  # m
    standoff: float = 6.0  # m before the gate on its centerline
    capture_radius: float = 7.0  # m, waypoint slide distance
    k_p1: float = 0.45  # 1/s, waypoint lateral gain
    k_p2: float = 0.45  # 1/s, centerline lateral gain
    alpha_center: float = 0.6
    far_speed: float = 7.5  # m/s
    align_speed: float = 5.5  # m/s
    align_corridor: float = 0.8  # m, predicted-crossing radius for full send
    crossing_speed: float = 7.5  # m/s, minimum when blind at the gate
    far_threshold: float = 10.0  # m
    max_speed_sentinel: float = 20.0  # m/s, stands in for "as fast as possible"

    def __post_init__(self):
        if not 0.0 <= self.alpha_center <= 1.0:
            raise ValueError(f"alpha_center must be in [0, 1], got {self.alpha_center}")


@dataclass(frozen=True)
class AttitudeLimits:
    max_bank: float = 45.0 * DEG  # coupled norm limit
    pitch_min: float = -45.0 * DEG  # most nose-down
    pitch_max: float = -14.0 * DEG  # least nose-down (never pitch up)
    rate_limit: float = 320.0 * DEG  # rad/s, per-axis attitude slew
    yaw_rate_limit: float = 180.0 * DEG  # rad/s
    yaw_freeze_dist: float = 2.2  # m, stop aligning below this gate distance

    def __post_init__(self):
        if not self.pitch_min <= self.pitch_max <= 0.0:
            raise ValueError("pitch range must be nose-down and ordered")
        if abs(self.pitch_min) > self.max_bank + 1e-9:
            raise ValueError("pitch range must sit within the bank limit")


@dataclass(frozen=True)
class ThrustParams:
    hover_ff: float = 0.67  # sea level; 0.73 at high density altitude
    t_min: float = 0.15
    t_max: float = 1.0
    err_saturation: float = 2.0  # m
    k_p: float = 0.25
    k_i: float = 0.10
    k_d: float = 0.22

    def __post_init__(self):
        if not self.t_min < self.hover_ff < self.t_max:
            raise ValueError("hover feedforward must sit inside the thrust bounds")


@dataclass(frozen=True)
class ControlFeatures:
    """Cumulative controller configurations S.1 through S.5."""

    coupled_saturation: bool = True  # S.2: 45 deg coupled bank + pitch-for-altitude
    boost: bool = True  # S.3: open-loop full-throttle takeoff + final dash
    centerline: bool = True  # S.4: gate-centerline approach waypoints
    risk_speed: bool = True  # S.5: distance/alignment-gated speed schedule

    @staticmethod
    def stage(n: int) -> "ControlFeatures":
        if not 1 <= n <= 5:
            raise ValueError(f"stage must be 1..5, got {n}")
        return ControlFeatures(
            coupled_saturation=n >= 2,
            boost=n >= 3,
            centerline=n >= 4,
            risk_speed=n >= 5,
        )


SAFE_BANK = 35.0 * DEG  # per-axis limit without coupled saturation


@dataclass(frozen=True)
class BoostParams:
    pitch: float = -45.0 * DEG  # saturating nose-down target
    timeout: float = 1.5  # s, open-loop limit
    k_pfa: float = 8.0 * DEG  # rad per m of altitude deficit under full throttle
    pfa_rate: float = 160.0 * DEG  # rad/s, relief engage/release slew


class Phase(Enum):
    WAIT = "wait"  # on the podium until the altimeter boots (no boost)
    BOOST = "boost"
    RACE = "race"
    FINAL_DASH = "final_dash"
    DONE = "done"
    CRASHED = "crashed"


def plan_waypoint(
    track: TrackMap,
    gate_idx: int,
    position: np.ndarray,
    gp: GuidanceParams,
    use_centerline: bool = True,
) -> np.ndarray:
    """Target point for the position loop, at the cruise altitude.

    With the centerline approach the target sits ``standoff`` meters before
    the gate on its centerline; once the drone is within ``capture_radius``
    of it the target slides along the centerline, held at that radius from
    the drone, until it reaches the gate center.
    """
    g = track.gates[gate_idx]
    z = -gp.altitude_setpoint
    if not use_centerline:
        return np.array([g.center[0], g.center[1], z])
    n = g.normal[:2]
    c = g.center[:2]
    pos = np.asarray(position, dtype=float)[:2]
    w6 = c + gp.standoff * n
    r = gp.capture_radius
    if np.hypot(*(pos - w6)) >= r:
        target = w6
    elif np.hypot(*(pos - c)) <= r:
        target = c
    else:
        b = float((pos - c) @ n)
        disc = b * b - float((pos - c) @ (pos - c)) + r * r
        s = b - math.sqrt(max(disc, 0.0))
        target = c + min(max(s, 0.0), gp.standoff) * n
    return np.array([target[0], target[1], z])


def heading_cmd(
    prev_cmd: float,
    position: np.ndarray,
    gate: Gate,
    cam_yaw_offset: float,
    limits: AttitudeLimits,
    dt: float,
) -> float:
    """Slew-limited yaw command aligning the camera with the gate center.

    Frozen (returns the previous command) once the gate is closer than the
    visibility distance.
    """
    dx = gate.center[0] - position[0]
    dy = gate.center[1] - position[1]
    if math.hypot(dx, dy) < limits.yaw_freeze_dist:
        return prev_cmd
    raw = math.atan2(dy, dx) - cam_yaw_offset
    delta = wrap_angle(raw - prev_cmd)
    lim = limits.yaw_rate_limit * dt
    return prev_cmd + min(max(delta, -lim), lim)


def lateral_cmd(dp_y_wp: float, dp_y_gate: float, gp: GuidanceParams, alpha: float) -> float:
    """Lateral velocity mixing the waypoint error and the centerline error."""
    return (1.0 - alpha) * gp.k_p1 * dp_y_wp + alpha * gp.k_p2 * dp_y_gate


def predicted_crossing_offset(
    position: np.ndarray, velocity: np.ndarray, gate: Gate
) -> float | None:
    """In-plane distance from gate center of the ballistic crossing point.

    Constant-velocity extrapolation onto the gate plane; None when the
    motion does not approach the plane.
    """
    n = gate.normal
    s = float(n @ (np.asarray(position) - gate.center))
    sdot = float(n @ np.asarray(velocity))
    if s <= 0.0 or sdot >= -0.05:
        return None
    t_hit = s / -sdot
    if t_hit > 10.0:
        return None
    q = np.asarray(position) + np.asarray(velocity) * t_hit
    u = float(gate.right @ (q - gate.center))
    w = float(-(q - gate.center)[2])
    return math.hypot(u, w)


def longitudinal_cmd(
    dist: float,
    aligned: bool,
    gate_visible: bool,
    speed_fwd: float,
    gp: GuidanceParams,
    risk_enabled: bool = True,
) -> float:
    """Risk-aware forward speed schedule (constant align speed when disabled)."""
    if not risk_enabled:
        return gp.align_speed
    if dist > gp.far_threshold:
        return gp.far_speed
    if aligned:
        return gp.max_speed_sentinel
    if not gate_visible and speed_fwd < gp.crossing_speed:
        return gp.crossing_speed
    return gp.align_speed


K_FF_VEL = 0.009  # rad per m/s commanded
K_FB_VEL = 0.4  # rad per m/s velocity error


@dataclass
class AttitudeCmdState:
    pitch: float = 0.0
    roll: float = 0.0
    d_pitch: float = 0.0  # last applied per-tick change, feeds the rate feed-forward
    d_roll: float = 0.0


def velocity_to_attitude(
    v_cmd: np.ndarray,
    v_est: np.ndarray,
    limits: AttitudeLimits,
    state: AttitudeCmdState,
    dt: float,
    coupled: bool = True,
    pfa_relief: float = 0.0,
    pitch_override: float | None = None,
) -> AttitudeCmdState:
    """Velocity commands (flat-body x fwd, y right) to pitch/roll commands.

    Feed-forward plus proportional velocity error per axis; pitch clamped
    nose-down, the (pitch, roll) norm bounded at the bank limit preserving
    the ratio (or per-axis at the safe bank when coupling is off), then
    slew-limited per axis. ``pfa_relief`` shifts pitch toward the upper
    bound and shaves the same amount off the roll limit.
    """
    if pitch_override is not None:
        pitch = pitch_override
    else:
        pitch = -(K_FF_VEL * v_cmd[0] + K_FB_VEL * (v_cmd[0] - v_est[0]))
    roll = K_FF_VEL * v_cmd[1] + K_FB_VEL * (v_cmd[1] - v_est[1])

    pitch = min(max(pitch, limits.pitch_min), limits.pitch_max)
    if pfa_relief > 0.0:
        pitch = min(pitch + pfa_relief, limits.pitch_max)
    if coupled:
        max_roll = max(limits.max_bank - pfa_relief, 10.0 * DEG)
        roll = min(max(roll, -max_roll), max_roll)
        norm = math.hypot(pitch, roll)
        if norm > limits.max_bank:
            scale = limits.max_bank / norm
            pitch *= scale
            roll *= scale
    else:
        roll = min(max(roll, -SAFE_BANK), SAFE_BANK)

    lim = limits.rate_limit * dt
    d_pitch = min(max(pitch - state.pitch, -lim), lim)
    d_roll = min(max(roll - state.roll, -lim), lim)
    return AttitudeCmdState(
        pitch=state.pitch + d_pitch,
        roll=state.roll + d_roll,
        d_pitch=d_pitch,
        d_roll=d_roll,
    )


@dataclass
class ThrustPidState:
    integral: float = 0.0  # integrated altitude error, m*s
    saturated_high: bool = False


def thrust_cmd(
    alt_error: float,
    cos_bank: float,
    climb_rate: float,
    tp: ThrustParams,
    state: ThrustPidState,
    dt: float,
) -> tuple[float, ThrustPidState]:
    """Altitude PID with hover feedforward, bank compensation and anti-windup.

    The integrator is frozen on any tick where the output clamp is active.
    """
    e = min(max(alt_error, -tp.err_saturation), tp.err_saturation)
    u = tp.k_p * e + tp.k_i * state.integral - tp.k_d * climb_rate
    cos_bank = max(cos_bank, 0.5)
    raw = (tp.hover_ff + u) / cos_bank
    clamped = min(max(raw, tp.t_min), tp.t_max)
    integral = state.integral
    if raw == clamped:
        integral += e * dt
    return clamped, ThrustPidState(
        integral=integral, saturated_high=clamped >= tp.t_max
    )


def pitch_for_altitude(
    relief: float,
    thrust_saturated: bool,
    alt_error: float,
    boost: BoostParams,
    dt: float,
) -> float:
    """Slewed pitch relief while full throttle cannot hold altitude."""
    target = boost.k_pfa * max(alt_error, 0.0) if thrust_saturated else 0.0
    target = min(target, 30.0 * DEG)
    step = boost.pfa_rate * dt
    return relief + min(max(target - relief, -step), step)


K_P_RATE = 0.12  # attitude error feedback gain


def attitude_to_rates(
    att_cmd: Attitude,
    att_est: Attitude,
    d_theta_cmd: float,
    d_phi_cmd: float,
    dt: float,
    thrust: float = 0.0,
    d_psi_cmd: float = 0.0,
) -> CommandSet:
    """Feed-forward rate commands for the inner loop.

    ``[p, -q, r] = T(phi, theta) [kff*dphi + kp*e_phi, kff*dtheta + kp*e_theta,
    kff*dpsi + kp*e_psi]`` with ``kff = 1/dt`` and T the Euler-rate-to-body-rate
    matrix at the current attitude. The middle row carries the negated pitch
    rate (flight-controller convention). The yaw feed-forward follows the
    slew of the heading command, which is what the 180 deg/s yaw-rate limit
    acts on; with a static heading command the yaw channel reduces to the
    plain ``kp * e_psi`` feedback.
    """
    kff = 1.0 / dt
    e_phi = wrap_angle(att_cmd.roll - att_est.roll)
    e_theta = wrap_angle(att_cmd.pitch - att_est.pitch)
    e_psi = wrap_angle(att_cmd.yaw - att_est.yaw)
    u1 = kff * d_phi_cmd + K_P_RATE * e_phi
    u2 = kff * d_theta_cmd + K_P_RATE * e_theta
    u3 = kff * d_psi_cmd + K_P_RATE * e_psi
    sth, cth = math.sin(att_est.pitch), math.cos(att_est.pitch)
    sph, cph = math.sin(att_est.roll), math.cos(att_est.roll)
    p = u1 - sth * u3
    neg_q = cph * u2 + cth * sph * u3
    r = -sph * u2 + cth * cph * u3
    return CommandSet(p=p, q=-neg_q, r=r, thrust=thrust)


@dataclass(frozen=True)
class ControlParams:
    guidance: GuidanceParams = GuidanceParams()
    limits: AttitudeLimits = AttitudeLimits()
    thrust: ThrustParams = ThrustParams()
    boost: BoostParams = BoostParams()
    features: ControlFeatures = ControlFeatures()

    def __post_init__(self):
        if (
            not self.features.coupled_saturation
            and self.limits.max_bank > SAFE_BANK + 1e-9
        ):
            raise ValueError(
                "bank limits above 35 deg require the coupled saturation feature"
            )


class Controller:
    """50 Hz cascaded controller and flight-phase machine.

    Pure state machine: all timing comes from the tick timestamps. Emits a
    ``gate_passed`` pulse (consumed by the estimator reset) when the
    believed position crosses the active mapped gate.
    """

    def __init__(self, params: ControlParams, track: TrackMap, cam_yaw_offset: float):
        self.params = params
        self.track = track
        self.cam_yaw_offset = cam_yaw_offset
        feats = params.features
        self.phase = Phase.BOOST if feats.boost else Phase.WAIT
        self.gate_idx = 0
        self.att_cmd = AttitudeCmdState()
        self.yaw_cmd = float(track.podium.attitude.yaw) - cam_yaw_offset
        self.pid = ThrustPidState()
        self.pfa_relief = 0.0
        self.prev_est_pos: np.ndarray | None = None
        self.gate_passed_pulse = False
        self.last_v_cmd = np.zeros(2)
        self.last_debug: dict = {}

    def _limits(self) -> AttitudeLimits:
        if self.params.features.coupled_saturation:
            return self.params.limits
        lp = self.params.limits
        return AttitudeLimits(
            max_bank=SAFE_BANK,
            pitch_min=-SAFE_BANK,
            pitch_max=lp.pitch_max,
            rate_limit=lp.rate_limit,
            yaw_rate_limit=lp.yaw_rate_limit,
            yaw_freeze_dist=lp.yaw_freeze_dist,
        )

    def _belief_crossed(self, gate: Gate, p_prev: np.ndarray, p_now: np.ndarray) -> bool:
        n = gate.normal
        s_prev = float(n @ (p_prev - gate.center))
        s_now = float(n @ (p_now - gate.center))
        if not (s_prev > 0.0 >= s_now):
            return False
        t = s_prev / (s_prev - s_now)
        q = p_prev + t * (p_now - p_prev)
        u = float(gate.right @ (q - gate.center))
        w = float(-(q - gate.center)[2])
        half = gate.outer / 2.0
        return abs(u) <= half and abs(w) <= half

    def tick(self, t: float, est, laser_valid: bool, dt: float) -> CommandSet:
        """One control update from the current state estimate."""
        feats = self.params.features
        gp = self.params.guidance
        bp = self.params.boost
        limits = self._limits()
        pos = est.position
        self.gate_passed_pulse = False

        # phase transitions
        if self.phase == Phase.WAIT and laser_valid:
            self.phase = Phase.RACE
        elif self.phase == Phase.BOOST and (laser_valid or t >= bp.timeout):
            self.phase = Phase.RACE
        if self.phase in (Phase.RACE, Phase.FINAL_DASH) and self.prev_est_pos is not None:
            if self.gate_idx < len(self.track.gates) and self._belief_crossed(
                self.track.gates[self.gate_idx], self.prev_est_pos, pos
            ):
                self.gate_passed_pulse = True
                self.gate_idx += 1
                self.phase = Phase.RACE
                if self.gate_idx >= len(self.track.gates):
                    self.phase = Phase.DONE
        self.prev_est_pos = np.array(pos)

        if self.phase == Phase.WAIT:
            self.last_debug = {"phase": self.phase, "v_cmd": (0.0, 0.0)}
            return CommandSet(thrust=self.params.thrust.t_min)

        gate_idx = min(self.gate_idx, len(self.track.gates) - 1)
        gate = self.track.gates[gate_idx]
        to_gate = gate.center[:2] - pos[:2]
        dist = float(np.hypot(*to_gate))
        yaw = est.attitude.yaw
        v_fb = flat_body_from_world(yaw, est.velocity[:2])
        alt = -float(pos[2])
        alt_err = gp.altitude_setpoint - alt

        # guidance
        waypoint = plan_waypoint(self.track, gate_idx, pos, gp, feats.centerline)
        dp_wp = flat_body_from_world(yaw, waypoint[:2] - pos[:2])
        lat_off = (pos[:2] - gate.center[:2]) - (
            float((pos[:2] - gate.center[:2]) @ gate.normal[:2]) * gate.normal[:2]
        )
        dp_gate_y = float(flat_body_from_world(yaw, -lat_off)[1])
        alpha = gp.alpha_center if feats.centerline else 0.0
        off = predicted_crossing_offset(pos, est.velocity, gate)
        aligned = off is not None and off <= gp.align_corridor
        visible = dist >= limits.yaw_freeze_dist

        v_x = longitudinal_cmd(dist, aligned, visible, v_fb[0], gp, feats.risk_speed)
        v_y = lateral_cmd(dp_wp[1], dp_gate_y, gp, alpha)
        self.last_v_cmd = np.array([v_x, v_y])

        # final dash: saturating pitch down just before the last gate
        if (
            feats.boost
            and self.phase == Phase.RACE
            and gate_idx == self.track.finish_index
            and aligned
            and dist < gp.standoff
        ):
            self.phase = Phase.FINAL_DASH

        pitch_override = None
        if self.phase == Phase.BOOST:
            pitch_override = bp.pitch
            v_y = 0.0
        elif self.phase == Phase.FINAL_DASH:
            pitch_override = bp.pitch

        prev_yaw_cmd = self.yaw_cmd
        self.yaw_cmd = heading_cmd(
            self.yaw_cmd, pos, gate, self.cam_yaw_offset, limits, dt
        )
        d_yaw_cmd = wrap_angle(self.yaw_cmd - prev_yaw_cmd)
        self.att_cmd = velocity_to_attitude(
            np.array([v_x, v_y]),
            v_fb,
            limits,
            self.att_cmd,
            dt,
            coupled=feats.coupled_saturation,
            pfa_relief=self.pfa_relief if feats.coupled_saturation else 0.0,
            pitch_override=pitch_override,
        )

        cos_bank = math.cos(est.attitude.roll) * math.cos(est.attitude.pitch)
        if self.phase == Phase.BOOST:
            thrust = 1.0
            self.pid = ThrustPidState(integral=self.pid.integral, saturated_high=True)
        else:
            thrust, self.pid = thrust_cmd(
                alt_err, cos_bank, -float(est.velocity[2]), self.params.thrust, self.pid, dt
            )
        if feats.coupled_saturation:
            self.pfa_relief = pitch_for_altitude(
                self.pfa_relief, self.pid.saturated_high, alt_err, bp, dt
            )

        cmd = attitude_to_rates(
            Attitude(self.att_cmd.roll, self.att_cmd.pitch, self.yaw_cmd),
            est.attitude,
            self.att_cmd.d_pitch,
            self.att_cmd.d_roll,
            dt,
            thrust=thrust,
            d_psi_cmd=d_yaw_cmd,
        )
        self.last_debug = {
            "phase": self.phase,
            "waypoint": waypoint,
            "dist": dist,
            "aligned": aligned,
            "v_cmd": (v_x, v_y),
        }
        return cmd
