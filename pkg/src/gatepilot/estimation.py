"""State estimation: attitude filter, drag/alpha odometry, altitude Kalman
filter, and per-axis RANSAC moving-horizon corrections.

The lateral odometry integrates a blend of two acceleration sources: the
flat-body linear drag model (a function of estimated velocity and yaw) and
the body accelerometer channels, mixed by the ``alpha`` weight. The
accelerometer z channel always contributes the thrust term. Vision fixes
arrive as delayed PnP measurements; residuals against the matching delayed
prediction are fitted per axis (x, y, yaw) with a ridge least squares
inside a RANSAC loop. Position/velocity corrections apply continuously,
the yaw correction is banked and applied once at each gate pass, when the
prediction is rebased and the buffers are cleared.
"""

from __future__ import annotations

import math
from collections import deque
from dataclasses import dataclass, field

import numpy as np

from .geometry import (
    G,
    Attitude,
    Pose,
    euler_rate_matrix,
    flat_body_from_world,
    rot_world_from_body,
    world_from_flat_body,
    wrap_angle,
)


@dataclass(frozen=True)
class DragParams:
    d_x: float = -0.495  # 1/s, fitted lateral drag (negative: opposes velocity)
    d_y: float = -0.495

    def __post_init__(self):
        if self.d_x > 0 or self.d_y > 0:
            raise ValueError(f"drag parameters must be <= 0, got ({self.d_x}, {self.d_y})")


@dataclass
class EstimatorState:
    position: np.ndarray
    velocity: np.ndarray
    attitude: Attitude
    yaw_correction_pending: float = 0.0
    alpha: float = 0.85

    def __post_init__(self):
        if not 0.0 <= self.alpha <= 1.0:
            raise ValueError(f"alpha must be in [0, 1], got {self.alpha}")


class AttitudeFilter:
    """Complementary filter: gyro integration with a slow gravity blend.

    ``k_acc`` is the per-update blend weight toward the accelerometer
    gravity direction (roll/pitch only; yaw is gyro-integrated). The
    default 0.002 at the IMU rate gives a time constant near one second.
    The blend only engages while the specific-force magnitude is close to
    1 g: under heavy thrust or in deep turns the accelerometer points
    along the thrust axis, not gravity, and would drag the estimate away.
    """

    GATE_LO = 0.7  # fraction of g
    GATE_HI = 1.35

    def __init__(self, k_acc: float = 0.002, init: Attitude = Attitude()):
        self.k_acc = k_acc
        self.roll = init.roll
        self.pitch = init.pitch
        self.yaw = init.yaw

    @property
    def attitude(self) -> Attitude:
        return Attitude(self.roll, self.pitch, self.yaw)

    def update(self, gyro: np.ndarray, accel: np.ndarray, dt: float) -> Attitude:
        if dt <= 0:
            raise ValueError("dt must be positive")
        rates = euler_rate_matrix(self.roll, self.pitch) @ np.asarray(gyro, dtype=float)
        self.roll += rates[0] * dt
        self.pitch += rates[1] * dt
        self.yaw += rates[2] * dt
        fx, fy, fz = accel
        norm = math.sqrt(fx * fx + fy * fy + fz * fz)
        # zero vector (or any non-gravity-like magnitude): pure gyro fallback
        if self.GATE_LO * G < norm < self.GATE_HI * G:
            roll_acc = math.atan2(-fy, -fz)
            pitch_acc = math.atan2(fx, math.hypot(fy, fz))
            self.roll += self.k_acc * wrap_angle(roll_acc - self.roll)
            self.pitch += self.k_acc * wrap_angle(pitch_acc - self.pitch)
        return self.attitude


def drag_accel(yaw: float, v_world: np.ndarray, d: DragParams) -> np.ndarray:
    """Flat-body drag acceleration: diag(d) @ R_fb<-W @ v_xy."""
    v_fb = flat_body_from_world(yaw, v_world)
    return np.array([d.d_x * v_fb[0], d.d_y * v_fb[1]])


def fused_accel(s: EstimatorState, f_body: np.ndarray, d: DragParams) -> np.ndarray:
    """World acceleration from the alpha blend of drag model and accelerometer.

    ``alpha * R_W<-fb [a_fb, 0] + (1 - alpha) * R_W<-B [ax, ay, 0]_m
    + [0, 0, g] + R_W<-B [0, 0, az]_m``; at alpha=1 the lateral channels
    are accelerometer-free, at alpha=0 this is plain accelerometer odometry.
    """
    att = s.attitude
    a_fb = drag_accel(att.yaw, s.velocity[:2], d)
    lat_model = world_from_flat_body(att.yaw, a_fb)
    r_wb = rot_world_from_body(att)
    fx, fy, fz = f_body
    lat_meas = r_wb @ np.array([fx, fy, 0.0])
    thrust_term = r_wb @ np.array([0.0, 0.0, fz])
    a = s.alpha * np.array([lat_model[0], lat_model[1], 0.0])
    a += (1.0 - s.alpha) * lat_meas
    a += np.array([0.0, 0.0, G]) + thrust_term
    return a


def propagate(s: EstimatorState, a_world: np.ndarray, dt: float) -> EstimatorState:
    """Semi-implicit integration step at the estimator tick."""
    v = s.velocity + np.asarray(a_world) * dt
    p = s.position + v * dt
    return EstimatorState(
        position=p,
        velocity=v,
        attitude=s.attitude,
        yaw_correction_pending=s.yaw_correction_pending,
        alpha=s.alpha,
    )


@dataclass(frozen=True)
class AltKfParams:
    accel_cutoff_hz: float = 6.0
    laser_cutoff_hz: float = 50.0
    q_accel: float = 0.6  # m/s^2, process noise on acceleration
    r_laser: float = 0.0025  # m^2, corrected-range measurement variance


class AltitudeKf:
    """Constant-velocity Kalman filter on (altitude, climb rate).

    Prediction integrates the low-pass filtered upward acceleration;
    corrections use the attitude-corrected, lightly smoothed laser range.
    """

    def __init__(self, init_alt: float = 0.0, params: AltKfParams = AltKfParams()):
        self.params = params
        self.h = init_alt
        self.vh = 0.0
        self.cov = np.array([[1.0, 0.0], [0.0, 1.0]])
        self._lp_a = 0.0
        self._lp_r: float | None = None
        self.laser_valid = False

    def predict(self, accel_z_world: float, dt: float) -> None:
        tau = 1.0 / (2.0 * math.pi * self.params.accel_cutoff_hz)
        k = dt / (tau + dt)
        a_up = -accel_z_world  # z-down world: upward acceleration
        self._lp_a += k * (a_up - self._lp_a)
        self.h += self.vh * dt + 0.5 * self._lp_a * dt * dt
        self.vh += self._lp_a * dt
        q = self.params.q_accel**2
        qm = np.array(
            [[0.25 * dt**4, 0.5 * dt**3], [0.5 * dt**3, dt**2]]
        ) * q
        f = np.array([[1.0, dt], [0.0, 1.0]])
        self.cov = f @ self.cov @ f.T + qm

    def correct(self, laser_range: float, att: Attitude, dt_laser: float) -> None:
        meas = laser_range * math.cos(att.roll) * math.cos(att.pitch)
        tau = 1.0 / (2.0 * math.pi * self.params.laser_cutoff_hz)
        k = dt_laser / (tau + dt_laser)
        if self._lp_r is None:
            self._lp_r = meas
        else:
            self._lp_r += k * (meas - self._lp_r)
        s = self.cov[0, 0] + self.params.r_laser
        kx = self.cov[0, 0] / s
        kv = self.cov[1, 0] / s
        innov = self._lp_r - self.h
        self.h += kx * innov
        self.vh += kv * innov
        khr = np.array([[1.0 - kx, 0.0], [-kv, 1.0]])
        self.cov = khr @ self.cov
        self.cov = 0.5 * (self.cov + self.cov.T)
        self.laser_valid = True


def altitude_update(
    kf: AltitudeKf,
    laser_range: float | None,
    accel_z_world: float,
    att: Attitude,
    dt: float,
    dt_laser: float = 1.0 / 120.0,
) -> float:
    """Predict, then correct when a laser reading is present."""
    kf.predict(accel_z_world, dt)
    if laser_range is not None:
        kf.correct(laser_range, att, dt_laser)
    return kf.h


@dataclass(frozen=True)
class MheParams:
    capacity: int = 180
    max_age: float = 2.0  # s
    delay_ticks: int = 20  # camera latency at the estimator tick rate
    iterations: int = 200
    sample_frac: float = 0.8
    ridge: float = 1.0  # prior weight, in normalized design-matrix units
    tau_pos: float = 0.5  # m, inlier threshold
    tau_yaw: float = 0.05  # rad
    min_samples: int = 27  # samples required after a reset before corrections engage


class AxisBuffer:
    """Time-ordered residual samples for one corrected axis."""

    def __init__(self, capacity: int, max_age: float):
        self.capacity = capacity
        self.max_age = max_age
        self.ts: deque[float] = deque()
        self.ys: deque[float] = deque()

    def __len__(self) -> int:
        return len(self.ts)

    def add(self, t: float, y: float) -> None:
        self.ts.append(t)
        self.ys.append(y)
        while len(self.ts) > self.capacity:
            self.ts.popleft()
            self.ys.popleft()

    def prune(self, now: float) -> None:
        while self.ts and now - self.ts[0] > self.max_age:
            self.ts.popleft()
            self.ys.popleft()

    def clear(self) -> None:
        self.ts.clear()
        self.ys.clear()


def ransac_ridge_fit(
    ts: np.ndarray,
    ys: np.ndarray,
    rng: np.random.Generator,
    params: MheParams,
    tau: float,
) -> tuple[float, float] | None:
    """Fit ``y = e_p + e_v * dt`` with ridge least squares under RANSAC.

    ``dt`` is measured from the newest sample. Each iteration fits on a
    random ``sample_frac`` subset; consensus is the inlier count at
    threshold ``tau`` over all samples; the winner is refitted on its
    inliers. The ridge term is scaled by the mean-square design entry so
    the prior is expressed in normalized units.
    """
    n = len(ys)
    if n < 2:
        return None
    dts = ts - ts[-1]
    design = np.column_stack([np.ones(n), dts])
    rho2 = float(np.mean(design**2))
    ridge = params.ridge * rho2

    def solve(mask: np.ndarray) -> tuple[float, float] | None:
        cnt = mask.sum(axis=-1)
        st = mask @ dts
        stt = mask @ (dts * dts)
        sy = mask @ ys
        sty = mask @ (dts * ys)
        a11 = cnt + ridge
        a12 = st
        a22 = stt + ridge
        det = a11 * a22 - a12 * a12
        bad = np.abs(det) < 1e-12
        det = np.where(bad, 1.0, det)
        ep = (a22 * sy - a12 * sty) / det
        ev = (a11 * sty - a12 * sy) / det
        return ep, ev, bad

    m = max(2, int(round(params.sample_frac * n)))
    if m >= n:
        subsets = np.ones((1, n), dtype=float)
    else:
        order = rng.random((params.iterations, n)).argsort(axis=1)
        subsets = np.zeros((params.iterations, n), dtype=float)
        np.put_along_axis(subsets, order[:, :m], 1.0, axis=1)
    ep, ev, bad = solve(subsets)
    resid = np.abs(ys[None, :] - ep[:, None] - ev[:, None] * dts[None, :])
    inlier = resid < tau
    counts = np.where(bad, -1, inlier.sum(axis=1))
    best = int(np.argmax(counts))
    if counts[best] < 2:
        return None
    best_mask = inlier[best].astype(float)
    ep_f, ev_f, bad_f = solve(best_mask[None, :])
    if bad_f[0]:
        return None
    return float(ep_f[0]), float(ev_f[0])


@dataclass
class MheCorrections:
    t_ref: float = 0.0
    e_px: float = 0.0
    e_vx: float = 0.0
    e_py: float = 0.0
    e_vy: float = 0.0
    e_psi: float = 0.0
    engaged: bool = False

    def position_offset(self, t: float) -> tuple[float, float]:
        if not self.engaged:
            return 0.0, 0.0
        dt = t - self.t_ref
        return self.e_px + self.e_vx * dt, self.e_py + self.e_vy * dt


class MheBuffers:
    """Per-axis (x, y, yaw) residual buffers with the post-reset sample gate."""

    def __init__(self, params: MheParams):
        self.params = params
        self.x = AxisBuffer(params.capacity, params.max_age)
        self.y = AxisBuffer(params.capacity, params.max_age)
        self.psi = AxisBuffer(params.capacity, params.max_age)
        self.count_since_reset = 0

    def add(self, t: float, rx: float, ry: float, rpsi: float) -> None:
        self.x.add(t, rx)
        self.y.add(t, ry)
        self.psi.add(t, rpsi)
        self.count_since_reset += 1

    def prune(self, now: float) -> None:
        self.x.prune(now)
        self.y.prune(now)
        self.psi.prune(now)

    def clear(self) -> None:
        self.x.clear()
        self.y.clear()
        self.psi.clear()
        self.count_since_reset = 0

    def occupancy(self) -> int:
        return len(self.x)


def mhe_update(
    buffers: MheBuffers, rng: np.random.Generator, now: float
) -> MheCorrections | None:
    """Solve all three axes; None while the post-reset gate is closed."""
    p = buffers.params
    buffers.prune(now)
    if buffers.count_since_reset < p.min_samples or len(buffers.x) < 2:
        return None
    fx = ransac_ridge_fit(
        np.array(buffers.x.ts), np.array(buffers.x.ys), rng, p, p.tau_pos
    )
    fy = ransac_ridge_fit(
        np.array(buffers.y.ts), np.array(buffers.y.ys), rng, p, p.tau_pos
    )
    fpsi = ransac_ridge_fit(
        np.array(buffers.psi.ts), np.array(buffers.psi.ys), rng, p, p.tau_yaw
    )
    if fx is None or fy is None:
        return None
    cor = MheCorrections(
        t_ref=buffers.x.ts[-1],
        e_px=fx[0],
        e_vx=fx[1],
        e_py=fy[0],
        e_vy=fy[1],
        e_psi=fpsi[0] if fpsi is not None else 0.0,
        engaged=True,
    )
    return cor


@dataclass(frozen=True)
class EstimatorParams:
    tick_rate: float = 500.0
    alpha: float = 0.85
    drag: DragParams = DragParams()
    k_acc: float = 0.002
    mhe: MheParams = MheParams()
    alt_kf: AltKfParams = AltKfParams()
    pnp_rms_reject: float = 25.0  # px


class Estimator:
    """Single state machine combining all estimation stages.

    The raw prediction (drag/alpha odometry) integrates untouched between
    gate passes; MHE corrections ride on top of it and are folded into the
    prediction only at :meth:`gate_pass_reset`.
    """

    def __init__(
        self,
        params: EstimatorParams,
        init_position: np.ndarray,
        init_yaw: float,
        rng: np.random.Generator,
    ):
        self.params = params
        self.rng = rng
        self.att = AttitudeFilter(params.k_acc, Attitude(yaw=init_yaw))
        self.alt_kf = AltitudeKf(init_alt=-float(init_position[2]), params=params.alt_kf)
        self.pred_x = float(init_position[0])
        self.pred_y = float(init_position[1])
        self.vx = 0.0
        self.vy = 0.0
        self.buffers = MheBuffers(params.mhe)
        self.cor = MheCorrections()
        self.pending_epsi = 0.0
        self.yaw_corrections_applied = 0
        self.latest_accel = np.array([0.0, 0.0, -G])
        self.last_imu_t: float | None = None
        # per-tick history for delay compensation: (t, pred_x, pred_y, yaw)
        self.history: deque[tuple[float, float, float, float]] = deque(maxlen=1200)
        self.t = 0.0
        self.last_pnp: object | None = None
        self.pnp_accepted = 0

    # -- event handlers -------------------------------------------------

    def on_imu(self, accel: np.ndarray, gyro: np.ndarray, t: float) -> None:
        dt = 1.0 / 430.0 if self.last_imu_t is None else max(t - self.last_imu_t, 1e-4)
        self.last_imu_t = t
        self.att.update(gyro, accel, dt)
        self.latest_accel = accel

    def on_laser(self, laser_range: float, dt_laser: float = 1.0 / 120.0) -> None:
        self.alt_kf.correct(laser_range, self.att.attitude, dt_laser)

    def tick(self, t: float) -> None:
        dt = 1.0 / self.params.tick_rate
        self.t = t
        s = EstimatorState(
            position=np.array([self.pred_x, self.pred_y, -self.alt_kf.h]),
            velocity=np.array([self.vx, self.vy, -self.alt_kf.vh]),
            attitude=self.att.attitude,
            alpha=self.params.alpha,
        )
        a = fused_accel(s, self.latest_accel, self.params.drag)
        self.vx += a[0] * dt
        self.vy += a[1] * dt
        self.pred_x += self.vx * dt
        self.pred_y += self.vy * dt
        self.alt_kf.predict(a[2], dt)
        self.history.append((t, self.pred_x, self.pred_y, self.att.yaw))

    def on_pnp(self, pnp) -> None:
        """Buffer a vision fix against the delay-matched prediction."""
        if pnp.rms > self.params.pnp_rms_reject:
            return
        k = self.params.mhe.delay_ticks
        if len(self.history) <= k:
            return
        _, hx, hy, hpsi = self.history[-1 - k]
        self.buffers.add(
            pnp.t,
            float(pnp.position[0]) - hx,
            float(pnp.position[1]) - hy,
            wrap_angle(pnp.yaw - hpsi),
        )
        self.pnp_accepted += 1
        self.last_pnp = pnp
        cor = mhe_update(self.buffers, self.rng, self.t)
        if cor is not None:
            self.cor = cor
            self.pending_epsi = cor.e_psi

    def gate_pass_reset(self) -> None:
        """Fold corrections into the prediction, apply banked yaw, clear buffers."""
        cx, cy = self.cor.position_offset(self.t)
        self.pred_x += cx
        self.pred_y += cy
        if self.cor.engaged:
            self.vx += self.cor.e_vx
            self.vy += self.cor.e_vy
        self.att.yaw += self.pending_epsi
        self.yaw_corrections_applied += 1
        self.pending_epsi = 0.0
        self.cor = MheCorrections()
        self.buffers.clear()
        self.history.clear()

    # -- outputs ---------------------------------------------------------

    def estimate(self) -> EstimatorState:
        cx, cy = self.cor.position_offset(self.t)
        evx = self.cor.e_vx if self.cor.engaged else 0.0
        evy = self.cor.e_vy if self.cor.engaged else 0.0
        return EstimatorState(
            position=np.array([self.pred_x + cx, self.pred_y + cy, -self.alt_kf.h]),
            velocity=np.array([self.vx + evx, self.vy + evy, -self.alt_kf.vh]),
            attitude=self.att.attitude,
            yaw_correction_pending=self.pending_epsi,
            alpha=self.params.alpha,
        )

    @property
    def laser_valid(self) -> bool:
        return self.alt_kf.laser_valid

    def delayed_pose(self) -> Pose:
        """Best estimate of the pose one camera latency ago (delay-matched)."""
        k = self.params.mhe.delay_ticks
        if len(self.history) > k:
            t, hx, hy, hpsi = self.history[-1 - k]
        elif self.history:
            t, hx, hy, hpsi = self.history[0]
        else:
            t, hx, hy, hpsi = self.t, self.pred_x, self.pred_y, self.att.yaw
        cx, cy = self.cor.position_offset(t)
        return Pose(
            position=np.array([hx + cx, hy + cy, -self.alt_kf.h]),
            attitude=Attitude(self.att.roll, self.att.pitch, hpsi),
        )


@dataclass
class DragFitLog:
    """Columns extracted from an episode trace for drag identification."""

    t: np.ndarray
    roll: np.ndarray
    pitch: np.ndarray
    yaw: np.ndarray
    az: np.ndarray  # body-z specific force measurement
    gate_pass: np.ndarray  # 1-based gate index at pass rows, else 0
    start_xy: np.ndarray


def _integrate_drag_path(log: DragFitLog, d: DragParams) -> np.ndarray:
    """xy positions of the drag-only (alpha=1) odometry over a log."""
    n = len(log.t)
    # thrust tilt term R_WB (0,0,az), xy part; independent of the drag parameters
    cr, sr = np.cos(log.roll), np.sin(log.roll)
    cp, sp = np.cos(log.pitch), np.sin(log.pitch)
    cy, sy = np.cos(log.yaw), np.sin(log.yaw)
    thrust_x = (cy * sp * cr + sy * sr) * log.az
    thrust_y = (sy * sp * cr - cy * sr) * log.az
    pos = np.empty((n, 2))
    px, py = float(log.start_xy[0]), float(log.start_xy[1])
    vx = vy = 0.0
    pos[0] = (px, py)
    for k in range(1, n):
        dt = log.t[k] - log.t[k - 1]
        c, s = cy[k], sy[k]
        vfx = c * vx + s * vy
        vfy = -s * vx + c * vy
        afx = d.d_x * vfx
        afy = d.d_y * vfy
        ax = c * afx - s * afy + thrust_x[k]
        ay = s * afx + c * afy + thrust_y[k]
        vx += ax * dt
        vy += ay * dt
        px += vx * dt
        py += vy * dt
        pos[k] = (px, py)
    return pos


def _golden_min(fn, lo: float, hi: float, tol: float) -> float:
    phi = (math.sqrt(5.0) - 1.0) / 2.0
    a, b = lo, hi
    c = b - phi * (b - a)
    d = a + phi * (b - a)
    fc, fd = fn(c), fn(d)
    while abs(b - a) > tol:
        if fc < fd:
            b, d, fd = d, c, fc
            c = b - phi * (b - a)
            fc = fn(c)
        else:
            a, c, fc = c, d, fd
            d = a + phi * (b - a)
            fd = fn(d)
    return 0.5 * (a + b)


def fit_drag(
    logs: list[DragFitLog],
    track,
    initial: DragParams = DragParams(-0.4, -0.4),
    bounds: tuple[float, float] = (-3.0, -0.02),
    tol: float = 1e-3,
) -> tuple[DragParams, bool]:
    """Identify the lateral drag parameters from flight logs.

    Minimizes the summed squared xy error between the integrated drag-only
    path and the known gate centers at the logged pass times, by
    coordinate descent with golden-section line searches. Returns the fit
    and a degeneracy flag (True when the objective is flat, e.g. a hover
    log, in which case the initial guess is returned).
    """
    passes = sum(int((log.gate_pass > 0).sum()) for log in logs)
    if passes < 2:
        raise ValueError(f"need at least 2 gate passes across logs, got {passes}")
    centers = np.array([g.center[:2] for g in track.gates])

    def objective(dx: float, dy: float) -> float:
        d = DragParams(dx, dy)
        err = 0.0
        for log in logs:
            pos = _integrate_drag_path(log, d)
            rows = np.nonzero(log.gate_pass > 0)[0]
            gates = log.gate_pass[rows].astype(int) - 1
            diff = pos[rows] - centers[gates]
            err += float((diff * diff).sum())
        return err

    f0 = objective(initial.d_x, initial.d_y)
    probe = objective(initial.d_x * 1.2, initial.d_y * 1.2)
    if abs(probe - f0) <= 1e-12 * max(1.0, f0):
        return initial, True

    dx, dy = initial.d_x, initial.d_y
    for _ in range(6):
        dx_new = _golden_min(lambda v: objective(v, dy), bounds[0], bounds[1], tol)
        dy_new = _golden_min(lambda v: objective(dx_new, v), bounds[0], bounds[1], tol)
        if abs(dx_new - dx) < tol and abs(dy_new - dy) < tol:
            dx, dy = dx_new, dy_new
            break
        dx, dy = dx_new, dy_new
    return DragParams(dx, dy), False
