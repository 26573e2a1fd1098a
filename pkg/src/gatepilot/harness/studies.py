"""Experiment runners: controller ablation, map-perturbation robustness,
calibration sensitivity, odometry comparison, and drag identification.

Every study is a set of independently seeded episodes; each cell of every
table is reproducible bit-identically from (config, seed).
"""

from __future__ import annotations

import dataclasses
import math
from dataclasses import dataclass, field

import numpy as np

from ..estimation import DragFitLog, DragParams, fit_drag
from ..geometry import G, Attitude, rot_world_from_body, world_from_flat_body
from ..perception import DegradationSpec
from ..track import PerturbationSpec
from .config import RunConfig, resolve_track
from .episode import Autopilot, EpisodeResult, run_race

DEG = math.pi / 180.0


def _seed_for(base: int, study: int, run: int) -> int:
    return base * 10007 + study * 1009 + run


@dataclass
class StudyRow:
    label: str
    successes: int
    runs: int
    mean_speed: float
    mean_time: float
    results: list[EpisodeResult] = field(default_factory=list)

    @property
    def rate(self) -> float:
        return self.successes / self.runs if self.runs else 0.0


def _run_batch(config: RunConfig, label: str, seeds: list[int]) -> StudyRow:
    results = []
    for s in seeds:
        cfg = dataclasses.replace(config, seed=s)
        res, _ = run_race(cfg)
        results.append(res)
    finished = [r for r in results if r.finished]
    return StudyRow(
        label=label,
        successes=len(finished),
        runs=len(results),
        mean_speed=float(np.mean([r.mean_speed for r in finished])) if finished else float("nan"),
        mean_time=float(np.mean([r.time for r in finished])) if finished else float("nan"),
        results=results,
    )


def format_table(rows: list[StudyRow]) -> str:
    out = [f"{'config':<18} {'success':>9} {'mean speed':>11} {'mean time':>10}"]
    for r in rows:
        speed = f"{r.mean_speed:.2f}" if not math.isnan(r.mean_speed) else "-"
        time = f"{r.mean_time:.2f}" if not math.isnan(r.mean_time) else "-"
        out.append(f"{r.label:<18} {r.successes:>4}/{r.runs:<4} {speed:>11} {time:>10}")
    return "\n".join(out)


# -- controller ablation ---------------------------------------------------


@dataclass
class AblationResult:
    rows: list[StudyRow]

    def row(self, label: str) -> StudyRow:
        return next(r for r in self.rows if r.label == label)

    def sane(self) -> bool:
        s = {r.label: r for r in self.rows}
        ok = (
            s["S.5"].successes >= s["S.4"].successes >= s["S.2"].successes >= s["S.1"].successes
        )
        ok = ok and s["S.3"].successes < s["S.2"].successes
        if not math.isnan(s["S.5"].mean_speed) and not math.isnan(s["S.4"].mean_speed):
            ok = ok and s["S.5"].mean_speed >= 1.05 * s["S.4"].mean_speed
        return ok


def ablate(config: RunConfig, runs: int | None = None) -> AblationResult:
    """10 seeded runs for each cumulative feature set S.1 .. S.5."""
    runs = runs or config.repetitions
    rows = []
    for stage in range(1, 6):
        cfg = config.with_stage(stage)
        seeds = [_seed_for(config.seed, stage, i) for i in range(runs)]
        rows.append(_run_batch(cfg, f"S.{stage}", seeds))
    return AblationResult(rows=rows)


# -- track perturbations -----------------------------------------------------


DEFAULT_PERTURBATIONS: list[tuple[str, float, float]] = [
    ("0m", 0.0, 0.0),
    ("3m", 3.0, 0.0),
    ("5m", 5.0, 0.0),
    ("20deg", 0.0, 20.0 * DEG),
    ("40deg", 0.0, 40.0 * DEG),
]


@dataclass
class PerturbationResult:
    rows: list[StudyRow]

    def row(self, label: str) -> StudyRow:
        return next(r for r in self.rows if r.label == label)

    def sane(self) -> bool:
        s = {r.label: r for r in self.rows}
        return (
            s["3m"].successes == s["3m"].runs
            and s["5m"].successes < s["3m"].successes
            and s["5m"].rate <= 0.8
        )


def perturb_study(
    config: RunConfig,
    magnitudes: list[tuple[str, float, float]] | None = None,
    runs: int | None = None,
) -> PerturbationResult:
    """Success rate and lap time under uniform map errors, per magnitude.

    Each run draws its own perturbed flight plan (the perturbation seed is
    the run seed).
    """
    runs = runs or config.repetitions
    magnitudes = magnitudes or DEFAULT_PERTURBATIONS
    rows = []
    for j, (label, pos_mag, yaw_mag) in enumerate(magnitudes):
        results = []
        for i in range(runs):
            seed = _seed_for(config.seed, 100 + j, i)
            cfg = dataclasses.replace(
                config,
                seed=seed,
                perturbation=PerturbationSpec(
                    position_mag=pos_mag, yaw_mag=yaw_mag, seed=seed + 1
                ),
            )
            res, _ = run_race(cfg)
            results.append(res)
        finished = [r for r in results if r.finished]
        rows.append(
            StudyRow(
                label=label,
                successes=len(finished),
                runs=len(results),
                mean_speed=float(np.mean([r.mean_speed for r in finished]))
                if finished
                else float("nan"),
                mean_time=float(np.mean([r.time for r in finished])) if finished else float("nan"),
                results=results,
            )
        )
    return PerturbationResult(rows=rows)


# -- calibration sensitivity -------------------------------------------------


@dataclass
class CalibrationResult:
    focal: list[StudyRow]
    mount_yaw: list[StudyRow]
    morphology: list[StudyRow]

    def all_rows(self) -> list[StudyRow]:
        return self.focal + self.mount_yaw + self.morphology

    def sane(self) -> bool:
        by = {r.label: r for r in self.all_rows()}
        ok = all(by[k].successes == by[k].runs for k in ("focal 0.9", "focal 1.0", "focal 1.1"))
        ok = ok and all(by[k].successes == by[k].runs for k in ("yaw 0deg", "yaw 5deg", "yaw 10deg"))
        ok = ok and by["erode 4"].successes == 0
        ok = ok and by["erode 2"].successes == by["erode 2"].runs
        ok = ok and by["dilate 2"].successes == by["dilate 2"].runs
        ok = ok and by["dilate 4"].successes == by["dilate 4"].runs
        return ok


def calib_sweep(config: RunConfig, runs: int = 3) -> CalibrationResult:
    """Focal-scale, mounting-yaw and mask-morphology sweeps."""
    focal_rows = []
    for j, scale in enumerate((0.9, 1.0, 1.1)):
        cfg = dataclasses.replace(
            config, camera=dataclasses.replace(config.camera, focal_scale=scale)
        )
        seeds = [_seed_for(config.seed, 200 + j, i) for i in range(runs)]
        focal_rows.append(_run_batch(cfg, f"focal {scale}", seeds))
    yaw_rows = []
    for j, err_deg in enumerate((0.0, 5.0, 10.0)):
        cfg = dataclasses.replace(
            config,
            camera=dataclasses.replace(config.camera, mount_yaw_error=err_deg * DEG),
        )
        seeds = [_seed_for(config.seed, 210 + j, i) for i in range(runs)]
        yaw_rows.append(_run_batch(cfg, f"yaw {err_deg:.0f}deg", seeds))
    morph_rows = []
    morphs = [("erode 4", 4, 0), ("erode 2", 2, 0), ("none", 0, 0), ("dilate 2", 0, 2), ("dilate 4", 0, 4)]
    for j, (label, er, dl) in enumerate(morphs):
        deg = dataclasses.replace(config.degradation, erode=er, dilate=dl)
        cfg = dataclasses.replace(config, degradation=deg)
        seeds = [_seed_for(config.seed, 220 + j, i) for i in range(runs)]
        morph_rows.append(_run_batch(cfg, label, seeds))
    return CalibrationResult(focal=focal_rows, mount_yaw=yaw_rows, morphology=morph_rows)


# -- odometry comparison -----------------------------------------------------


PREDICTION_HORIZON = 1.8  # s


class OdometryProbe(Autopilot):
    """Autopilot instrumented with shadow open-loop predictors.

    Keeps short rings of IMU samples (with the attitude estimate at each
    sample) and of corrected state estimates; at every believed gate pass
    it re-integrates the last 1.8 s three ways (accelerometer-only,
    drag-model-only, alpha blend) from the estimate at the window start.
    Endpoints are compared with the truth after the episode.
    """

    def __init__(self, *args, **kwargs):
        super().__init__(*args, **kwargs)
        self.imu_ring: list[tuple[float, np.ndarray, float, float, float]] = []
        self.est_ring: list[tuple[float, float, float, float, float]] = []
        self.samples: list[dict] = []  # one per gate pass

    def on_imu(self, ev) -> None:
        super().on_imu(ev)
        accel, _ = ev.payload
        att = self.estimator.att
        self.imu_ring.append((ev.t, accel, att.roll, att.pitch, att.yaw))
        horizon = PREDICTION_HORIZON + 0.3
        while self.imu_ring and ev.t - self.imu_ring[0][0] > horizon:
            self.imu_ring.pop(0)

    def on_est_tick(self, t: float) -> None:
        super().on_est_tick(t)
        est = self.estimator.estimate()
        self.est_ring.append(
            (t, est.position[0], est.position[1], est.velocity[0], est.velocity[1])
        )
        horizon = PREDICTION_HORIZON + 0.3
        while self.est_ring and t - self.est_ring[0][0] > horizon:
            self.est_ring.pop(0)

    def on_control(self, t: float):
        cmd = super().on_control(t)
        if self.controller.gate_passed_pulse:
            self._record_prediction(t)
        return cmd

    def _record_prediction(self, t_end: float) -> None:
        t0 = t_end - PREDICTION_HORIZON
        start = next((e for e in self.est_ring if e[0] >= t0), None)
        if start is None:
            return
        _, px, py, vx, vy = start
        imu = [s for s in self.imu_ring if start[0] <= s[0] <= t_end]
        if len(imu) < 100:
            return
        endpoints = {}
        d = self.config.estimator.drag
        for name, alpha in (("inertial", 0.0), ("flat_body", 1.0), ("alpha", self.config.estimator.alpha)):
            x, y, ux, uy = px, py, vx, vy
            t_prev = start[0]
            for (ts, accel, roll, pitch, yaw) in imu:
                dt = ts - t_prev
                t_prev = ts
                if dt <= 0:
                    continue
                r_wb = rot_world_from_body(Attitude(roll, pitch, yaw))
                lat_meas = r_wb @ np.array([accel[0], accel[1], 0.0])
                thrust = r_wb @ np.array([0.0, 0.0, accel[2]])
                c, s = math.cos(yaw), math.sin(yaw)
                vfx = c * ux + s * uy
                vfy = -s * ux + c * uy
                afx = d.d_x * vfx
                afy = d.d_y * vfy
                model_x = c * afx - s * afy
                model_y = s * afx + c * afy
                ax = alpha * model_x + (1 - alpha) * lat_meas[0] + thrust[0]
                ay = alpha * model_y + (1 - alpha) * lat_meas[1] + thrust[1]
                ux += ax * dt
                uy += ay * dt
                x += ux * dt
                y += uy * dt
            endpoints[name] = (x, y)
        self.samples.append({"t": t_end, "endpoints": endpoints})


@dataclass
class OdometryResult:
    errors: dict[str, list[float]]

    def medians(self) -> dict[str, float]:
        return {k: float(np.median(v)) for k, v in self.errors.items()}

    def sane(self, gate_outer: float = 3.0) -> bool:
        med = self.medians()
        return (
            med["alpha"] <= med["flat_body"] <= med["inertial"]
            and med["alpha"] < gate_outer
        )


def odometry_study(config: RunConfig, runs: int = 20) -> OdometryResult:
    """Median 1.8 s open-loop prediction endpoint error per odometry model."""
    from ..simdyn import run_scheduler
    from .episode import build_episode

    errors: dict[str, list[float]] = {"inertial": [], "flat_body": [], "alpha": []}
    for i in range(runs):
        cfg = dataclasses.replace(config, seed=_seed_for(config.seed, 300, i))
        plant, plant_params, suite, _, truth = build_episode(cfg)
        nav = resolve_track(cfg.track)
        ss = np.random.SeedSequence(cfg.seed)
        _, mhe_ss, deg_ss = ss.spawn(3)
        probe = OdometryProbe(cfg, nav, truth, mhe_ss, deg_ss)
        trace = run_scheduler(
            plant,
            plant_params,
            suite,
            probe,
            t_end=cfg.t_end,
            track=truth,
            est_rate=cfg.estimator.tick_rate,
            record_events=False,
        )
        if trace.error is not None:
            raise trace.error
        if not trace.rows:
            continue
        tt = trace.column("t")
        tx = trace.column("true_x")
        ty = trace.column("true_y")
        for sample in probe.samples:
            t = sample["t"]
            if t > tt[-1]:
                continue
            truth_x = float(np.interp(t, tt, tx))
            truth_y = float(np.interp(t, tt, ty))
            for name, (ex, ey) in sample["endpoints"].items():
                errors[name].append(math.hypot(ex - truth_x, ey - truth_y))
    return OdometryResult(errors=errors)


# -- drag identification -----------------------------------------------------


def drag_log_from_trace(trace, track) -> DragFitLog:
    """Extract the drag-fit columns from an episode trace."""
    return DragFitLog(
        t=trace.column("t"),
        roll=trace.column("est_roll"),
        pitch=trace.column("est_pitch"),
        yaw=trace.column("est_yaw"),
        az=trace.column("az_meas"),
        gate_pass=trace.column("just_passed"),
        start_xy=np.array([trace.column("true_x")[0], trace.column("true_y")[0]]),
    )


def fit_drag_study(
    config: RunConfig, runs: int = 2, initial: DragParams | None = None
) -> tuple[DragParams, bool]:
    """Fly seeded episodes and fit the drag parameters from their logs."""
    truth = resolve_track(config.track)
    logs = []
    for i in range(runs):
        cfg = dataclasses.replace(config, seed=_seed_for(config.seed, 400, i))
        _, trace = run_race(cfg)
        logs.append(drag_log_from_trace(trace, truth))
    return fit_drag(logs, truth, initial or DragParams(-0.4, -0.4))
