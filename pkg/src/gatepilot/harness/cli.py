"""Command-line experiment runner.

Subcommands mirror the studies: ``race``, ``ablate``, ``perturb``,
``calib-sweep``, ``fit-drag``, ``export-plots``. Exit code 0 means the
invoked study met its internal sanity checks.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import sys
from pathlib import Path

from ..estimation import DragParams, fit_drag
from .config import RunConfig, resolve_track
from .episode import run_race
from .plots import export_plots, load_trace_csv
from .studies import (
    ablate,
    calib_sweep,
    drag_log_from_trace,
    format_table,
    odometry_study,
    perturb_study,
)


def _load_config(args) -> RunConfig:
    cfg = RunConfig.load(args.config) if args.config else RunConfig()
    if args.track:
        cfg = dataclasses.replace(cfg, track=args.track)
    if args.seed is not None:
        cfg = dataclasses.replace(cfg, seed=args.seed)
    if getattr(args, "stage", None):
        cfg = cfg.with_stage(args.stage)
    return cfg


def _add_common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="run-configuration JSON file")
    p.add_argument("--track", help="bundled track name or track file path")
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--out", default="out", help="output directory")


def main(argv=None) -> int:
    ap = argparse.ArgumentParser(prog="gatepilot", description=__doc__)
    sub = ap.add_subparsers(dest="cmd", required=True)

    p = sub.add_parser("race", help="fly one episode and write its trace")
    _add_common(p)
    p.add_argument("--stage", type=int, choices=range(1, 6), help="feature set S.1..S.5")
    p.add_argument("--dump-masks", action="store_true", help="write per-frame mask PGMs")

    p = sub.add_parser("ablate", help="controller ablation S.1..S.5")
    _add_common(p)
    p.add_argument("--runs", type=int, default=None)

    p = sub.add_parser("perturb", help="track perturbation robustness")
    _add_common(p)
    p.add_argument("--runs", type=int, default=None)

    p = sub.add_parser("calib-sweep", help="calibration sensitivity sweep")
    _add_common(p)
    p.add_argument("--runs", type=int, default=3)

    p = sub.add_parser("odometry", help="1.8 s odometry prediction comparison")
    _add_common(p)
    p.add_argument("--runs", type=int, default=20)

    p = sub.add_parser("fit-drag", help="fit drag parameters from trace CSVs")
    p.add_argument("traces", nargs="+", help="episode trace CSV files")
    p.add_argument("--track", required=True, help="track the traces were flown on")
    p.add_argument("--out", default=None, help="write fitted params to JSON")

    p = sub.add_parser("export-plots", help="emit plot data from a trace CSV")
    p.add_argument("trace")
    p.add_argument("--out", default="plots")

    args = ap.parse_args(argv)
    outdir = Path(getattr(args, "out", "out") or "out")

    if args.cmd == "race":
        cfg = _load_config(args)
        outdir.mkdir(parents=True, exist_ok=True)
        mask_dir = None
        if args.dump_masks:
            mask_dir = outdir / "masks"
            mask_dir.mkdir(exist_ok=True)
        result, _ = run_race(cfg, trace_path=outdir / "trace.csv", mask_dir=mask_dir)
        print(
            f"finished={result.finished} gates={result.gates_passed} "
            f"time={result.time:.2f}s mean={result.mean_speed:.2f}m/s "
            f"max={result.max_speed:.2f}m/s cause={result.crash_cause}"
        )
        return 0 if result.finished else 1

    if args.cmd == "ablate":
        cfg = _load_config(args)
        res = ablate(cfg, runs=args.runs)
        print(format_table(res.rows))
        return 0 if res.sane() else 1

    if args.cmd == "perturb":
        cfg = _load_config(args)
        if not args.track:
            cfg = dataclasses.replace(cfg, track="baltimore")
        res = perturb_study(cfg, runs=args.runs)
        print(format_table(res.rows))
        return 0 if res.sane() else 1

    if args.cmd == "calib-sweep":
        cfg = _load_config(args)
        res = calib_sweep(cfg, runs=args.runs)
        print(format_table(res.all_rows()))
        return 0 if res.sane() else 1

    if args.cmd == "odometry":
        cfg = _load_config(args)
        res = odometry_study(cfg, runs=args.runs)
        med = res.medians()
        for k, v in med.items():
            print(f"{k:<10} median 1.8s endpoint error: {v:.3f} m (n={len(res.errors[k])})")
        return 0 if res.sane() else 1

    if args.cmd == "fit-drag":
        track = resolve_track(args.track)
        logs = [drag_log_from_trace(load_trace_csv(p), track) for p in args.traces]
        fitted, degenerate = fit_drag(logs, track, DragParams(-0.4, -0.4))
        print(f"d_x={fitted.d_x:.4f} d_y={fitted.d_y:.4f} degenerate={degenerate}")
        if args.out:
            Path(args.out).write_text(
                json.dumps({"d_x": fitted.d_x, "d_y": fitted.d_y, "degenerate": degenerate})
            )
        return 0 if not degenerate else 1

    if args.cmd == "export-plots":
        trace = load_trace_csv(args.trace)
        paths = export_plots(trace, outdir)
        for k, v in paths.items():
            print(f"{k}: {v}")
        return 0

    return 2


if __name__ == "__main__":
    sys.exit(main())
