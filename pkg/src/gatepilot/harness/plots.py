"""Plot-data export: tabular files any plotter can consume."""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np

from ..simdyn.scheduler import EpisodeTrace


def load_trace_csv(path: str | Path) -> EpisodeTrace:
    """Read back a trace CSV written by :meth:`EpisodeTrace.to_csv`."""
    header_lines = []
    columns: list[str] = []
    rows: list[list[float]] = []
    with open(path) as f:
        for line in f:
            line = line.rstrip("\n")
            if line.startswith("# "):
                header_lines.append(line[2:])
            elif not columns:
                columns = line.split(",")
            elif line:
                rows.append([float(v) for v in line.split(",")])
    return EpisodeTrace(columns=columns, rows=rows, header="\n".join(header_lines))


def _write_table(path: Path, names: list[str], arrays: list[np.ndarray]) -> None:
    with open(path, "w", newline="") as f:
        f.write(",".join(names) + "\n")
        for row in zip(*arrays):
            f.write(",".join(repr(float(v)) for v in row) + "\n")


def export_plots(trace: EpisodeTrace, outdir: str | Path) -> dict[str, Path]:
    """Emit top-view path, speed profile, and estimate-vs-truth series.

    The summary JSON repeats derived statistics (RMS error, max speed) with
    full float precision so files can be checked against in-memory values.
    """
    outdir = Path(outdir)
    outdir.mkdir(parents=True, exist_ok=True)
    t = trace.column("t")
    tx, ty, tz = trace.column("true_x"), trace.column("true_y"), trace.column("true_z")
    ex, ey, ez = trace.column("est_x"), trace.column("est_y"), trace.column("est_z")
    speed = np.sqrt(
        trace.column("true_vx") ** 2
        + trace.column("true_vy") ** 2
        + trace.column("true_vz") ** 2
    )
    est_speed = np.sqrt(
        trace.column("est_vx") ** 2
        + trace.column("est_vy") ** 2
        + trace.column("est_vz") ** 2
    )
    err = np.sqrt((tx - ex) ** 2 + (ty - ey) ** 2 + (tz - ez) ** 2)

    paths = {
        "path": outdir / "path_topview.csv",
        "speed": outdir / "speed_profile.csv",
        "error": outdir / "estimate_vs_truth.csv",
        "summary": outdir / "summary.json",
    }
    _write_table(
        paths["path"], ["t", "true_x", "true_y", "est_x", "est_y"], [t, tx, ty, ex, ey]
    )
    _write_table(paths["speed"], ["t", "true_speed", "est_speed"], [t, speed, est_speed])
    _write_table(
        paths["error"],
        ["t", "err_x", "err_y", "err_z", "err_norm"],
        [t, tx - ex, ty - ey, tz - ez, err],
    )
    summary = {
        "rms_position_error": repr(float(np.sqrt(np.mean(err**2)))),
        "max_speed": repr(float(speed.max())),
        "mean_speed": repr(float(speed.mean())),
    }
    paths["summary"].write_text(json.dumps(summary, indent=2))
    return paths
