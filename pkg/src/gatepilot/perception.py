"""Monocular gate perception on synthetic segmentation masks.

The learned segmentation front end is replaced by a geometric oracle: the
front-panel ring of every visible gate is projected (with lens distortion)
into a binary 360x360 mask, then degraded with morphology, blur and random
holes to emulate imperfect segmentation. Downstream of the mask the chain
is the real thing: roll de-rotation, histogram-seeded diagonal pixel
walking for the 8 gate corners, shape validation against the projected
map prior, and attitude-assisted PnP for the camera position and yaw.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import cv2
import numpy as np

from .geometry import (
    Attitude,
    CameraModel,
    Pose,
    distort_pixel,
    project_points,
    rot_body_from_camera,
    rot_world_from_body,
    undistorted_pixel,
)
from .track import Gate, TrackMap, gate_corner_points

MASK_SIZE = 360
EDGE_SUBDIV = 8  # 3D samples per panel edge, keeps distorted edges curved


@dataclass
class Mask:
    grid: np.ndarray  # uint8, {0,1}, MASK_SIZE x MASK_SIZE
    t: float = 0.0

    def __post_init__(self):
        if self.grid.shape != (MASK_SIZE, MASK_SIZE):
            raise ValueError(f"mask must be {MASK_SIZE}x{MASK_SIZE}, got {self.grid.shape}")


@dataclass(frozen=True)
class DegradationSpec:
    erode: int = 0  # px, {0, 2, 4}
    dilate: int = 0  # px, {0, 2, 4}
    blur: int = 0  # px, box kernel size, 0..15
    hole_prob: float = 0.0
    seed: int = 0

    def __post_init__(self):
        if self.erode and self.dilate:
            raise ValueError("erode and dilate cannot both be nonzero")
        if not 0 <= self.blur <= 15:
            raise ValueError(f"blur kernel must be within [0, 15], got {self.blur}")
        if not 0.0 <= self.hole_prob <= 1.0:
            raise ValueError(f"hole probability must be in [0, 1], got {self.hole_prob}")


@dataclass
class CornerSet:
    """Ordered gate corners in pixel coordinates: TL, TR, BR, BL."""

    outer: list = field(default_factory=lambda: [None] * 4)
    inner: list = field(default_factory=lambda: [None] * 4)
    valid_outer: list = field(default_factory=lambda: [False] * 4)
    valid_inner: list = field(default_factory=lambda: [False] * 4)
    corrected: int = 0  # corners replaced from the prior shape
    pixels_touched: int = 0  # sampling-stage instrumentation

    def n_valid(self) -> int:
        return sum(self.valid_outer) + sum(self.valid_inner)

    def n_present(self) -> int:
        return sum(c is not None for c in self.outer + self.inner)

    def valid_items(self):
        """Yields (index 0..7, pixel) for valid corners; outer first."""
        for i, (c, ok) in enumerate(zip(self.outer, self.valid_outer)):
            if ok and c is not None:
                yield i, c
        for i, (c, ok) in enumerate(zip(self.inner, self.valid_inner)):
            if ok and c is not None:
                yield i + 4, c


@dataclass
class PnPResult:
    position: np.ndarray  # camera/body position, world, m
    yaw: float  # refined body yaw, rad
    rms: float  # reprojection RMS, undistorted px
    n_points: int
    t: float


def _project_ring(
    poly_world: np.ndarray, cam: CameraModel, body_pose: Pose
) -> np.ndarray | None:
    """Project a closed 3D polygon with per-edge subdivision; None if not fully in front."""
    pts = []
    n = len(poly_world)
    for i in range(n):
        a, b = poly_world[i], poly_world[(i + 1) % n]
        for k in range(EDGE_SUBDIV):
            pts.append(a + (b - a) * (k / EDGE_SUBDIV))
    px, valid = project_points(cam, body_pose, np.array(pts))
    if not valid.all():
        return None
    if np.abs(px).max() > 20000.0:
        return None
    return px


def render_mask(
    track: TrackMap,
    body_pose: Pose,
    cam: CameraModel,
    spec: DegradationSpec = DegradationSpec(),
    t: float = 0.0,
    rng: np.random.Generator | None = None,
) -> Mask:
    """Synthetic segmentation: distorted projection of all visible gate rings.

    A gate contributes when its whole front panel projects in front of the
    camera; rings are composited by union so gates seen through another
    gate's opening stay visible. Degradation runs after rasterisation and
    is deterministic given the spec seed (or the supplied generator).
    """
    grid = np.zeros((MASK_SIZE, MASK_SIZE), dtype=np.uint8)
    tmp = np.empty_like(grid)
    for gate in track.gates:
        corners = gate_corner_points(gate)
        outer_px = _project_ring(corners[:4], cam, body_pose)
        if outer_px is None:
            continue
        inner_px = _project_ring(corners[4:], cam, body_pose)
        if inner_px is None:
            continue
        if (
            outer_px[:, 0].max() < 0
            or outer_px[:, 0].min() > MASK_SIZE
            or outer_px[:, 1].max() < 0
            or outer_px[:, 1].min() > MASK_SIZE
        ):
            continue
        tmp[:] = 0
        shift = 4  # 1/16 px vertices: mask boundaries follow the float projection
        cv2.fillPoly(tmp, [np.round(outer_px * 16.0).astype(np.int32)], 1, shift=shift)
        cv2.fillPoly(tmp, [np.round(inner_px * 16.0).astype(np.int32)], 0, shift=shift)
        np.bitwise_or(grid, tmp, out=grid)
    grid = degrade_mask(grid, spec, rng)
    return Mask(grid=grid, t=t)


def degrade_mask(
    grid: np.ndarray, spec: DegradationSpec, rng: np.random.Generator | None = None
) -> np.ndarray:
    """Morphology, threshold-after-blur, then random holes."""
    if spec.erode == 0 and spec.dilate == 0 and spec.blur == 0 and spec.hole_prob == 0:
        return grid
    if rng is None:
        rng = np.random.default_rng(spec.seed)
    kernel = np.ones((3, 3), dtype=np.uint8)
    if spec.erode:
        grid = cv2.erode(grid, kernel, iterations=spec.erode)
    elif spec.dilate:
        grid = cv2.dilate(grid, kernel, iterations=spec.dilate)
    if spec.blur > 1:
        blurred = cv2.blur(grid * 255, (spec.blur, spec.blur))
        grid = (blurred > 127).astype(np.uint8)
    if spec.hole_prob > 0:
        n_holes = int(rng.binomial(3, spec.hole_prob))
        for _ in range(n_holes):
            ys, xs = np.nonzero(grid)
            if len(xs) == 0:
                break
            k = int(rng.integers(0, len(xs)))
            radius = int(rng.integers(8, 20))
            cv2.circle(grid, (int(xs[k]), int(ys[k])), radius, 0, -1)
    return grid


def derotate_mask(m: Mask, roll: float) -> Mask:
    """Upright the mask by the estimated roll (nearest-neighbour resample)."""
    if roll == 0.0:
        return Mask(grid=m.grid.copy(), t=m.t)
    c = (MASK_SIZE - 1) / 2.0
    cr, sr = math.cos(roll), math.sin(roll)
    xs = np.arange(MASK_SIZE) - c
    gx, gy = np.meshgrid(xs, xs, indexing="xy")
    src_x = np.rint(c + cr * gx + sr * gy).astype(np.int64)
    src_y = np.rint(c - sr * gx + cr * gy).astype(np.int64)
    ok = (src_x >= 0) & (src_x < MASK_SIZE) & (src_y >= 0) & (src_y < MASK_SIZE)
    out = np.zeros_like(m.grid)
    out[ok] = m.grid[src_y[ok], src_x[ok]]
    return Mask(grid=out, t=m.t)


def rerotate_pixel(px: np.ndarray, roll: float) -> np.ndarray:
    """Map a pixel found in the de-rotated frame back to the raw image frame."""
    c = (MASK_SIZE - 1) / 2.0
    cr, sr = math.cos(roll), math.sin(roll)
    dx, dy = px[0] - c, px[1] - c
    return np.array([c + cr * dx + sr * dy, c - sr * dx + cr * dy])


SNAP_WINDOW = 20  # px, start-pixel snapping radius
_DIAG_DIRS = ((-1, -1), (1, -1), (1, 1), (-1, 1))  # TL, TR, BR, BL


class _Tracer:
    """Counts distinct mask pixels sampled by the walking stages."""

    def __init__(self, grid: np.ndarray):
        self.grid = grid
        self.touched: set[tuple[int, int]] = set()

    def filled(self, x: int, y: int) -> bool:
        self.touched.add((x, y))
        return bool(self.grid[y, x])


def _walk(tr: _Tracer, x: int, y: int, dx: int, dy: int, want: int) -> tuple[int, int]:
    """Advance through pixels of value ``want`` toward the (dx, dy) diagonal.

    Steps prefer the diagonal, then the two forward cardinals, then slide
    moves (forward on one axis, one back on the other) that follow edges
    tilted against the walk, and finally two-pixel probes that bridge the
    single-pixel notches left by the nearest-neighbour de-rotation. The
    walk stops (corner found) when nothing matches within that reach; a
    visited set prevents slide-move cycles.
    """
    lim = MASK_SIZE - 1
    steps = (
        (dx, dy),
        (dx, 0),
        (0, dy),
        (dx, -dy),
        (-dx, dy),
        (2 * dx, 2 * dy),
        (2 * dx, dy),
        (dx, 2 * dy),
        (0, 2 * dy),
        (2 * dx, 0),
    )
    seen = {(x, y)}
    for _ in range(4 * MASK_SIZE):
        moved = False
        for ox, oy in steps:
            nx, ny = x + ox, y + oy
            if (
                0 <= nx <= lim
                and 0 <= ny <= lim
                and (nx, ny) not in seen
                and tr.filled(nx, ny) == want
            ):
                x, y = nx, ny
                seen.add((nx, ny))
                moved = True
                break
        if not moved:
            break
    return x, y


def snake_gate(m: Mask) -> CornerSet:
    """Histogram-seeded diagonal walker for the 4 outer + 4 inner corners.

    Outer corners terminate filled-pixel walks from the histogram start;
    inner corners terminate empty-pixel walks from the outer-corner
    centroid. Walks that run into the image border are discarded (the walk
    escaped through a mask defect). Only the actively sampled pixels count
    toward ``pixels_touched``; the seed histograms are vectorised sums.
    """
    out = CornerSet()
    grid = m.grid
    col_hist = grid.sum(axis=0)
    row_hist = grid.sum(axis=1)
    if col_hist.max() == 0:
        return out
    x0 = int(col_hist.argmax())
    y0 = int(row_hist.argmax())
    tr = _Tracer(grid)

    if not tr.filled(x0, y0):
        best = None
        for r in range(1, SNAP_WINDOW + 1):
            for nx in range(max(0, x0 - r), min(MASK_SIZE, x0 + r + 1)):
                for ny in (y0 - r, y0 + r):
                    if 0 <= ny < MASK_SIZE and tr.filled(nx, ny):
                        d = (nx - x0) ** 2 + (ny - y0) ** 2
                        if best is None or d < best[0]:
                            best = (d, nx, ny)
            for ny in range(max(0, y0 - r + 1), min(MASK_SIZE, y0 + r)):
                for nx in (x0 - r, x0 + r):
                    if 0 <= nx < MASK_SIZE and tr.filled(nx, ny):
                        d = (nx - x0) ** 2 + (ny - y0) ** 2
                        if best is None or d < best[0]:
                            best = (d, nx, ny)
            if best is not None:
                break
        if best is None:
            out.pixels_touched = len(tr.touched)
            return out
        _, x0, y0 = best

    lim = MASK_SIZE - 1
    found = []
    for i, (dx, dy) in enumerate(_DIAG_DIRS):
        cx, cy = _walk(tr, x0, y0, dx, dy, want=1)
        out.outer[i] = np.array([float(cx), float(cy)])
        out.valid_outer[i] = True
        found.append((cx, cy))

    cx = int(round(sum(p[0] for p in found) / len(found)))
    cy = int(round(sum(p[1] for p in found) / len(found)))
    if 0 < cx < lim and 0 < cy < lim and not tr.filled(cx, cy):
        for i, (dx, dy) in enumerate(_DIAG_DIRS):
            ix, iy = _walk(tr, cx, cy, dx, dy, want=0)
            if ix in (0, lim) or iy in (0, lim):
                continue  # escaped through a hole
            out.inner[i] = np.array([float(ix), float(iy)])
            out.valid_inner[i] = True

    out.pixels_touched = len(tr.touched)
    return out


REFINE_WINDOW = 4.0  # px, boundary search half-range along the edge normal
MAX_REFINE_SHIFT = 2.5  # px, reject line intersections farther than this


def _boundary_samples(
    tr: _Tracer, a: np.ndarray, b: np.ndarray, outward: np.ndarray, want: int
) -> list[np.ndarray]:
    """Boundary points along the edge a->b, scanned inward along ``outward``.

    At sample stations between the corners, steps from the outward side
    toward the contour body and records the first pixel matching the body
    polarity (1 for the filled ring, 0 for the hole interior).
    """
    lim = MASK_SIZE - 1
    n = int(np.clip(np.hypot(*(b - a)) / 10.0, 5, 12))
    samples = []
    for k in range(1, n + 1):
        p = a + (k / (n + 1.0)) * (b - a)
        for s in np.arange(REFINE_WINDOW, -REFINE_WINDOW - 0.5, -1.0):
            pos = p + s * outward
            x, y = int(round(pos[0])), int(round(pos[1]))
            if not (0 <= x <= lim and 0 <= y <= lim):
                continue
            if tr.filled(x, y) == want:
                samples.append(pos)
                break
    return samples


def _fit_line(samples: list[np.ndarray]) -> tuple[float, float, float] | None:
    """Least-squares line (nx, ny, c) with nx*x + ny*y = c, fit on the dominant axis."""
    if len(samples) < 3:
        return None
    pts = np.array(samples)
    span = pts.max(axis=0) - pts.min(axis=0)
    if span[0] >= span[1]:
        m, q = np.polyfit(pts[:, 0], pts[:, 1], 1)
        return (-float(m), 1.0, float(q))
    m, q = np.polyfit(pts[:, 1], pts[:, 0], 1)
    return (1.0, -float(m), float(q))


def refine_corners(
    m: Mask, corners: CornerSet, cam: CameraModel | None = None
) -> CornerSet:
    """Sub-pixel corner refinement by edge line fits.

    For each complete contour, samples the mask boundary along every edge,
    fits a line per edge and moves each corner to the intersection of its
    adjacent edges (kept only when that stays within a couple of pixels of
    the walk result). With a camera model the samples are undistorted
    first, so the fits see straight lines even where lens distortion bends
    long edges; the refined corner is mapped back to the raw image. Walk
    corners are kept wherever fitting is not possible.
    """
    out = CornerSet(
        outer=list(corners.outer),
        inner=list(corners.inner),
        valid_outer=list(corners.valid_outer),
        valid_inner=list(corners.valid_inner),
        corrected=corners.corrected,
    )
    tr = _Tracer(m.grid)
    for pts, want, dest in (
        (corners.outer, 1, out.outer),
        (corners.inner, 0, out.inner),
    ):
        if any(c is None for c in pts):
            continue
        centroid = np.mean(pts, axis=0)
        lines = []
        for i in range(4):
            a, b = pts[i], pts[(i + 1) % 4]
            t = b - a
            norm = np.hypot(*t)
            if norm < 4.0:
                lines.append(None)
                continue
            perp = np.array([-t[1], t[0]]) / norm
            mid = 0.5 * (a + b)
            outward = perp if perp @ (mid - centroid) > 0 else -perp
            samples = _boundary_samples(tr, a, b, outward, want)
            if cam is not None:
                und = [undistorted_pixel(cam, s) for s in samples]
                samples = [u for u in und if u is not None]
            lines.append(_fit_line(samples))
        for i in range(4):
            l_prev, l_next = lines[(i - 1) % 4], lines[i]
            if l_prev is None or l_next is None:
                continue
            a11, a12, c1 = l_prev
            a21, a22, c2 = l_next
            det = a11 * a22 - a12 * a21
            if abs(det) < 1e-9:
                continue
            cand = np.array(
                [(c1 * a22 - c2 * a12) / det, (a11 * c2 - a21 * c1) / det]
            )
            if cam is not None:
                cand = distort_pixel(cam, cand)
            if np.hypot(*(cand - pts[i])) <= MAX_REFINE_SHIFT:
                dest[i] = cand
    out.pixels_touched = corners.pixels_touched + len(tr.touched)
    return out


@dataclass
class PriorState:
    """Recovery timer for the corner sanity check."""

    last_valid_t: float | None = None
    recovery_count: int = 0
    bypassed: bool = False


SHAPE_TOLERANCE = 0.25
RECOVERY_TIMEOUT = 2.0  # s of zero valid corners before raw pass-through


def _contour_measures(pts: list) -> tuple[list, list]:
    """Side lengths (i -> i+1) and interior angles per corner; None where absent."""
    sides: list = [None] * 4
    angles: list = [None] * 4
    for i in range(4):
        a, b = pts[i], pts[(i + 1) % 4]
        if a is not None and b is not None:
            sides[i] = float(np.hypot(*(b - a)))
    for i in range(4):
        p_prev, p, p_next = pts[(i - 1) % 4], pts[i], pts[(i + 1) % 4]
        if p_prev is None or p is None or p_next is None:
            continue
        u = p_prev - p
        v = p_next - p
        nu, nv = np.hypot(*u), np.hypot(*v)
        if nu < 1e-9 or nv < 1e-9:
            continue
        angles[i] = float(math.acos(np.clip(np.dot(u, v) / (nu * nv), -1.0, 1.0)))
    return sides, angles


def _validate_contour(det: list, exp: list, tol: float) -> list[bool]:
    """Per-corner validity from adjacent side and angle errors vs the prior."""
    if any(e is None for e in exp):
        return [False] * 4
    d_sides, d_angles = _contour_measures(det)
    e_sides, e_angles = _contour_measures(exp)
    valid = [False] * 4
    for i in range(4):
        if det[i] is None:
            continue
        checks = []
        for k in ((i - 1) % 4, i):  # sides into and out of corner i
            if d_sides[k] is not None:
                checks.append(abs(d_sides[k] - e_sides[k]) / e_sides[k])
        if d_angles[i] is not None:
            checks.append(abs(d_angles[i] - e_angles[i]) / e_angles[i])
        valid[i] = bool(checks) and all(c < tol for c in checks)
    return valid


def _correct_contour(det: list, exp: list, valid: list[bool]) -> tuple[list, int]:
    """Replace rejected corners by the prior shape anchored on the valid ones."""
    idx = [i for i in range(4) if valid[i]]
    if len(idx) < 2:
        return det, 0
    det_mean = np.mean([det[i] for i in idx], axis=0)
    exp_mean = np.mean([exp[i] for i in idx], axis=0)
    offset = det_mean - exp_mean
    out = list(det)
    n_fix = 0
    for i in range(4):
        if not valid[i]:
            out[i] = exp[i] + offset
            n_fix += 1
    return out, n_fix


def gate_prior(
    detected: CornerSet,
    expected: CornerSet,
    state: PriorState,
    t: float,
    tol: float = SHAPE_TOLERANCE,
) -> CornerSet:
    """Shape check against the projected map gate, with prior-based repair.

    Corners whose adjacent sides/interior angle deviate less than ``tol``
    (relative) from the projected prior are kept; in a contour with at
    least two survivors the rejects are rebuilt by translating the prior
    shape onto them. After :data:`RECOVERY_TIMEOUT` seconds without a
    single valid corner the raw detections pass through unchecked.
    """
    out = CornerSet(pixels_touched=detected.pixels_touched)
    state.bypassed = False
    v_out = _validate_contour(detected.outer, expected.outer, tol)
    v_in = _validate_contour(detected.inner, expected.inner, tol)
    n_valid = sum(v_out) + sum(v_in)

    if state.last_valid_t is None:
        state.last_valid_t = t
    if n_valid > 0:
        state.last_valid_t = t
    elif t - state.last_valid_t >= RECOVERY_TIMEOUT:
        state.recovery_count += 1
        state.bypassed = True
        out.outer = list(detected.outer)
        out.inner = list(detected.inner)
        out.valid_outer = [c is not None for c in detected.outer]
        out.valid_inner = [c is not None for c in detected.inner]
        return out

    out.outer, fix_o = _correct_contour(detected.outer, expected.outer, v_out)
    out.inner, fix_i = _correct_contour(detected.inner, expected.inner, v_in)
    out.corrected = fix_o + fix_i
    out.valid_outer = [v or (fix_o > 0 and out.outer[i] is not None) for i, v in enumerate(v_out)]
    out.valid_inner = [v or (fix_i > 0 and out.inner[i] is not None) for i, v in enumerate(v_in)]
    return out


def project_gate_corners(
    gate: Gate, body_pose: Pose, cam: CameraModel
) -> CornerSet:
    """Distorted-image projection of a mapped gate, as a CornerSet prior."""
    pts = gate_corner_points(gate)
    px, valid = project_points(cam, body_pose, pts)
    out = CornerSet()
    for i in range(4):
        if valid[i]:
            out.outer[i] = px[i]
            out.valid_outer[i] = True
        if valid[i + 4]:
            out.inner[i] = px[i + 4]
            out.valid_inner[i] = True
    return out


PNP_TOL = 1e-4  # px RMS change convergence threshold
PNP_MAX_ITER = 50
PNP_MIN_POINTS = 3


def solve_pnp(
    corners: CornerSet,
    gate: Gate,
    att: Attitude,
    cam: CameraModel,
    initial_position: np.ndarray,
    initial_yaw: float | None = None,
    t: float = 0.0,
) -> PnPResult | None:
    """Attitude-assisted PnP: solve camera position and yaw, roll/pitch fixed.

    Levenberg-Marquardt on the reprojection error in undistorted pixel
    space; measured corners are undistorted once up front (corners whose
    undistortion diverges are dropped). Returns None with fewer than three
    usable correspondences.
    """
    pts3d_all = gate_corner_points(gate)
    obj = []
    img = []
    for i, px in corners.valid_items():
        und = undistorted_pixel(cam, px)
        if und is None:
            continue
        obj.append(pts3d_all[i])
        img.append(und)
    if len(obj) < PNP_MIN_POINTS:
        return None
    obj = np.array(obj)
    img = np.array(img)

    r_bc = rot_body_from_camera(cam)
    yaw = att.yaw if initial_yaw is None else initial_yaw
    params = np.array([*np.asarray(initial_position, dtype=float), yaw])

    def residuals(p):
        r_wc = rot_world_from_body(Attitude(att.roll, att.pitch, p[3])) @ r_bc
        pc = (obj - p[:3]) @ r_wc
        z = np.maximum(pc[:, 2], 0.05)
        proj = np.column_stack(
            [cam.cx + cam.focal_px * pc[:, 0] / z, cam.cy + cam.focal_px * pc[:, 1] / z]
        )
        res = (proj - img).ravel()
        res[np.repeat(pc[:, 2] <= 0.05, 2)] = 1e4
        return res

    def rms_of(res):
        return math.sqrt(float(res @ res) / len(obj))

    lam = 1e-3
    res = residuals(params)
    rms = rms_of(res)
    eps = 1e-6
    for _ in range(PNP_MAX_ITER):
        jac = np.empty((len(res), 4))
        for j in range(4):
            dp = params.copy()
            dp[j] += eps
            jac[:, j] = (residuals(dp) - res) / eps
        jtj = jac.T @ jac
        jtr = jac.T @ res
        try:
            step = np.linalg.solve(jtj + lam * np.diag(np.diag(jtj)) + 1e-12 * np.eye(4), -jtr)
        except np.linalg.LinAlgError:
            return None
        trial = params + step
        trial_res = residuals(trial)
        trial_rms = rms_of(trial_res)
        if trial_rms < rms:
            params, res = trial, trial_res
            converged = abs(rms - trial_rms) < PNP_TOL
            rms = trial_rms
            lam = max(lam / 3.0, 1e-9)
            if converged:
                break
        else:
            lam = min(lam * 10.0, 1e6)
    return PnPResult(
        position=params[:3].copy(),
        yaw=float(params[3]),
        rms=rms,
        n_points=len(obj),
        t=t,
    )


def save_mask_pgm(m: Mask, path) -> None:
    """Debug dump as a binary portable graymap."""
    with open(path, "wb") as f:
        f.write(f"P5\n{MASK_SIZE} {MASK_SIZE}\n255\n".encode())
        f.write((m.grid * 255).astype(np.uint8).tobytes())
