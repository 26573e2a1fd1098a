"""Frames, rotations, and the monocular camera model.

Conventions used throughout the package:

* World frame is z-down (NED-style): gravity is ``(0, 0, +G)`` and flying
  at altitude ``h`` means ``z = -h``.
* Euler angles are ZYX (yaw, then pitch, then roll). Positive pitch tilts
  the nose up (body x-axis away from the ground).
* The flat-body frame is the world tangent plane rotated by the body yaw.
* Camera axes follow the usual optical convention: x right, y down,
  z along the optical axis. The mount is described by a yaw offset and an
  upward pitch offset relative to the body.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from enum import Enum

import numpy as np

G = 9.81  # m/s^2, local gravitational acceleration


class FrameTag(Enum):
    WORLD = "world"
    FLAT_BODY = "flat_body"
    BODY = "body"
    CAMERA = "camera"


@dataclass(frozen=True)
class Attitude:
    """Euler attitude in radians (roll, pitch, yaw), ZYX convention."""

    roll: float = 0.0
    pitch: float = 0.0
    yaw: float = 0.0

    def as_tuple(self) -> tuple[float, float, float]:
        return (self.roll, self.pitch, self.yaw)


@dataclass(frozen=True)
class Pose:
    """World-frame position (m) plus attitude."""

    position: np.ndarray
    attitude: Attitude

    def __post_init__(self):
        object.__setattr__(self, "position", np.asarray(self.position, dtype=float))


@dataclass(frozen=True)
class CameraModel:
    """Pinhole camera with even-polynomial radial distortion.

    The distortion factor is ``D(r) = 1 + k1*rn^2 + k2*rn^4 + k3*rn^6`` with
    ``rn`` the undistorted pixel radius normalised by half the image width,
    so the coefficients are dimensionless. Negative coefficients give the
    mild barrel curve of a wide-angle lens.
    """

    focal_px: float = 260.0
    cx: float = 180.0
    cy: float = 180.0
    dist_coeffs: tuple[float, float, float] = (-0.02, -0.002, -0.0002)
    mount_yaw: float = math.radians(30.0)
    mount_pitch: float = math.radians(10.0)
    width: int = 360
    height: int = 360

    def __post_init__(self):
        if self.focal_px <= 0:
            raise ValueError(f"focal length must be positive, got {self.focal_px}")
        if self.width != self.height:
            raise ValueError("image must be square after preprocessing")

    @property
    def radius_norm(self) -> float:
        return self.width / 2.0

    def distortion_factor(self, r_px: float | np.ndarray):
        rn2 = (np.asarray(r_px) / self.radius_norm) ** 2
        k1, k2, k3 = self.dist_coeffs
        return 1.0 + rn2 * (k1 + rn2 * (k2 + rn2 * k3))


def wrap_angle(a: float) -> float:
    """Wrap an angle to (-pi, pi]."""
    return math.atan2(math.sin(a), math.cos(a))


def rot_world_from_body(att: Attitude) -> np.ndarray:
    """World-from-body rotation matrix for ZYX Euler angles.

    Proper rotation: det = 1, orthonormal. Columns are the body axes
    expressed in world coordinates.
    """
    cr, sr = math.cos(att.roll), math.sin(att.roll)
    cp, sp = math.cos(att.pitch), math.sin(att.pitch)
    cy, sy = math.cos(att.yaw), math.sin(att.yaw)
    return np.array(
        [
            [cy * cp, cy * sp * sr - sy * cr, cy * sp * cr + sy * sr],
            [sy * cp, sy * sp * sr + cy * cr, sy * sp * cr - cy * sr],
            [-sp, cp * sr, cp * cr],
        ]
    )


def flat_body_from_world(yaw: float, v: np.ndarray) -> np.ndarray:
    """Rotate a world-frame xy vector into the flat-body frame.

    Applies ``[[c, s], [-s, c]]`` for yaw angle ``psi``; the inverse of the
    xy block of :func:`rot_world_from_body` at zero roll/pitch.
    """
    c, s = math.cos(yaw), math.sin(yaw)
    return np.array([c * v[0] + s * v[1], -s * v[0] + c * v[1]])


def world_from_flat_body(yaw: float, v: np.ndarray) -> np.ndarray:
    """Inverse of :func:`flat_body_from_world`."""
    c, s = math.cos(yaw), math.sin(yaw)
    return np.array([c * v[0] - s * v[1], s * v[0] + c * v[1]])


# Camera-to-"camera forward" axis permutation: camera (x right, y down,
# z forward) mapped onto a body-like frame whose x is the optical axis.
_CAM_PERM = np.array([[0.0, 0.0, 1.0], [1.0, 0.0, 0.0], [0.0, 1.0, 0.0]])


def rot_body_from_camera(cam: CameraModel) -> np.ndarray:
    """Camera-to-body rotation from the mount yaw/pitch offsets."""
    cyw, syw = math.cos(cam.mount_yaw), math.sin(cam.mount_yaw)
    cpt, spt = math.cos(cam.mount_pitch), math.sin(cam.mount_pitch)
    rz = np.array([[cyw, -syw, 0.0], [syw, cyw, 0.0], [0.0, 0.0, 1.0]])
    ry = np.array([[cpt, 0.0, spt], [0.0, 1.0, 0.0], [-spt, 0.0, cpt]])
    return rz @ ry @ _CAM_PERM


def rot_world_from_camera(att: Attitude, cam: CameraModel) -> np.ndarray:
    return rot_world_from_body(att) @ rot_body_from_camera(cam)


MIN_DEPTH = 0.05  # m, near-plane cut for projection


def project_point(
    cam: CameraModel, body_pose: Pose, p_world: np.ndarray
) -> np.ndarray | None:
    """Project a world point to distorted pixel coordinates.

    ``body_pose`` is the drone body pose; the camera mount offsets from
    ``cam`` are applied internally. Returns ``None`` for points at or
    behind the near plane (the behind-camera marker).
    """
    r_wc = rot_world_from_camera(body_pose.attitude, cam)
    p_c = r_wc.T @ (np.asarray(p_world, dtype=float) - body_pose.position)
    if p_c[2] <= MIN_DEPTH:
        return None
    xn = p_c[0] / p_c[2]
    yn = p_c[1] / p_c[2]
    r_u = cam.focal_px * math.hypot(xn, yn)
    d = float(cam.distortion_factor(r_u))
    return np.array([cam.cx + cam.focal_px * xn * d, cam.cy + cam.focal_px * yn * d])


def project_points(
    cam: CameraModel, body_pose: Pose, pts_world: np.ndarray
) -> tuple[np.ndarray, np.ndarray]:
    """Vectorised :func:`project_point` for an (N, 3) array.

    Returns ``(pixels (N, 2), valid (N,))``; rows with non-positive depth
    carry NaNs and ``valid=False``.
    """
    pts = np.asarray(pts_world, dtype=float)
    r_wc = rot_world_from_camera(body_pose.attitude, cam)
    p_c = (pts - body_pose.position) @ r_wc
    valid = p_c[:, 2] > MIN_DEPTH
    z = np.where(valid, p_c[:, 2], 1.0)
    xn = p_c[:, 0] / z
    yn = p_c[:, 1] / z
    r_u = cam.focal_px * np.hypot(xn, yn)
    d = cam.distortion_factor(r_u)
    px = np.column_stack(
        [cam.cx + cam.focal_px * xn * d, cam.cy + cam.focal_px * yn * d]
    )
    px[~valid] = np.nan
    return px, valid


UNDISTORT_TOL = 1e-6
UNDISTORT_MAX_ITER = 20


def undistort_pixel(cam: CameraModel, px: np.ndarray) -> np.ndarray | None:
    """Invert the radial distortion, returning the normalized ray (x/z, y/z).

    Fixed-point iteration on the pixel radius; ``None`` when it fails to
    converge within 20 iterations (signals a corrupt corner).
    """
    dx = float(px[0]) - cam.cx
    dy = float(px[1]) - cam.cy
    r_d = math.hypot(dx, dy)
    if r_d < 1e-12:
        return np.zeros(2)
    r_u = r_d
    for _ in range(UNDISTORT_MAX_ITER):
        r_new = r_d / float(cam.distortion_factor(r_u))
        if abs(r_new - r_u) / cam.focal_px < UNDISTORT_TOL:
            d = float(cam.distortion_factor(r_new))
            return np.array([dx / (cam.focal_px * d), dy / (cam.focal_px * d)])
        r_u = r_new
    return None


def undistorted_pixel(cam: CameraModel, px: np.ndarray) -> np.ndarray | None:
    """Distortion-free pixel coordinates of ``px`` (principal + f * ray)."""
    ray = undistort_pixel(cam, px)
    if ray is None:
        return None
    return np.array([cam.cx + cam.focal_px * ray[0], cam.cy + cam.focal_px * ray[1]])


def distort_pixel(cam: CameraModel, px_undistorted: np.ndarray) -> np.ndarray:
    """Forward distortion: map an undistorted pixel back to the raw image."""
    dx = px_undistorted[0] - cam.cx
    dy = px_undistorted[1] - cam.cy
    d = float(cam.distortion_factor(math.hypot(dx, dy)))
    return np.array([cam.cx + dx * d, cam.cy + dy * d])


def euler_rate_matrix(roll: float, pitch: float) -> np.ndarray:
    """Matrix mapping body rates (p, q, r) to Euler angle rates (ZYX)."""
    cr, sr = math.cos(roll), math.sin(roll)
    cp = math.cos(pitch)
    tp = math.tan(pitch)
    return np.array(
        [
            [1.0, sr * tp, cr * tp],
            [0.0, cr, -sr],
            [0.0, sr / cp, cr / cp],
        ]
    )
