"""Camera parametrization: orbit poses, pinhole matrices, ray generation.

Conventions (used everywhere in this package):
  * world: right-handed, +y up, scene contained in [-1, 1]^3 around the origin
  * yaw=0, pitch=0 places the camera on the +z axis at distance `radius`,
    looking toward `look_at` with +y up; positive yaw swings toward +x
  * camera frame: +x right, +y up, -z forward (depth in front of the camera
    is a positive -z_cam value)
  * intrinsics: pinhole, square pixels, principal point at the image center
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from functools import lru_cache

import numpy as np


@dataclass(frozen=True)
class CameraPose:
    yaw: float
    pitch: float
    radius: float
    fov_y: float
    look_at: tuple[float, float, float] = (0.0, 0.0, 0.0)

    def __post_init__(self):
        if not (self.radius > 0):
            raise ValueError(f"radius must be positive, got {self.radius}")
        if not (abs(self.pitch) < math.pi / 2):
            raise ValueError(f"|pitch| must be < pi/2, got {self.pitch}")
        if not (0 < self.fov_y < math.pi):
            raise ValueError(f"fov_y must be in (0, pi), got {self.fov_y}")
        for v in (self.yaw, self.pitch, self.radius, self.fov_y, *self.look_at):
            if not math.isfinite(v):
                raise ValueError("pose fields must be finite")

    @property
    def center(self) -> np.ndarray:
        """Camera position in world coordinates."""
        cy, sy = math.cos(self.yaw), math.sin(self.yaw)
        cp, sp = math.cos(self.pitch), math.sin(self.pitch)
        offset = np.array([sy * cp, sp, cy * cp]) * self.radius
        return np.asarray(self.look_at, dtype=np.float64) + offset

    def to_dict(self) -> dict:
        return {
            "yaw": self.yaw,
            "pitch": self.pitch,
            "radius": self.radius,
            "fov_y": self.fov_y,
            "look_at": list(self.look_at),
        }

    @staticmethod
    def from_dict(d: dict) -> "CameraPose":
        return CameraPose(
            yaw=float(d["yaw"]),
            pitch=float(d["pitch"]),
            radius=float(d["radius"]),
            fov_y=float(d["fov_y"]),
            look_at=tuple(float(v) for v in d.get("look_at", (0.0, 0.0, 0.0))),
        )


def pose_to_matrices(pose: CameraPose, image_size: int) -> tuple[np.ndarray, np.ndarray]:
    """Extrinsic (4x4 world-to-camera) and intrinsic (3x3) matrices.

    The rotation block is orthonormal with determinant +1. Focal length in
    pixels follows from fov_y; the image is square (image_size x image_size).
    """
    c = pose.center
    target = np.asarray(pose.look_at, dtype=np.float64)
    forward = target - c
    forward = forward / np.linalg.norm(forward)
    up_world = np.array([0.0, 1.0, 0.0])
    right = np.cross(forward, up_world)
    right = right / np.linalg.norm(right)
    up = np.cross(right, forward)

    # rows of R map world vectors into the camera frame (x right, y up, -z fwd)
    rot = np.stack([right, up, -forward], axis=0)
    extrinsic = np.eye(4)
    extrinsic[:3, :3] = rot
    extrinsic[:3, 3] = -rot @ c

    focal = 0.5 * image_size / math.tan(0.5 * pose.fov_y)
    intrinsic = np.array(
        [
            [focal, 0.0, image_size / 2.0],
            [0.0, focal, image_size / 2.0],
            [0.0, 0.0, 1.0],
        ]
    )
    return extrinsic, intrinsic


@lru_cache(maxsize=256)
def _camera_rays_cached(pose: CameraPose, image_size: int):
    o, d = _camera_rays_impl(pose, image_size)
    o.setflags(write=False)
    d.setflags(write=False)
    return o, d


def camera_rays(pose: CameraPose, image_size: int) -> tuple[np.ndarray, np.ndarray]:
    """Per-pixel ray origins and unit directions in world coordinates.

    Returns (origins, directions), each (H*W, 3), row-major over pixels with
    rays through pixel centers. Cached per (pose, size); arrays are
    read-only.
    """
    return _camera_rays_cached(pose, image_size)


def _camera_rays_impl(pose: CameraPose, image_size: int):
    extrinsic, intrinsic = pose_to_matrices(pose, image_size)
    rot_c2w = extrinsic[:3, :3].T
    center = pose.center

    js, is_ = np.meshgrid(np.arange(image_size), np.arange(image_size), indexing="ij")
    u = (is_.ravel() + 0.5 - intrinsic[0, 2]) / intrinsic[0, 0]
    # pixel row 0 is the top of the image -> +v points down, camera +y is up
    v = -(js.ravel() + 0.5 - intrinsic[1, 2]) / intrinsic[1, 1]
    dirs_cam = np.stack([u, v, -np.ones_like(u)], axis=1)
    dirs = dirs_cam @ rot_c2w.T
    dirs = dirs / np.linalg.norm(dirs, axis=1, keepdims=True)
    origins = np.broadcast_to(center, dirs.shape).copy()
    return origins, dirs


def project_points(points: np.ndarray, pose: CameraPose, image_size: int):
    """Project world points into pixel coordinates.

    Returns (uv, depth): uv is (N, 2) pixel coordinates with (0, 0) at the
    top-left pixel *corner* (so pixel centers sit at half-integers), depth is
    the positive distance along the camera forward axis. Points behind the
    camera get negative depth; callers must treat them as unprojectable.
    """
    extrinsic, intrinsic = pose_to_matrices(pose, image_size)
    pts = np.asarray(points, dtype=np.float64)
    cam = pts @ extrinsic[:3, :3].T + extrinsic[:3, 3]
    depth = -cam[:, 2]
    with np.errstate(divide="ignore", invalid="ignore"):
        u = intrinsic[0, 0] * cam[:, 0] / depth + intrinsic[0, 2]
        v = -intrinsic[1, 1] * cam[:, 1] / depth + intrinsic[1, 2]
    return np.stack([u, v], axis=1), depth
