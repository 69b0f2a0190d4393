"""Orbit cameras, regular view subsetting, and sinusoidal pose encoding.

Conventions: world up is +z, elevation is measured from the xy-plane, and
camera frames follow x-right / y-down / z-forward. Pixel (row i, col j) has
its center at image coordinate (u=j, v=i); the principal point sits at
(W/2, H/2) so the look-at target lands on pixel (H//2, W//2).
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .core import InvalidParameterError

WORLD_UP = np.array([0.0, 0.0, 1.0])
DEFAULT_FOV_DEG = 45.0


def focal_from_fov(height: int, fov_deg: float = DEFAULT_FOV_DEG) -> float:
    return 0.5 * height / math.tan(math.radians(fov_deg) / 2.0)


@dataclass(frozen=True)
class Camera:
    rotation: np.ndarray  # world-to-camera
    translation: np.ndarray
    focal: float
    width: int
    height: int
    azimuth: float = 0.0
    elevation: float = 0.0
    radius: float = 1.0

    @property
    def center(self) -> np.ndarray:
        return -self.rotation.T @ self.translation

    @property
    def principal_point(self) -> tuple[float, float]:
        return self.width / 2.0, self.height / 2.0

    def world_to_camera(self, points: np.ndarray) -> np.ndarray:
        return points @ self.rotation.T + self.translation

    def project(self, points: np.ndarray) -> np.ndarray:
        """Pixel coordinates (u, v) of world points in front of the camera."""
        p = self.world_to_camera(np.atleast_2d(points))
        cx, cy = self.principal_point
        return np.stack([self.focal * p[:, 0] / p[:, 2] + cx, self.focal * p[:, 1] / p[:, 2] + cy], axis=1)

    def pixel_rays(self, rows: int, cols: int) -> tuple[np.ndarray, np.ndarray]:
        """Unit world-space rays through the centers of a rows x cols grid that
        tiles the image; returns (origins, directions), each (rows*cols, 3)."""
        su, sv = self.width / cols, self.height / rows
        u = (np.arange(cols) + 0.5) * su - 0.5
        v = (np.arange(rows) + 0.5) * sv - 0.5
        uu, vv = np.meshgrid(u, v)
        cx, cy = self.principal_point
        d_cam = np.stack([(uu - cx) / self.focal, (vv - cy) / self.focal, np.ones_like(uu)], axis=-1).reshape(-1, 3)
        d_world = d_cam @ self.rotation
        d_world /= np.linalg.norm(d_world, axis=1, keepdims=True)
        origins = np.broadcast_to(self.center, d_world.shape).copy()
        return origins, d_world


def look_at(center: np.ndarray, target: np.ndarray = np.zeros(3), up: np.ndarray = WORLD_UP) -> np.ndarray:
    forward = target - center
    forward = forward / np.linalg.norm(forward)
    right = np.cross(forward, up)
    right /= np.linalg.norm(right)
    down = np.cross(forward, right)
    return np.stack([right, down, forward])


def orbit_camera(azimuth: float, elevation: float, radius: float, focal: float, resolution) -> Camera:
    width, height = (resolution, resolution) if np.isscalar(resolution) else resolution
    center = radius * np.array(
        [math.cos(elevation) * math.cos(azimuth), math.cos(elevation) * math.sin(azimuth), math.sin(elevation)]
    )
    rot = look_at(center)
    return Camera(rot, -rot @ center, float(focal), int(width), int(height), float(azimuth), float(elevation), float(radius))


def make_orbit_cameras(count: int, elevation: float, radius: float, focal: float, resolution) -> list[Camera]:
    if count < 1:
        raise InvalidParameterError(f"camera count must be >= 1, got {count}")
    if radius <= 0:
        raise InvalidParameterError(f"radius must be positive, got {radius}")
    return [orbit_camera(2 * math.pi * i / count, elevation, radius, focal, resolution) for i in range(count)]


def select_input_views(total: int, n: int) -> list[int]:
    """floor(i * total / n) for i < n; non-divisible totals floor-space the picks."""
    if not 1 <= n <= total:
        raise InvalidParameterError(f"need 1 <= n <= total, got n={n}, total={total}")
    return [(i * total) // n for i in range(n)]


def encode_pose(cam: Camera, k: int) -> np.ndarray:
    """[sin(2^j a), cos(2^j a)] for j < k, for a in (azimuth, elevation)."""
    if k < 1:
        raise InvalidParameterError("pose encoding needs k >= 1")
    freqs = 2.0 ** np.arange(k)
    parts = []
    for angle in (cam.azimuth, cam.elevation):
        phase = freqs * angle
        parts.append(np.stack([np.sin(phase), np.cos(phase)], axis=1).reshape(-1))
    return np.concatenate(parts)

