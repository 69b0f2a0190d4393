"""Gaussian primitives, scene container, and the rotation/covariance math.

Scenes are stored struct-of-arrays (one array per attribute) because every
consumer (rasterizer, decoder heads, PLY export) works on whole columns.
`Gaussian3D` is the single-element view used where one primitive is handled
at a time.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

SCALE_MIN = 1e-4
SCALE_MAX = 1e1
LOG_SCALE_MIN = float(np.log(SCALE_MIN))
LOG_SCALE_MAX = float(np.log(SCALE_MAX))


class InvalidParameterError(ValueError):
    """Raised when an input violates a documented precondition."""


class InvalidSceneError(ValueError):
    """Raised when Gaussian parameters are non-finite or malformed."""


class ContractViolationError(RuntimeError):
    """Raised when paired calls (forward/backward, optimizer/store) disagree."""


def sigmoid(x):
    x = np.asarray(x, dtype=np.float64)
    # split form avoids overflow in exp for large |x|
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def activate_scale(log_scale):
    return np.clip(np.exp(np.asarray(log_scale, dtype=np.float64)), SCALE_MIN, SCALE_MAX)


def normalize_quat(q):
    q = np.asarray(q, dtype=np.float64)
    norm = np.linalg.norm(q, axis=-1, keepdims=True)
    if np.any(norm <= 1e-8):
        raise InvalidParameterError("quaternion norm must exceed 1e-8")
    return q / norm


def quat_to_rotmat(q) -> np.ndarray:
    """Rotation matrix for a raw (w, x, y, z) quaternion; batched over leading axes."""
    w, x, y, z = np.moveaxis(normalize_quat(q), -1, 0)
    r = np.stack(
        [
            1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y),
            2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x),
            2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y),
        ],
        axis=-1,
    )
    return r.reshape(r.shape[:-1] + (3, 3))


def quat_rotmat_jacobian(qn: np.ndarray) -> np.ndarray:
    """dR/dq for unit quaternions qn (..., 4); returns (..., 4, 3, 3)."""
    w, x, y, z = np.moveaxis(qn, -1, 0)
    zero = np.zeros_like(w)
    dw = [zero, -z, y, z, zero, -x, -y, x, zero]
    dx = [zero, y, z, y, -2 * x, -w, z, w, -2 * x]
    dy = [-2 * y, x, w, x, zero, z, -w, z, -2 * y]
    dz = [-2 * z, -w, x, w, -2 * z, y, x, y, zero]
    jac = np.stack([np.stack(d, axis=-1) for d in (dw, dx, dy, dz)], axis=-2)
    return 2.0 * jac.reshape(jac.shape[:-1] + (3, 3))


@dataclass(frozen=True)
class Gaussian3D:
    mean: np.ndarray
    log_scale: np.ndarray
    rotation: np.ndarray
    opacity_logit: float
    color: np.ndarray

    @property
    def scale(self) -> np.ndarray:
        return activate_scale(self.log_scale)

    @property
    def opacity(self) -> float:
        return float(sigmoid(np.array([self.opacity_logit]))[0])

    @property
    def unit_rotation(self) -> np.ndarray:
        return normalize_quat(self.rotation)


def covariance_from(g: Gaussian3D) -> np.ndarray:
    """World-space covariance R S S^T R^T of a single Gaussian."""
    m = quat_to_rotmat(g.rotation) * g.scale[None, :]
    return m @ m.T


def covariances(log_scales: np.ndarray, rotations: np.ndarray) -> np.ndarray:
    m = quat_to_rotmat(rotations) * activate_scale(log_scales)[:, None, :]
    return m @ np.swapaxes(m, -1, -2)


@dataclass
class GaussianScene:
    """Column-stored set of Gaussians: means (n,3), log_scales (n,3),
    rotations (n,4), opacity_logits (n,), colors (n,3)."""

    means: np.ndarray
    log_scales: np.ndarray
    rotations: np.ndarray
    opacity_logits: np.ndarray
    colors: np.ndarray
    bound_radius: float = field(default=1.0)

    def __post_init__(self):
        self.means = np.asarray(self.means, dtype=np.float64).reshape(-1, 3)
        n = len(self.means)
        self.log_scales = np.asarray(self.log_scales, dtype=np.float64).reshape(n, 3)
        self.rotations = np.asarray(self.rotations, dtype=np.float64).reshape(n, 4)
        self.opacity_logits = np.asarray(self.opacity_logits, dtype=np.float64).reshape(n)
        self.colors = np.asarray(self.colors, dtype=np.float64).reshape(n, 3)

    def __len__(self) -> int:
        return len(self.means)

    @classmethod
    def empty(cls, bound_radius: float = 1.0) -> "GaussianScene":
        return cls(np.zeros((0, 3)), np.zeros((0, 3)), np.zeros((0, 4)), np.zeros(0), np.zeros((0, 3)), bound_radius)

    @classmethod
    def from_gaussians(cls, gaussians, bound_radius: float = 1.0) -> "GaussianScene":
        gaussians = list(gaussians)
        if not gaussians:
            return cls.empty(bound_radius)
        return cls(
            np.stack([g.mean for g in gaussians]),
            np.stack([g.log_scale for g in gaussians]),
            np.stack([g.rotation for g in gaussians]),
            np.array([g.opacity_logit for g in gaussians]),
            np.stack([g.color for g in gaussians]),
            bound_radius,
        )

    def __getitem__(self, i: int) -> Gaussian3D:
        return Gaussian3D(
            self.means[i].copy(), self.log_scales[i].copy(), self.rotations[i].copy(),
            float(self.opacity_logits[i]), self.colors[i].copy(),
        )

    @property
    def gaussians(self) -> list[Gaussian3D]:
        return [self[i] for i in range(len(self))]

    @property
    def scales(self) -> np.ndarray:
        return activate_scale(self.log_scales)

    @property
    def opacities(self) -> np.ndarray:
        return sigmoid(self.opacity_logits)

    def subset(self, idx) -> "GaussianScene":
        return GaussianScene(
            self.means[idx], self.log_scales[idx], self.rotations[idx],
            self.opacity_logits[idx], self.colors[idx], self.bound_radius,
        )

    def concat(self, other: "GaussianScene") -> "GaussianScene":
        return GaussianScene(
            np.concatenate([self.means, other.means]),
            np.concatenate([self.log_scales, other.log_scales]),
            np.concatenate([self.rotations, other.rotations]),
            np.concatenate([self.opacity_logits, other.opacity_logits]),
            np.concatenate([self.colors, other.colors]),
            max(self.bound_radius, other.bound_radius),
        )

    def copy(self) -> "GaussianScene":
        return GaussianScene(
            self.means.copy(), self.log_scales.copy(), self.rotations.copy(),
            self.opacity_logits.copy(), self.colors.copy(), self.bound_radius,
        )

    def is_finite(self) -> bool:
        return all(
            np.all(np.isfinite(a))
            for a in (self.means, self.log_scales, self.rotations, self.opacity_logits, self.colors)
        )

    def validate(self) -> None:
        if not self.is_finite():
            raise InvalidSceneError("scene contains non-finite Gaussian parameters")
        if len(self) and np.any(np.linalg.norm(self.rotations, axis=1) <= 1e-8):
            raise InvalidSceneError("scene contains a near-zero quaternion")
