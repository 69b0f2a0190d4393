"""Image metrics (PSNR, SSIM) and point-cloud geometry metrics (Chamfer,
F-score, voxel IoU) with point sampling from Gaussian scenes."""

from __future__ import annotations

import numpy as np
from scipy.ndimage import correlate1d
from scipy.spatial import cKDTree

from .core import GaussianScene, InvalidParameterError, quat_to_rotmat
from .netkit import ShapeError

PSNR_CAP = 99.0
POINTS_PER_CLOUD = 4096
SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
SSIM_C1 = 0.01**2
SSIM_C2 = 0.03**2


def _pair(a, b):
    a, b = np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ShapeError(f"image shapes differ: {a.shape} vs {b.shape}")
    return a, b


def psnr(a, b) -> float:
    a, b = _pair(a, b)
    mse = float(np.mean((a - b) ** 2))
    if mse < 1e-10:
        return PSNR_CAP
    return min(PSNR_CAP, 10.0 * np.log10(1.0 / mse))


def _gaussian_window() -> np.ndarray:
    x = np.arange(SSIM_WINDOW) - SSIM_WINDOW // 2
    w = np.exp(-(x**2) / (2 * SSIM_SIGMA**2))
    return w / w.sum()


def _filter_valid(img: np.ndarray, win: np.ndarray) -> np.ndarray:
    out = correlate1d(correlate1d(img, win, axis=0, mode="constant"), win, axis=1, mode="constant")
    r = SSIM_WINDOW // 2
    return out[r:-r, r:-r]


def ssim(a, b) -> float:
    """Single-scale SSIM, 11x11 Gaussian window (sigma 1.5), mean over channels and valid positions."""
    a, b = _pair(a, b)
    if a.ndim == 2:
        a, b = a[..., None], b[..., None]
    if min(a.shape[:2]) < SSIM_WINDOW:
        raise ShapeError(f"SSIM needs images of at least {SSIM_WINDOW}px, got {a.shape[:2]}")
    win = _gaussian_window()
    vals = []
    for c in range(a.shape[2]):
        x, y = a[..., c], b[..., c]
        mx, my = _filter_valid(x, win), _filter_valid(y, win)
        sxx = _filter_valid(x * x, win) - mx * mx
        syy = _filter_valid(y * y, win) - my * my
        sxy = _filter_valid(x * y, win) - mx * my
        num = (2 * mx * my + SSIM_C1) * (2 * sxy + SSIM_C2)
        den = (mx * mx + my * my + SSIM_C1) * (sxx + syy + SSIM_C2)
        vals.append(np.mean(num / den))
    return float(np.mean(vals))


def sample_points(scene: GaussianScene, n: int = POINTS_PER_CLOUD, seed: int = 0) -> np.ndarray:
    """Pick Gaussians with probability proportional to opacity * volume, then
    draw one point from each pick's 3D normal."""
    if len(scene) == 0:
        raise InvalidParameterError("cannot sample points from an empty scene")
    rng = np.random.default_rng(seed)
    scales = scene.scales
    weight = scene.opacities * np.prod(scales, axis=1)
    idx = rng.choice(len(scene), size=n, p=weight / weight.sum())
    local = rng.standard_normal((n, 3)) * scales[idx]
    rot = quat_to_rotmat(scene.rotations[idx])
    return scene.means[idx] + np.einsum("nij,nj->ni", rot, local)


def _cloud(x) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64).reshape(-1, 3)
    if len(x) == 0:
        raise InvalidParameterError("empty point cloud")
    return x


def nearest_distances(src, dst) -> np.ndarray:
    """Distance from every point of src to its nearest neighbor in dst."""
    d, _ = cKDTree(_cloud(dst)).query(_cloud(src), k=1)
    return d


def nearest_distances_brute(src, dst) -> np.ndarray:
    src, dst = _cloud(src), _cloud(dst)
    return np.sqrt(((src[:, None, :] - dst[None, :, :]) ** 2).sum(-1)).min(axis=1)


def chamfer(a, b) -> float:
    """0.5 * (mean NN distance a->b + mean NN distance b->a), unsquared."""
    return 0.5 * float(nearest_distances(a, b).mean() + nearest_distances(b, a).mean())


def fscore(a, b, tau: float) -> float:
    if tau <= 0:
        raise InvalidParameterError("F-score threshold must be positive")
    precision = float(np.mean(nearest_distances(a, b) <= tau))
    recall = float(np.mean(nearest_distances(b, a) <= tau))
    if precision + recall == 0:
        return 0.0
    return 2 * precision * recall / (precision + recall)


def _voxels(x: np.ndarray, resolution: int, lo: np.ndarray, hi: np.ndarray) -> set:
    inside = np.all((x >= lo) & (x <= hi), axis=1)
    cell = np.floor((x[inside] - lo) / (hi - lo) * resolution).astype(np.int64)
    cell = np.clip(cell, 0, resolution - 1)
    return set(map(tuple, cell))


def iou_voxel(a, b, resolution: int = 32, bounds=((-1.0, -1.0, -1.0), (1.0, 1.0, 1.0))) -> float:
    if resolution < 2:
        raise InvalidParameterError("voxel resolution must be >= 2")
    lo, hi = (np.broadcast_to(np.asarray(v, dtype=np.float64), (3,)) for v in bounds)
    if np.any(hi <= lo):
        raise InvalidParameterError("degenerate voxel bounds")
    va, vb = _voxels(_cloud(a), resolution, lo, hi), _voxels(_cloud(b), resolution, lo, hi)
    union = va | vb
    if not union:
        return 0.0
    return len(va & vb) / len(union)


def default_tau(bound_radius: float = 1.0) -> float:
    """5% of the scene extent (the bounding-sphere diameter)."""
    return 0.05 * 2.0 * bound_radius
