"""Differentiable Gaussian splat rasterizer.

Forward: EWA projection of every Gaussian, 16x16 tile binning, front-to-back
alpha compositing per pixel with early termination. Backward: analytic reverse
of the compositing (per pixel, recomputing the forward front-to-back so no
transmittance is ever recovered by division) followed by the reverse of the
projection, all the way to the raw Gaussian parameters.

`render_reference` composites every splat at every pixel with no tiling and
no termination and serves as the correctness oracle for `render`.
"""

from __future__ import annotations

import hashlib
import math
from dataclasses import dataclass

import numba
import numpy as np

from .camera import Camera
from .core import (
    SCALE_MAX,
    SCALE_MIN,
    ContractViolationError,
    Gaussian3D,
    GaussianScene,
    activate_scale,
    quat_rotmat_jacobian,
    quat_to_rotmat,
    sigmoid,
)

TILE = 16
NEAR_PLANE = 0.2
DILATION = 0.3
ALPHA_MAX = 0.999
# early-termination transmittance; the dropped tail is bounded by T_MIN * max(|color - bg|, depth)
T_MIN = 1e-6
# splats are binned out to the radius where their alpha drops below this
ALPHA_CUTOFF = 1e-12
# below this exponent alpha <= opacity * 1e-12 and the splat is treated as absent at that pixel
SKIP_POWER = math.log(ALPHA_CUTOFF)


@dataclass
class Splat2D:
    mean2d: np.ndarray
    cov2d: np.ndarray
    camera_depth: float
    color: np.ndarray
    opacity: float
    source_index: int


@dataclass
class Projection:
    """Per-Gaussian projected quantities plus what the backward pass reuses."""

    valid: np.ndarray  # (n,) bool, False when culled by the near plane
    p_cam: np.ndarray  # (n,3)
    mean2d: np.ndarray  # (n,2)
    cov2d: np.ndarray  # (n,2,2), dilated
    conic: np.ndarray  # (n,3) inverse cov2d as (a, b, c)
    depth: np.ndarray  # (n,)
    opacity: np.ndarray  # (n,)
    colors: np.ndarray  # (n,3)
    # backward intermediates
    qn: np.ndarray
    rot: np.ndarray
    scale: np.ndarray
    cov3d: np.ndarray
    proj: np.ndarray  # J @ W, (n,2,3)


@dataclass
class RenderOutput:
    image: np.ndarray  # (H,W,3)
    depth: np.ndarray  # (H,W)
    alpha: np.ndarray  # (H,W)
    # transmittance record
    t_final: np.ndarray
    n_last: np.ndarray
    tile_start: np.ndarray | None
    tile_end: np.ndarray | None
    sorted_ids: np.ndarray | None
    projection: Projection | None
    background: np.ndarray
    fingerprint: str


@dataclass
class SceneGradients:
    means: np.ndarray
    log_scales: np.ndarray
    rotations: np.ndarray
    opacity_logits: np.ndarray
    colors: np.ndarray

    def as_dict(self) -> dict[str, np.ndarray]:
        return {
            "means": self.means,
            "log_scales": self.log_scales,
            "rotations": self.rotations,
            "opacity_logits": self.opacity_logits,
            "colors": self.colors,
        }


def _fingerprint(scene: GaussianScene, cam: Camera, background) -> str:
    h = hashlib.sha1()
    for arr in (scene.means, scene.log_scales, scene.rotations, scene.opacity_logits, scene.colors,
                cam.rotation, cam.translation, np.asarray(background, dtype=np.float64)):
        h.update(np.ascontiguousarray(arr, dtype=np.float64).tobytes())
    h.update(f"{cam.focal}/{cam.width}/{cam.height}".encode())
    return h.hexdigest()


def project_scene(scene: GaussianScene, cam: Camera, near: float = NEAR_PLANE) -> Projection:
    n = len(scene)
    qn = scene.rotations / np.linalg.norm(scene.rotations, axis=1, keepdims=True) if n else np.zeros((0, 4))
    rot = quat_to_rotmat(qn) if n else np.zeros((0, 3, 3))
    scale = activate_scale(scene.log_scales)
    m = rot * scale[:, None, :]
    cov3d = m @ np.swapaxes(m, 1, 2)
    p = scene.means @ cam.rotation.T + cam.translation
    z = p[:, 2]
    valid = z > near
    zs = np.where(valid, z, 1.0)
    f = cam.focal
    cx, cy = cam.principal_point
    jac = np.zeros((n, 2, 3))
    jac[:, 0, 0] = f / zs
    jac[:, 0, 2] = -f * p[:, 0] / zs**2
    jac[:, 1, 1] = f / zs
    jac[:, 1, 2] = -f * p[:, 1] / zs**2
    proj = jac @ cam.rotation
    cov2d = proj @ cov3d @ np.swapaxes(proj, 1, 2) + DILATION * np.eye(2)
    det = cov2d[:, 0, 0] * cov2d[:, 1, 1] - cov2d[:, 0, 1] ** 2
    conic = np.stack([cov2d[:, 1, 1] / det, -cov2d[:, 0, 1] / det, cov2d[:, 0, 0] / det], axis=1)
    mean2d = np.stack([f * p[:, 0] / zs + cx, f * p[:, 1] / zs + cy], axis=1)
    return Projection(
        valid, p, mean2d, cov2d, conic, z.copy(), sigmoid(scene.opacity_logits), scene.colors.copy(),
        qn, rot, scale, cov3d, proj,
    )


def project_gaussian(g: Gaussian3D, cam: Camera, near: float = NEAR_PLANE) -> Splat2D | None:
    pr = project_scene(GaussianScene.from_gaussians([g]), cam, near)
    if not pr.valid[0]:
        return None
    return Splat2D(pr.mean2d[0], pr.cov2d[0], float(pr.depth[0]), pr.colors[0], float(pr.opacity[0]), 0)


def depth_order(pr: Projection) -> np.ndarray:
    """Indices of valid splats sorted by camera depth, ties broken by index."""
    idx = np.flatnonzero(pr.valid)
    return idx[np.lexsort((idx, pr.depth[idx]))]


def bin_tiles(pr: Projection, width: int, height: int):
    """Per-tile splat lists sorted by (depth, index); returns (start, end, ids)."""
    ntx, nty = -(-width // TILE), -(-height // TILE)
    ntiles = ntx * nty
    idx = np.flatnonzero(pr.valid & (pr.opacity > ALPHA_CUTOFF))
    if len(idx) == 0:
        empty = np.zeros(ntiles, dtype=np.int64)
        return empty, empty.copy(), np.zeros(0, dtype=np.int64)
    cov = pr.cov2d[idx]
    mid = 0.5 * (cov[:, 0, 0] + cov[:, 1, 1])
    det = cov[:, 0, 0] * cov[:, 1, 1] - cov[:, 0, 1] ** 2
    lam = mid + np.sqrt(np.maximum(mid * mid - det, 0.0))
    radius = np.sqrt(2.0 * np.log(pr.opacity[idx] / ALPHA_CUTOFF) * lam)
    mu = pr.mean2d[idx]
    u0 = np.ceil(mu[:, 0] - radius)
    u1 = np.floor(mu[:, 0] + radius)
    v0 = np.ceil(mu[:, 1] - radius)
    v1 = np.floor(mu[:, 1] + radius)
    on = (u1 >= 0) & (u0 <= width - 1) & (v1 >= 0) & (v0 <= height - 1) & (u0 <= u1) & (v0 <= v1)
    idx, u0, u1, v0, v1 = idx[on], u0[on], u1[on], v0[on], v1[on]
    tx0 = np.clip(u0, 0, width - 1).astype(np.int64) // TILE
    tx1 = np.clip(u1, 0, width - 1).astype(np.int64) // TILE
    ty0 = np.clip(v0, 0, height - 1).astype(np.int64) // TILE
    ty1 = np.clip(v1, 0, height - 1).astype(np.int64) // TILE
    counts = (tx1 - tx0 + 1) * (ty1 - ty0 + 1)
    total = int(counts.sum())
    owner = np.repeat(np.arange(len(idx)), counts)
    local = np.arange(total) - np.repeat(np.cumsum(counts) - counts, counts)
    span_x = (tx1 - tx0 + 1)[owner]
    tile_ids = (ty0[owner] + local // span_x) * ntx + tx0[owner] + local % span_x
    gid = idx[owner]
    order = np.lexsort((gid, pr.depth[gid], tile_ids))
    tile_ids, gid = tile_ids[order], gid[order]
    start = np.searchsorted(tile_ids, np.arange(ntiles), side="left")
    end = np.searchsorted(tile_ids, np.arange(ntiles), side="right")
    return start.astype(np.int64), end.astype(np.int64), gid.astype(np.int64)


@numba.njit(cache=True)
def _composite_forward(height, width, tile_start, tile_end, ids, mean2d, conic, opacity, colors, depth, bg,
                       t_min, image, depth_out, t_final, n_last):
    ntx = (width + TILE - 1) // TILE
    for py in range(height):
        for px in range(width):
            tile = (py // TILE) * ntx + px // TILE
            start = tile_start[tile]
            T = 1.0
            c0 = 0.0
            c1 = 0.0
            c2 = 0.0
            d = 0.0
            last = start
            for k in range(start, tile_end[tile]):
                g = ids[k]
                dx = px - mean2d[g, 0]
                dy = py - mean2d[g, 1]
                power = -0.5 * (conic[g, 0] * dx * dx + 2.0 * conic[g, 1] * dx * dy + conic[g, 2] * dy * dy)
                last = k + 1
                if power < SKIP_POWER:
                    continue
                alpha = opacity[g] * math.exp(power)
                if alpha > ALPHA_MAX:
                    alpha = ALPHA_MAX
                w = alpha * T
                c0 += colors[g, 0] * w
                c1 += colors[g, 1] * w
                c2 += colors[g, 2] * w
                d += depth[g] * w
                T = T * (1.0 - alpha)
                if T < t_min:
                    break
            image[py, px, 0] = c0 + T * bg[0]
            image[py, px, 1] = c1 + T * bg[1]
            image[py, px, 2] = c2 + T * bg[2]
            depth_out[py, px] = d
            t_final[py, px] = T
            n_last[py, px] = last


@numba.njit(cache=True)
def _composite_backward(height, width, tile_start, n_last, ids, mean2d, conic, opacity, colors, depth, bg,
                        t_final, g_image, g_depth, gr_mean2d, gr_conic, gr_opacity, gr_colors, gr_depth):
    ntx = (width + TILE - 1) // TILE
    maxlen = 0
    for py in range(height):
        for px in range(width):
            tile = (py // TILE) * ntx + px // TILE
            n = n_last[py, px] - tile_start[tile]
            if n > maxlen:
                maxlen = n
    alphas = np.empty(maxlen)
    trans = np.empty(maxlen)
    gauss = np.empty(maxlen)
    clamped = np.zeros(maxlen, dtype=np.bool_)
    for py in range(height):
        for px in range(width):
            tile = (py // TILE) * ntx + px // TILE
            start = tile_start[tile]
            n = n_last[py, px] - start
            if n == 0:
                continue
            T = 1.0
            for j in range(n):
                g = ids[start + j]
                dx = px - mean2d[g, 0]
                dy = py - mean2d[g, 1]
                power = -0.5 * (conic[g, 0] * dx * dx + 2.0 * conic[g, 1] * dx * dy + conic[g, 2] * dy * dy)
                if power < SKIP_POWER:
                    alphas[j] = -1.0
                    continue
                gv = math.exp(power)
                a = opacity[g] * gv
                clamped[j] = a > ALPHA_MAX
                if clamped[j]:
                    a = ALPHA_MAX
                alphas[j] = a
                trans[j] = T
                gauss[j] = gv
                T = T * (1.0 - a)
            gi0 = g_image[py, px, 0]
            gi1 = g_image[py, px, 1]
            gi2 = g_image[py, px, 2]
            gd = g_depth[py, px]
            # loss mass composited behind the current splat
            behind = t_final[py, px] * (bg[0] * gi0 + bg[1] * gi1 + bg[2] * gi2)
            for j in range(n - 1, -1, -1):
                a = alphas[j]
                if a < 0.0:
                    continue
                g = ids[start + j]
                w = a * trans[j]
                gr_colors[g, 0] += w * gi0
                gr_colors[g, 1] += w * gi1
                gr_colors[g, 2] += w * gi2
                gr_depth[g] += w * gd
                front = colors[g, 0] * gi0 + colors[g, 1] * gi1 + colors[g, 2] * gi2 + depth[g] * gd
                d_alpha = trans[j] * front - behind / (1.0 - a)
                behind += front * w
                if clamped[j]:
                    continue
                gr_opacity[g] += d_alpha * gauss[j]
                d_power = d_alpha * a
                dx = px - mean2d[g, 0]
                dy = py - mean2d[g, 1]
                gr_mean2d[g, 0] += d_power * (conic[g, 0] * dx + conic[g, 1] * dy)
                gr_mean2d[g, 1] += d_power * (conic[g, 1] * dx + conic[g, 2] * dy)
                gr_conic[g, 0] += -0.5 * d_power * dx * dx
                gr_conic[g, 1] += -d_power * dx * dy
                gr_conic[g, 2] += -0.5 * d_power * dy * dy


@numba.njit(cache=True)
def _composite_reference(height, width, order, mean2d, conic, opacity, colors, depth, bg, image, depth_out, t_final):
    for py in range(height):
        for px in range(width):
            T = 1.0
            c0 = 0.0
            c1 = 0.0
            c2 = 0.0
            d = 0.0
            for k in range(order.shape[0]):
                g = order[k]
                dx = px - mean2d[g, 0]
                dy = py - mean2d[g, 1]
                power = -0.5 * (conic[g, 0] * dx * dx + 2.0 * conic[g, 1] * dx * dy + conic[g, 2] * dy * dy)
                alpha = opacity[g] * math.exp(power)
                if alpha > ALPHA_MAX:
                    alpha = ALPHA_MAX
                w = alpha * T
                c0 += colors[g, 0] * w
                c1 += colors[g, 1] * w
                c2 += colors[g, 2] * w
                d += depth[g] * w
                T = T * (1.0 - alpha)
            image[py, px, 0] = c0 + T * bg[0]
            image[py, px, 1] = c1 + T * bg[1]
            image[py, px, 2] = c2 + T * bg[2]
            depth_out[py, px] = d
            t_final[py, px] = T


def _background(background) -> np.ndarray:
    bg = np.broadcast_to(np.asarray(background, dtype=np.float64), (3,)).copy()
    return bg


def render(scene: GaussianScene, cam: Camera, background=(1.0, 1.0, 1.0), t_min: float = T_MIN) -> RenderOutput:
    """Tiled forward render; returns image, raw alpha-weighted depth, alpha and the backward record."""
    scene.validate()
    bg = _background(background)
    h, w = cam.height, cam.width
    pr = project_scene(scene, cam)
    start, end, ids = bin_tiles(pr, w, h)
    image = np.empty((h, w, 3))
    depth = np.empty((h, w))
    t_final = np.empty((h, w))
    n_last = np.empty((h, w), dtype=np.int64)
    _composite_forward(h, w, start, end, ids, pr.mean2d, pr.conic, pr.opacity, pr.colors, pr.depth, bg,
                       t_min, image, depth, t_final, n_last)
    return RenderOutput(image, depth, 1.0 - t_final, t_final, n_last, start, end, ids, pr, bg,
                        _fingerprint(scene, cam, bg))


def render_reference(scene: GaussianScene, cam: Camera, background=(1.0, 1.0, 1.0)) -> RenderOutput:
    """Every splat at every pixel in exact (depth, index) order, no termination."""
    scene.validate()
    bg = _background(background)
    h, w = cam.height, cam.width
    pr = project_scene(scene, cam)
    order = depth_order(pr).astype(np.int64)
    image = np.empty((h, w, 3))
    depth = np.empty((h, w))
    t_final = np.empty((h, w))
    _composite_reference(h, w, order, pr.mean2d, pr.conic, pr.opacity, pr.colors, pr.depth, bg, image, depth, t_final)
    n_last = np.full((h, w), len(order), dtype=np.int64)
    return RenderOutput(image, depth, 1.0 - t_final, t_final, n_last, None, None, order, pr, bg,
                        _fingerprint(scene, cam, bg))


def _projection_backward(pr: Projection, cam: Camera, g_mean2d, g_conic, g_depth) -> tuple[np.ndarray, ...]:
    """Reverse of project_scene: screen-space gradients to raw parameter gradients."""
    n = len(pr.valid)
    v = pr.valid
    f = cam.focal
    p = pr.p_cam
    z = np.where(v, p[:, 2], 1.0)
    # conic (a, b, c) -> symmetric matrix gradient, then through the inverse
    g_a = np.zeros((n, 2, 2))
    g_a[:, 0, 0] = g_conic[:, 0]
    g_a[:, 0, 1] = g_a[:, 1, 0] = 0.5 * g_conic[:, 1]
    g_a[:, 1, 1] = g_conic[:, 2]
    a_mat = np.empty((n, 2, 2))
    a_mat[:, 0, 0] = pr.conic[:, 0]
    a_mat[:, 0, 1] = a_mat[:, 1, 0] = pr.conic[:, 1]
    a_mat[:, 1, 1] = pr.conic[:, 2]
    g_cov2d = -a_mat @ g_a @ a_mat
    t = pr.proj
    g_cov3d = np.swapaxes(t, 1, 2) @ g_cov2d @ t
    g_t = 2.0 * g_cov2d @ t @ pr.cov3d
    g_jac = g_t @ cam.rotation.T
    g_p = np.zeros((n, 3))
    # mean2d = (f x / z + cx, f y / z + cy)
    g_p[:, 0] += g_mean2d[:, 0] * f / z
    g_p[:, 1] += g_mean2d[:, 1] * f / z
    g_p[:, 2] += -g_mean2d[:, 0] * f * p[:, 0] / z**2 - g_mean2d[:, 1] * f * p[:, 1] / z**2
    # Jacobian entries: J00 = J11 = f/z, J02 = -f x/z^2, J12 = -f y/z^2
    g_p[:, 0] += -g_jac[:, 0, 2] * f / z**2
    g_p[:, 1] += -g_jac[:, 1, 2] * f / z**2
    g_p[:, 2] += (
        -(g_jac[:, 0, 0] + g_jac[:, 1, 1]) * f / z**2
        + 2.0 * g_jac[:, 0, 2] * f * p[:, 0] / z**3
        + 2.0 * g_jac[:, 1, 2] * f * p[:, 1] / z**3
    )
    g_p[:, 2] += g_depth
    g_p[~v] = 0.0
    g_cov3d[~v] = 0.0
    g_means = g_p @ cam.rotation
    # cov3d = M M^T, M = R diag(s)
    m = pr.rot * pr.scale[:, None, :]
    g_m = 2.0 * g_cov3d @ m
    g_scale = np.einsum("nik,nik->nk", g_m, pr.rot)
    unclamped = (pr.scale > SCALE_MIN) & (pr.scale < SCALE_MAX)
    g_log_scales = g_scale * pr.scale * unclamped
    g_rot = g_m * pr.scale[:, None, :]
    g_qn = np.einsum("nij,nkij->nk", g_rot, quat_rotmat_jacobian(pr.qn))
    return g_means, g_log_scales, g_qn


def render_backward(scene: GaussianScene, cam: Camera, out: RenderOutput, d_image, d_depth=None) -> SceneGradients:
    """Gradients of <d_image, image> + <d_depth, depth> w.r.t. the raw scene parameters."""
    if out.tile_start is None or out.projection is None:
        raise ContractViolationError("render_backward needs a record produced by render()")
    if out.fingerprint != _fingerprint(scene, cam, out.background):
        raise ContractViolationError("forward record does not match this scene/camera")
    h, w = cam.height, cam.width
    d_image = np.ascontiguousarray(d_image, dtype=np.float64).reshape(h, w, 3)
    d_depth = np.zeros((h, w)) if d_depth is None else np.ascontiguousarray(d_depth, dtype=np.float64).reshape(h, w)
    pr = out.projection
    n = len(scene)
    gr_mean2d = np.zeros((n, 2))
    gr_conic = np.zeros((n, 3))
    gr_opacity = np.zeros(n)
    gr_colors = np.zeros((n, 3))
    gr_depth = np.zeros(n)
    if n:
        _composite_backward(h, w, out.tile_start, out.n_last, out.sorted_ids, pr.mean2d, pr.conic, pr.opacity,
                            pr.colors, pr.depth, out.background, out.t_final, d_image, d_depth,
                            gr_mean2d, gr_conic, gr_opacity, gr_colors, gr_depth)
    g_means, g_log_scales, g_qn = _projection_backward(pr, cam, gr_mean2d, gr_conic, gr_depth)
    # normalization q -> q / |q|
    norm = np.linalg.norm(scene.rotations, axis=1, keepdims=True) if n else np.ones((0, 1))
    g_rot = (g_qn - pr.qn * np.sum(pr.qn * g_qn, axis=1, keepdims=True)) / norm
    g_logit = gr_opacity * pr.opacity * (1.0 - pr.opacity)
    return SceneGradients(g_means, g_log_scales, g_rot, g_logit, gr_colors)

