"""torch autograd bridge around the analytic rasterizer."""

from __future__ import annotations

from typing import NamedTuple

import numpy as np
import torch

from .camera import Camera
from .core import GaussianScene
from .rasterizer import render, render_backward


class GaussianTensors(NamedTuple):
    means: torch.Tensor
    log_scales: torch.Tensor
    rotations: torch.Tensor
    opacity_logits: torch.Tensor
    colors: torch.Tensor

    def to_scene(self, bound_radius: float = 1.0) -> GaussianScene:
        return GaussianScene(*(t.detach().cpu().double().numpy() for t in self), bound_radius=bound_radius)

    def view_block(self, start: int, stop: int) -> "GaussianTensors":
        return GaussianTensors(*(t[start:stop] for t in self))


class RenderFunction(torch.autograd.Function):
    @staticmethod
    def forward(ctx, means, log_scales, rotations, opacity_logits, colors, cam, background):
        scene = GaussianScene(*(t.detach().cpu().double().numpy() for t in
                                (means, log_scales, rotations, opacity_logits, colors)))
        out = render(scene, cam, background)
        ctx.scene, ctx.cam, ctx.out = scene, cam, out
        dtype = means.dtype
        alpha = torch.from_numpy(out.alpha).to(dtype)
        ctx.mark_non_differentiable(alpha)
        return torch.from_numpy(out.image).to(dtype), torch.from_numpy(out.depth).to(dtype), alpha

    @staticmethod
    def backward(ctx, g_image, g_depth, g_alpha):
        grads = render_backward(ctx.scene, ctx.cam, ctx.out,
                                g_image.detach().double().numpy(), g_depth.detach().double().numpy())
        dtype = g_image.dtype
        return tuple(torch.from_numpy(np.ascontiguousarray(g)).to(dtype) for g in
                     (grads.means, grads.log_scales, grads.rotations, grads.opacity_logits, grads.colors)) + (None, None)


def render_torch(gaussians: GaussianTensors, cam: Camera, background=(1.0, 1.0, 1.0)):
    """Differentiable (image, depth) plus a detached alpha map."""
    return RenderFunction.apply(*gaussians, cam, tuple(float(b) for b in np.broadcast_to(background, (3,))))
