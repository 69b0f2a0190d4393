"""Multi-view latent to Gaussian scene decoder.

Latent cells of all views are tokens of one sequence (so self-attention mixes
views), each layer also cross-attends to conditioning-image tokens, and an
upsampler alternates pixel shuffle with per-view transformer layers. Every
upsampled pixel emits one Gaussian placed along that pixel's camera ray.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .camera import Camera, encode_pose
from .codec import LatentGrid
from .core import LOG_SCALE_MAX, LOG_SCALE_MIN, Gaussian3D, GaussianScene, sigmoid
from .diffrender import GaussianTensors
from .netkit import Linear, ShapeError, TransformerLayer, pixel_shuffle, pixel_unshuffle, sincos_2d, trunc_normal_

RAW_CHANNELS = 14


@dataclass
class DecoderConfig:
    trunk_layers: int = 4
    trunk_width: int = 256
    heads: int = 4
    upsample_factor: int = 2
    patch: int = 4
    near: float = 1.6
    far: float = 3.6
    views: int = 4
    resolution: int = 64
    cond_patch: int = 8
    cond_dim: int = 64
    pose_k: int = 4
    init_log_scale: float = -3.5
    init_opacity_logit: float = 0.0
    seed: int = 0

    def __post_init__(self):
        if self.trunk_layers < 1:
            raise ValueError("decoder needs at least one trunk layer")
        if not self.near < self.far:
            raise ValueError("near must be < far")
        u = self.upsample_factor
        if u < 1 or u & (u - 1):
            raise ValueError("upsample factor must be a power of two")

    @property
    def latent_channels(self) -> int:
        return 3 * self.patch**2

    @property
    def latent_size(self) -> int:
        return self.resolution // self.patch

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class FeatureTokens:
    tokens: np.ndarray  # (M, D)
    tag: str = "condition"


def extract_condition_features(image, patch: int = 8, dim: int = 64, seed: int = 1234) -> FeatureTokens:
    """Frozen patch embedder: a seeded random projection of each patch plus a
    2D position table."""
    image = np.asarray(image, dtype=np.float64)
    h, w = image.shape[:2]
    if h % patch or w % patch:
        raise ShapeError(f"image {h}x{w} not divisible by patch {patch}")
    patches = pixel_unshuffle(image, patch).reshape(-1, 3 * patch * patch)
    proj = np.random.default_rng(seed).normal(0.0, 1.0 / math.sqrt(3 * patch * patch), (3 * patch * patch, dim))
    tokens = (2.0 * patches - 1.0) @ proj + sincos_2d(h // patch, w // patch, dim)
    return FeatureTokens(tokens, "condition")


def head_activate(raw, ray_origin, ray_direction, near: float, far: float) -> Gaussian3D:
    raw = np.asarray(raw, dtype=np.float64)
    depth = near + sigmoid(raw[0:1])[0] * (far - near)
    rot = raw[4:8] + np.array([1.0, 0.0, 0.0, 0.0])
    return Gaussian3D(
        mean=np.asarray(ray_origin, dtype=np.float64) + depth * np.asarray(ray_direction, dtype=np.float64),
        log_scale=np.clip(raw[1:4], LOG_SCALE_MIN, LOG_SCALE_MAX),
        rotation=rot / np.linalg.norm(rot),
        opacity_logit=float(raw[8]),
        color=sigmoid(raw[9:12]),
    )


def head_activate_torch(raw: torch.Tensor, origins: torch.Tensor, directions: torch.Tensor,
                        near: float, far: float) -> GaussianTensors:
    depth = near + torch.sigmoid(raw[:, 0:1]) * (far - near)
    identity = raw.new_tensor([1.0, 0.0, 0.0, 0.0])
    return GaussianTensors(
        origins + depth * directions,
        raw[:, 1:4].clamp(LOG_SCALE_MIN, LOG_SCALE_MAX),
        F.normalize(raw[:, 4:8] + identity, dim=1),
        raw[:, 8],
        torch.sigmoid(raw[:, 9:12]),
    )


class GSDecoder(nn.Module):
    def __init__(self, cfg: DecoderConfig):
        super().__init__()
        self.cfg = cfg
        gen = torch.Generator().manual_seed(cfg.seed)
        d = cfg.trunk_width
        self.embed = Linear(cfg.latent_channels, d, generator=gen)
        self.pose_embed = Linear(4 * cfg.pose_k, d, generator=gen)
        self.trunk = nn.ModuleList(
            TransformerLayer(d, cfg.heads, cfg.cond_dim, generator=gen) for _ in range(cfg.trunk_layers)
        )
        self.up_proj = nn.ModuleList()
        self.up_layers = nn.ModuleList()
        width = d
        for _ in range(int(math.log2(cfg.upsample_factor))):
            nxt = max(width // 2, cfg.heads * 4)
            self.up_proj.append(Linear(width, 4 * nxt, generator=gen))
            self.up_layers.append(TransformerLayer(nxt, cfg.heads, generator=gen))
            width = nxt
        self.out_width = width
        self.head_norm = nn.LayerNorm(width)
        self.head = Linear(width, RAW_CHANNELS, generator=gen)
        with torch.no_grad():
            self.head.bias[1:4] = cfg.init_log_scale
            self.head.bias[8] = cfg.init_opacity_logit
        self.register_buffer("pos", torch.from_numpy(sincos_2d(cfg.latent_size, cfg.latent_size, d)).float(),
                             persistent=False)

    def rays(self, cameras: list[Camera]) -> tuple[torch.Tensor, torch.Tensor]:
        side = self.cfg.latent_size * self.cfg.upsample_factor
        o, d = zip(*(cam.pixel_rays(side, side) for cam in cameras))
        return torch.from_numpy(np.stack(o)), torch.from_numpy(np.stack(d))

    def forward(self, latents: torch.Tensor, cond: torch.Tensor, cameras: list[Camera]) -> GaussianTensors:
        cfg = self.cfg
        n, h, w, c = latents.shape
        if n != len(cameras):
            raise ShapeError(f"{n} latent views but {len(cameras)} cameras")
        if c != cfg.latent_channels or h != cfg.latent_size or w != cfg.latent_size:
            raise ShapeError(f"latent shape {tuple(latents.shape)} does not match decoder config")
        dtype = self.embed.weight.dtype
        poses = torch.from_numpy(np.stack([encode_pose(cam, cfg.pose_k) for cam in cameras])).to(dtype)
        x = self.embed(latents.to(dtype).reshape(n, h * w, c))
        x = x + self.pos.to(dtype) + self.pose_embed(poses)[:, None, :]
        x = x.reshape(1, n * h * w, -1)
        ctx = cond.to(dtype)[None]
        for layer in self.trunk:
            x = layer(x, ctx)
        x = x.reshape(n, h, w, -1)
        for proj, layer in zip(self.up_proj, self.up_layers):
            x = pixel_shuffle(proj(x), 2)
            _, hh, ww, ch = x.shape
            x = layer(x.reshape(n, hh * ww, ch)).reshape(n, hh, ww, ch)
        raw = self.head(self.head_norm(x)).reshape(-1, RAW_CHANNELS)
        origins, directions = self.rays(cameras)
        return head_activate_torch(raw, origins.reshape(-1, 3).to(dtype), directions.reshape(-1, 3).to(dtype),
                                   cfg.near, cfg.far)


def decoder_forward(latents: LatentGrid, cond: FeatureTokens, cameras: list[Camera], cfg: DecoderConfig,
                    model: GSDecoder) -> GaussianScene:
    if latents.views != cfg.views or len(cameras) != cfg.views:
        raise ShapeError(f"expected {cfg.views} views, got {latents.views} latents / {len(cameras)} cameras")
    with torch.no_grad():
        out = model(torch.from_numpy(np.asarray(latents.data)), torch.from_numpy(cond.tokens), cameras)
    return out.to_scene()


def init_head_std(model: GSDecoder, std: float, seed: int = 0) -> None:
    trunc_normal_(model.head.weight, std, torch.Generator().manual_seed(seed))
