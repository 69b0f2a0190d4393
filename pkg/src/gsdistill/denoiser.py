"""Toy multi-view latent denoiser: cosine schedule, x0-predicting transformer,
deterministic sampler, and LoRA adapters on its attention projections."""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .camera import Camera, encode_pose
from .codec import LatentGrid, encode_views
from .core import InvalidParameterError
from .decoder import FeatureTokens, extract_condition_features
from .netkit import Linear, ParamStore, ShapeError, TransformerLayer, sincos_2d, trunc_normal_

COSINE_OFFSET = 0.008
ALPHA_BAR_FLOOR = 1e-4


@dataclass
class NoiseSchedule:
    T: int
    alpha_bar: np.ndarray  # (T+1,)


def make_schedule(T: int) -> NoiseSchedule:
    if T < 1:
        raise InvalidParameterError("schedule needs T >= 1")
    s = COSINE_OFFSET
    t = np.arange(T + 1) / T
    f = np.cos((t + s) / (1 + s) * math.pi / 2) ** 2
    # affine floor instead of a hard clip keeps the sequence strictly decreasing for any T
    ab = ALPHA_BAR_FLOOR + (1.0 - ALPHA_BAR_FLOOR) * f / f[0]
    ab[0] = 1.0
    return NoiseSchedule(T, ab)


def add_noise(z_gt, t: int, eps, schedule: NoiseSchedule):
    """sqrt(ab_t) z + sqrt(1 - ab_t) eps; accepts LatentGrid, ndarray or tensor."""
    if not 0 <= t <= schedule.T:
        raise InvalidParameterError(f"timestep {t} outside [0, {schedule.T}]")
    grid = isinstance(z_gt, LatentGrid)
    z = z_gt.data if grid else z_gt
    e = eps.data if isinstance(eps, LatentGrid) else eps
    if tuple(z.shape) != tuple(e.shape):
        raise ShapeError(f"noise shape {tuple(e.shape)} != latent shape {tuple(z.shape)}")
    if t == 0:
        out = z * 1.0
    else:
        ab = schedule.alpha_bar[t]
        out = math.sqrt(ab) * z + math.sqrt(1.0 - ab) * e
    return LatentGrid(out, z_gt.patch) if grid else out


def timestep_embedding(t: float, dim: int) -> np.ndarray:
    half = dim // 2
    freqs = np.exp(-math.log(1000.0) * np.arange(half) / half)
    return np.concatenate([np.sin(t * freqs), np.cos(t * freqs)])


@dataclass
class DenoiserConfig:
    layers: int = 2
    width: int = 128
    heads: int = 4
    patch: int = 4
    resolution: int = 64
    views: int = 4
    cond_patch: int = 8
    cond_dim: int = 64
    pose_k: int = 4
    T: int = 50
    lora_rank: int = 4
    lora_alpha: float = 8.0
    seed: int = 0

    @property
    def latent_channels(self) -> int:
        return 3 * self.patch**2

    @property
    def latent_size(self) -> int:
        return self.resolution // self.patch

    def to_dict(self) -> dict:
        return asdict(self)


class MVDenoiser(nn.Module):
    """Predicts clean latents from [z_t || cond_latent] tokens of all views."""

    def __init__(self, cfg: DenoiserConfig):
        super().__init__()
        self.cfg = cfg
        gen = torch.Generator().manual_seed(cfg.seed)
        d, c = cfg.width, cfg.latent_channels
        self.in_proj = Linear(2 * c, d, generator=gen)
        self.pose_embed = Linear(4 * cfg.pose_k, d, generator=gen)
        self.time_fc1 = Linear(d, d, generator=gen)
        self.time_fc2 = Linear(d, d, generator=gen)
        self.blocks = nn.ModuleList(
            TransformerLayer(d, cfg.heads, cfg.cond_dim, generator=gen) for _ in range(cfg.layers)
        )
        self.out_norm = nn.LayerNorm(d)
        self.out = Linear(d, c, generator=gen)
        self.register_buffer("pos", torch.from_numpy(sincos_2d(cfg.latent_size, cfg.latent_size, d)).float(),
                             persistent=False)

    def forward(self, z_t: torch.Tensor, cond_latent: torch.Tensor, cond_tokens: torch.Tensor,
                poses: torch.Tensor, t: int) -> torch.Tensor:
        n, h, w, c = z_t.shape
        if c != self.cfg.latent_channels or h != self.cfg.latent_size or w != self.cfg.latent_size:
            raise ShapeError(f"latent shape {tuple(z_t.shape)} does not match denoiser config")
        if tuple(cond_latent.shape[-3:]) != (h, w, c):
            raise ShapeError(f"conditioning latent {tuple(cond_latent.shape)} does not match {tuple(z_t.shape)}")
        if poses.shape[0] != n:
            raise ShapeError(f"{poses.shape[0]} poses for {n} views")
        dtype = self.in_proj.weight.dtype
        cond = cond_latent.to(dtype).reshape(1, h, w, c).expand(n, h, w, c)
        x = self.in_proj(torch.cat([z_t.to(dtype), cond], dim=-1).reshape(n, h * w, 2 * c))
        temb = torch.from_numpy(timestep_embedding(float(t), self.cfg.width)).to(dtype)
        temb = self.time_fc2(F.gelu(self.time_fc1(temb)))
        x = x + self.pos.to(dtype) + self.pose_embed(poses.to(dtype))[:, None, :] + temb
        x = x.reshape(1, n * h * w, -1)
        ctx = cond_tokens.to(dtype)[None]
        for block in self.blocks:
            x = block(x, ctx)
        return self.out(self.out_norm(x)).reshape(n, h, w, c)


@dataclass
class LoraAdapter:
    target: str
    module: Linear
    rank: int
    scale: float

    @property
    def A(self) -> torch.Tensor:
        return self.module.lora_A

    @property
    def B(self) -> torch.Tensor:
        return self.module.lora_B

    def num_params(self) -> int:
        return self.A.numel() + self.B.numel()


def attention_targets(model: nn.Module) -> list[str]:
    """Names of every attention Q/K/V/output projection in the model."""
    return [
        name for name, mod in model.named_modules()
        if isinstance(mod, Linear) and name.rsplit(".", 1)[-1] in ("q", "k", "v", "o") and "attn" in name
    ]


def attach_lora(model: nn.Module, targets: list[str], r: int, alpha: float, seed: int = 0) -> list[LoraAdapter]:
    """Freeze every base tensor and hang A (seeded, std 0.02) / B (zero) off each target."""
    if r < 1:
        raise InvalidParameterError("LoRA rank must be >= 1")
    modules = dict(model.named_modules())
    for name in targets:
        if not isinstance(modules.get(name), Linear):
            raise KeyError(f"unknown LoRA target {name!r}")
    for p in model.parameters():
        p.requires_grad_(False)
    gen = torch.Generator().manual_seed(seed)
    adapters = []
    for name in targets:
        lin = modules[name]
        dtype = lin.weight.dtype
        lin.lora_A = nn.Parameter(trunc_normal_(torch.empty(r, lin.d_in, dtype=dtype), 0.02, gen))
        lin.lora_B = nn.Parameter(torch.zeros(lin.d_out, r, dtype=dtype))
        lin.lora_scale = alpha / r
        adapters.append(LoraAdapter(name, lin, r, alpha / r))
    return adapters


def adapter_names(store: ParamStore) -> list[str]:
    return [n for n in store.tensors if ".lora_" in n]


def merge_lora(model: nn.Module) -> None:
    """Fold every adapter into its base weight and drop the branch."""
    with torch.no_grad():
        for mod in model.modules():
            if isinstance(mod, Linear) and mod.lora_A is not None:
                mod.weight.copy_(mod.merged_weight())
                mod.lora_A = None
                mod.lora_B = None
                mod.lora_scale = 0.0


def poses_tensor(cameras: list[Camera], k: int) -> torch.Tensor:
    return torch.from_numpy(np.stack([encode_pose(cam, k) for cam in cameras]))


def denoiser_forward(z_t: LatentGrid, cond_latent: LatentGrid, cond_tokens: FeatureTokens, poses, t: int,
                     model: MVDenoiser) -> LatentGrid:
    with torch.no_grad():
        out = model(torch.from_numpy(np.asarray(z_t.data)), torch.from_numpy(np.asarray(cond_latent.data)),
                    torch.from_numpy(np.asarray(cond_tokens.tokens)), torch.as_tensor(np.asarray(poses)), t)
    return LatentGrid(out.double().numpy(), z_t.patch)


def sample_timesteps(T: int, steps: int) -> list[int]:
    ts = np.round(np.linspace(T, 0, steps + 1)).astype(int)
    return [int(t) for t in ts]


def sample(image, cameras: list[Camera], steps: int, model: MVDenoiser, seed: int,
           schedule: NoiseSchedule | None = None) -> LatentGrid:
    """Deterministic x0-to-x0 sampler starting from seeded noise at t = T."""
    if steps < 1:
        raise InvalidParameterError("sampler needs steps >= 1")
    cfg = model.cfg
    schedule = schedule or make_schedule(cfg.T)
    cond_latent = encode_views([image], cfg.patch)
    tokens = extract_condition_features(image, cfg.cond_patch, cfg.cond_dim)
    poses = poses_tensor(cameras, cfg.pose_k)
    n, s, c = len(cameras), cfg.latent_size, cfg.latent_channels
    rng = np.random.default_rng(seed)
    z = rng.standard_normal((n, s, s, c))
    ts = sample_timesteps(schedule.T, steps)
    z_hat = None
    for i in range(steps):
        t, t_next = ts[i], ts[i + 1]
        z_hat = denoiser_forward(LatentGrid(z, cfg.patch), cond_latent, tokens, poses, t, model).data
        if i == steps - 1 or t_next <= 0:
            break
        ab, ab_next = schedule.alpha_bar[t], schedule.alpha_bar[t_next]
        eps_hat = (z - math.sqrt(ab) * z_hat) / math.sqrt(1.0 - ab)
        z = math.sqrt(ab_next) * z_hat + math.sqrt(1.0 - ab_next) * eps_hat
    return LatentGrid(z_hat, cfg.patch)
