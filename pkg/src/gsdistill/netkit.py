"""Small transformer toolkit on top of torch autograd.

Blocks are pre-norm residual with zero-initialized output projections, so a
freshly built block is the identity map. `Linear` carries an optional LoRA
branch that is added to (never merged into) the base product, which keeps a
zero-initialized adapter bit-exact with the base layer.
"""

from __future__ import annotations

import hashlib
import json
import math
from pathlib import Path

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .core import ContractViolationError


class ShapeError(ValueError):
    pass


def trunc_normal_(t: torch.Tensor, std: float, generator: torch.Generator | None = None) -> torch.Tensor:
    with torch.no_grad():
        return nn.init.trunc_normal_(t, std=std, a=-2 * std, b=2 * std, generator=generator)


class Linear(nn.Module):
    def __init__(self, d_in: int, d_out: int, bias: bool = True, zero_init: bool = False,
                 generator: torch.Generator | None = None):
        super().__init__()
        self.d_in, self.d_out = d_in, d_out
        self.weight = nn.Parameter(torch.empty(d_out, d_in))
        self.bias = nn.Parameter(torch.zeros(d_out)) if bias else None
        if zero_init:
            nn.init.zeros_(self.weight)
        else:
            trunc_normal_(self.weight, 0.02, generator)
        self.lora_A: nn.Parameter | None = None
        self.lora_B: nn.Parameter | None = None
        self.lora_scale = 0.0

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        if x.shape[-1] != self.d_in:
            raise ShapeError(f"expected last dim {self.d_in}, got {x.shape[-1]}")
        y = F.linear(x, self.weight, self.bias)
        if self.lora_A is not None:
            y = y + self.lora_scale * F.linear(F.linear(x, self.lora_A), self.lora_B)
        return y

    def merged_weight(self) -> torch.Tensor:
        if self.lora_A is None:
            return self.weight
        return self.weight + self.lora_scale * self.lora_B @ self.lora_A


class AttentionBlock(nn.Module):
    """x + O(softmax(Q K^T / sqrt(d_head)) V); keys/values come from `context`
    when given (cross-attention), otherwise from x itself."""

    def __init__(self, dim: int, heads: int, context_dim: int | None = None,
                 generator: torch.Generator | None = None):
        super().__init__()
        if dim % heads:
            raise ShapeError(f"width {dim} not divisible by {heads} heads")
        self.dim, self.heads = dim, heads
        self.context_dim = context_dim
        ctx = context_dim or dim
        self.norm = nn.LayerNorm(dim)
        self.norm_ctx = nn.LayerNorm(ctx) if context_dim else None
        self.q = Linear(dim, dim, generator=generator)
        self.k = Linear(ctx, dim, generator=generator)
        self.v = Linear(ctx, dim, generator=generator)
        self.o = Linear(dim, dim, zero_init=True)

    def attention_weights(self, x: torch.Tensor, context: torch.Tensor | None = None) -> torch.Tensor:
        q, k, _ = self._qkv(x, context)
        return torch.softmax(q @ k.transpose(-1, -2) / math.sqrt(self.dim // self.heads), dim=-1)

    def _qkv(self, x, context):
        h = self.norm(x)
        if context is None:
            if self.context_dim:
                raise ShapeError("cross-attention block needs a context")
            c = h
        else:
            if context.shape[-1] != (self.context_dim or self.dim):
                raise ShapeError(f"context width {context.shape[-1]} does not match block")
            c = self.norm_ctx(context) if self.norm_ctx is not None else self.norm(context)
        dh = self.dim // self.heads

        def split(t):
            return t.reshape(*t.shape[:-1], self.heads, dh).transpose(-2, -3)

        return split(self.q(h)), split(self.k(c)), split(self.v(c))

    def forward(self, x: torch.Tensor, context: torch.Tensor | None = None) -> torch.Tensor:
        if x.shape[-1] != self.dim:
            raise ShapeError(f"token width {x.shape[-1]} != block width {self.dim}")
        q, k, v = self._qkv(x, context)
        w = torch.softmax(q @ k.transpose(-1, -2) / math.sqrt(self.dim // self.heads), dim=-1)
        out = (w @ v).transpose(-2, -3).reshape(x.shape)
        return x + self.o(out)


class MLPBlock(nn.Module):
    def __init__(self, dim: int, expansion: int = 4, generator: torch.Generator | None = None):
        super().__init__()
        self.dim = dim
        self.norm = nn.LayerNorm(dim)
        self.fc1 = Linear(dim, expansion * dim, generator=generator)
        self.fc2 = Linear(expansion * dim, dim, zero_init=True)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        if x.shape[-1] != self.dim:
            raise ShapeError(f"token width {x.shape[-1]} != block width {self.dim}")
        return x + self.fc2(F.gelu(self.fc1(self.norm(x))))


class TransformerLayer(nn.Module):
    """Self-attention, optional cross-attention to a context, then MLP."""

    def __init__(self, dim: int, heads: int, context_dim: int | None = None,
                 generator: torch.Generator | None = None):
        super().__init__()
        self.self_attn = AttentionBlock(dim, heads, generator=generator)
        self.cross_attn = AttentionBlock(dim, heads, context_dim, generator=generator) if context_dim else None
        self.mlp = MLPBlock(dim, generator=generator)

    def forward(self, x: torch.Tensor, context: torch.Tensor | None = None) -> torch.Tensor:
        x = self.self_attn(x)
        if self.cross_attn is not None:
            x = self.cross_attn(x, context)
        return self.mlp(x)


def pixel_shuffle(grid, r: int):
    """(..., h, w, r*r*c) -> (..., h*r, w*r, c); channel k = (i*r + j)*c + ch."""
    *lead, h, w, ch = grid.shape
    if ch % (r * r):
        raise ShapeError(f"{ch} channels not divisible by r^2={r * r}")
    c = ch // (r * r)
    x = grid.reshape(*lead, h, w, r, r, c)
    n = len(lead)
    perm = list(range(n)) + [n, n + 2, n + 1, n + 3, n + 4]
    x = x.permute(*perm) if isinstance(x, torch.Tensor) else x.transpose(*perm)
    return x.reshape(*lead, h * r, w * r, c)


def pixel_unshuffle(grid, r: int):
    *lead, hh, ww, c = grid.shape
    if hh % r or ww % r:
        raise ShapeError(f"spatial size {hh}x{ww} not divisible by {r}")
    h, w = hh // r, ww // r
    x = grid.reshape(*lead, h, r, w, r, c)
    n = len(lead)
    perm = list(range(n)) + [n, n + 2, n + 1, n + 3, n + 4]
    x = x.permute(*perm) if isinstance(x, torch.Tensor) else x.transpose(*perm)
    return x.reshape(*lead, h, w, r * r * c)


def sincos_2d(h: int, w: int, dim: int) -> np.ndarray:
    """Fixed 2D sine/cosine position table of shape (h*w, dim)."""
    quarter = dim // 4
    freqs = 1.0 / (100.0 ** (np.arange(quarter) / max(quarter, 1)))
    yy, xx = np.meshgrid(np.arange(h, dtype=np.float64), np.arange(w, dtype=np.float64), indexing="ij")
    parts = []
    for coord in (yy.reshape(-1), xx.reshape(-1)):
        ph = coord[:, None] * freqs[None, :]
        parts += [np.sin(ph), np.cos(ph)]
    table = np.concatenate(parts, axis=1)
    if table.shape[1] < dim:
        table = np.pad(table, ((0, 0), (0, dim - table.shape[1])))
    return table


class ParamStore:
    """Named tensors of a module with per-tensor trainable flags and AdamW moments."""

    def __init__(self, module: nn.Module, seed: int = 0):
        self.module = module
        self.seed = seed
        self.moments: dict[str, tuple[torch.Tensor, torch.Tensor]] = {}

    @property
    def tensors(self) -> dict[str, nn.Parameter]:
        return dict(self.module.named_parameters())

    def trainable_names(self) -> list[str]:
        return [n for n, p in self.module.named_parameters() if p.requires_grad]

    def frozen_names(self) -> list[str]:
        return [n for n, p in self.module.named_parameters() if not p.requires_grad]

    def freeze(self, names=None) -> None:
        for n, p in self.module.named_parameters():
            if names is None or n in names:
                p.requires_grad_(False)

    def unfreeze(self, names=None) -> None:
        for n, p in self.module.named_parameters():
            if names is None or n in names:
                p.requires_grad_(True)

    def grads(self) -> dict[str, torch.Tensor]:
        return {
            n: (p.grad if p.grad is not None else torch.zeros_like(p))
            for n, p in self.module.named_parameters()
            if p.requires_grad
        }

    def zero_grad(self) -> None:
        for p in self.module.parameters():
            p.grad = None

    def checksum(self, names=None) -> str:
        h = hashlib.sha256()
        for n, p in sorted(self.module.named_parameters()):
            if names is None or n in names:
                h.update(n.encode())
                h.update(p.detach().cpu().numpy().tobytes())
        return h.hexdigest()

    def num_params(self, trainable_only: bool = False) -> int:
        return sum(p.numel() for p in self.module.parameters() if p.requires_grad or not trainable_only)


def adamw_step(store: ParamStore, grads: dict[str, torch.Tensor], lr: float, beta1: float = 0.9,
               beta2: float = 0.999, eps: float = 1e-8, weight_decay: float = 0.01, step: int = 1) -> ParamStore:
    """One decoupled-weight-decay Adam update; `step` is 1-based for bias correction."""
    params = store.tensors
    trainable = set(store.trainable_names())
    for name in grads:
        if name not in params:
            raise ContractViolationError(f"gradient for unknown tensor {name!r}")
        if name not in trainable:
            raise ContractViolationError(f"gradient supplied for frozen tensor {name!r}")
    missing = trainable - set(grads)
    if missing:
        raise ContractViolationError(f"missing gradients for {sorted(missing)}")
    with torch.no_grad():
        for name in sorted(grads):
            p, g = params[name], grads[name].to(params[name].dtype)
            m, v = store.moments.get(name, (torch.zeros_like(p), torch.zeros_like(p)))
            m = beta1 * m + (1 - beta1) * g
            v = beta2 * v + (1 - beta2) * g * g
            store.moments[name] = (m, v)
            m_hat = m / (1 - beta1**step)
            v_hat = v / (1 - beta2**step)
            p.mul_(1 - lr * weight_decay)
            p.sub_(lr * m_hat / (v_hat.sqrt() + eps))
    return store


def _stem(path) -> Path:
    path = Path(path)
    return path.with_suffix("") if path.suffix in (".bin", ".json") else path


def save_checkpoint(store: ParamStore, path, names=None, meta: dict | None = None) -> None:
    """Write `<stem>.bin` (little-endian float32, tensors back to back) and `<stem>.json` index."""
    stem = _stem(path)
    stem.parent.mkdir(parents=True, exist_ok=True)
    index, offset, chunks = {}, 0, []
    for name, p in store.module.named_parameters():
        if names is not None and name not in names:
            continue
        data = p.detach().cpu().numpy().astype("<f4")
        index[name] = {"shape": list(data.shape), "offset": offset, "trainable": bool(p.requires_grad)}
        chunks.append(data.tobytes())
        offset += data.nbytes
    stem.with_suffix(".bin").write_bytes(b"".join(chunks))
    doc = {"tensors": index, "seed": store.seed, "meta": meta or {}}
    stem.with_suffix(".json").write_text(json.dumps(doc, indent=1, sort_keys=True))


def read_checkpoint(path) -> tuple[dict[str, np.ndarray], dict]:
    stem = _stem(path)
    doc = json.loads(stem.with_suffix(".json").read_text())
    raw = stem.with_suffix(".bin").read_bytes()
    out = {}
    for name, ent in doc["tensors"].items():
        count = int(np.prod(ent["shape"])) if ent["shape"] else 1
        out[name] = np.frombuffer(raw, dtype="<f4", count=count, offset=ent["offset"]).reshape(ent["shape"])
    return out, doc


def load_checkpoint(store: ParamStore, path, strict: bool = True) -> dict:
    tensors, doc = read_checkpoint(path)
    params = store.tensors
    if strict:
        missing = set(params) - set(tensors)
        if missing:
            raise ShapeError(f"checkpoint lacks tensors {sorted(missing)[:5]}")
    with torch.no_grad():
        for name, arr in tensors.items():
            if name not in params:
                raise ShapeError(f"checkpoint tensor {name!r} not in model")
            if tuple(params[name].shape) != arr.shape:
                raise ShapeError(f"{name}: checkpoint shape {arr.shape} != model {tuple(params[name].shape)}")
            params[name].copy_(torch.from_numpy(arr.copy()).to(params[name].dtype))
            params[name].requires_grad_(doc["tensors"][name]["trainable"])
    return doc
