"""Lossless latent codec used in place of a learned image autoencoder.

A view of H x W x 3 becomes an (H/p) x (W/p) x 3p^2 grid by space-to-depth,
then values are mapped from [0, 1] to [-1, 1]. Channel k of a cell holds
patch pixel (k // (3p), (k // 3) % p), color channel k % 3.

The affine map is computed in double precision, so the round trip is
bit-exact whenever 2x - 1 is exact, i.e. for values needing at most 52
fractional bits. That covers single-precision values down to 2^-29 and so
every 8-bit image read by the data module.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .netkit import ShapeError, pixel_shuffle, pixel_unshuffle


@dataclass
class LatentGrid:
    data: np.ndarray  # (views, h, w, 3 * p * p)
    patch: int

    def __post_init__(self):
        if self.data.ndim != 4 or self.data.shape[-1] != 3 * self.patch**2:
            raise ShapeError(f"latent of shape {self.data.shape} inconsistent with patch {self.patch}")

    @property
    def views(self) -> int:
        return self.data.shape[0]

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def resolution(self) -> tuple[int, int]:
        return self.data.shape[1] * self.patch, self.data.shape[2] * self.patch


def encode_views(images, p: int) -> LatentGrid:
    stack = np.stack([np.asarray(im, dtype=np.float64) for im in images])
    if stack.ndim != 4 or stack.shape[-1] != 3:
        raise ShapeError(f"expected a list of HxWx3 images, got {stack.shape}")
    h, w = stack.shape[1:3]
    if h % p or w % p:
        raise ShapeError(f"resolution {h}x{w} not divisible by patch {p}")
    return LatentGrid(2.0 * pixel_unshuffle(stack, p) - 1.0, p)


def decode_latents(z: LatentGrid) -> list[np.ndarray]:
    images = np.clip((pixel_shuffle(np.asarray(z.data), z.patch) + 1.0) / 2.0, 0.0, 1.0)
    return list(images)
