import math

import numpy as np
import pytest
import torch
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from gsdistill.camera import focal_from_fov, make_orbit_cameras
from gsdistill.codec import encode_views
from gsdistill.core import LOG_SCALE_MAX, LOG_SCALE_MIN
from gsdistill.decoder import (
    DecoderConfig,
    GSDecoder,
    decoder_forward,
    extract_condition_features,
    head_activate,
)
from gsdistill.diffrender import render_torch
from gsdistill.netkit import ShapeError

SMALL = dict(trunk_layers=2, trunk_width=32, heads=4, cond_dim=16, cond_patch=8)


def perturb(model, std=0.05, seed=1):
    g = torch.Generator().manual_seed(seed)
    with torch.no_grad():
        for p in model.parameters():
            if p.dim() == 2:
                p.add_(std * torch.randn(p.shape, generator=g, dtype=p.dtype))
    return model


def inputs(cfg, seed=0):
    rng = np.random.default_rng(seed)
    images = rng.uniform(size=(cfg.views, cfg.resolution, cfg.resolution, 3))
    cams = make_orbit_cameras(cfg.views, 0.2, 2.6, focal_from_fov(cfg.resolution), cfg.resolution)
    cond = extract_condition_features(images[0], cfg.cond_patch, cfg.cond_dim)
    return encode_views(list(images), cfg.patch), cond, cams


def test_condition_features():
    img = np.random.default_rng(0).uniform(size=(64, 64, 3))
    a, b = extract_condition_features(img), extract_condition_features(img)
    assert a.tokens.shape == (64, 64) and np.array_equal(a.tokens, b.tokens)
    other = img.copy()
    other[8:16, 16:24] = 0.0  # patch row 1, col 2
    diff = np.abs(extract_condition_features(other).tokens - a.tokens).max(axis=1)
    assert np.flatnonzero(diff).tolist() == [1 * 8 + 2]
    with pytest.raises(ShapeError):
        extract_condition_features(np.zeros((20, 20, 3)))


def test_head_zero():
    g = head_activate(np.zeros(14), np.zeros(3), np.array([0.0, 0, 1]), 1.0, 3.0)
    np.testing.assert_allclose(g.mean, [0, 0, 2.0])
    np.testing.assert_array_equal(g.rotation, [1, 0, 0, 0])
    assert g.opacity == 0.5
    np.testing.assert_array_equal(g.color, 0.5)


def test_head_depth_limit():
    raw = np.zeros(14)
    raw[0] = 60.0
    g = head_activate(raw, np.zeros(3), np.array([1.0, 0, 0]), 1.0, 3.0)
    assert g.mean[0] == pytest.approx(3.0)
    raw[0] = 30.0
    assert head_activate(raw, np.zeros(3), np.array([1.0, 0, 0]), 1.0, 3.0).mean[0] <= 3.0


@given(arrays(np.float64, 14, elements=st.floats(-20, 20)), arrays(np.float64, 3, elements=st.floats(-3, 3)),
       arrays(np.float64, 3, elements=st.floats(-1, 1)).filter(lambda d: np.linalg.norm(d) > 0.1))
def test_head_on_ray(raw, origin, direction):
    direction = direction / np.linalg.norm(direction)
    g = head_activate(raw, origin, direction, 1.6, 3.6)
    assert np.linalg.norm(np.cross(g.mean - origin, direction)) <= 1e-9
    assert 1.6 <= np.dot(g.mean - origin, direction) <= 3.6 + 1e-12
    assert np.all((g.log_scale >= LOG_SCALE_MIN) & (g.log_scale <= LOG_SCALE_MAX))
    assert abs(np.linalg.norm(g.rotation) - 1) < 1e-12 and np.all((g.color >= 0) & (g.color <= 1))


def test_gaussian_count_and_invariants():
    cfg = DecoderConfig(views=4, resolution=64, patch=4, upsample_factor=2, **SMALL)
    lat, cond, cams = inputs(cfg)
    scene = decoder_forward(lat, cond, cams, cfg, GSDecoder(cfg))
    assert len(scene) == 4 * 32 * 32
    scene.validate()
    assert np.allclose(np.linalg.norm(scene.rotations, axis=1), 1.0, atol=1e-6)
    assert np.all((scene.colors >= 0) & (scene.colors <= 1))
    depth = np.linalg.norm(scene.means - cams[0].center, axis=1)[: 32 * 32]
    assert np.all((depth >= cfg.near - 1e-5) & (depth <= cfg.far + 1e-5))


def test_deterministic():
    cfg = DecoderConfig(views=2, resolution=32, **SMALL)
    lat, cond, cams = inputs(cfg)
    a = decoder_forward(lat, cond, cams, cfg, GSDecoder(cfg))
    b = decoder_forward(lat, cond, cams, cfg, GSDecoder(cfg))
    assert np.array_equal(a.means, b.means) and np.array_equal(a.colors, b.colors)


def test_view_count_mismatch():
    cfg = DecoderConfig(views=2, resolution=32, **SMALL)
    lat, cond, cams = inputs(cfg)
    with pytest.raises(ShapeError):
        decoder_forward(lat, cond, cams[:1], cfg, GSDecoder(cfg))


def test_condition_sensitivity():
    cfg = DecoderConfig(views=2, resolution=32, **SMALL)
    lat, cond, cams = inputs(cfg)
    other = extract_condition_features(np.zeros((32, 32, 3)), cfg.cond_patch, cfg.cond_dim)
    model = GSDecoder(cfg)
    # cross-attention output projections start at zero, so cond cannot matter yet
    a, b = (decoder_forward(lat, c, cams, cfg, model) for c in (cond, other))
    assert np.array_equal(a.means, b.means)
    perturb(model)
    a, b = (decoder_forward(lat, c, cams, cfg, model) for c in (cond, other))
    assert np.abs(a.means - b.means).max() > 0


def test_view_permutation_equivariance():
    cfg = DecoderConfig(views=3, resolution=32, **SMALL)
    lat, cond, cams = inputs(cfg)
    model = perturb(GSDecoder(cfg).double())
    perm = [2, 0, 1]
    with torch.no_grad():
        a = model(torch.from_numpy(lat.data), torch.from_numpy(cond.tokens), cams)
        b = model(torch.from_numpy(lat.data[perm]), torch.from_numpy(cond.tokens), [cams[i] for i in perm])
    block = 16 * 16
    for new, old in enumerate(perm):
        for ta, tb in zip(a, b):
            torch.testing.assert_close(tb[new * block:(new + 1) * block], ta[old * block:(old + 1) * block],
                                       rtol=1e-10, atol=1e-10)


def decoder_render_fd(seed=0, entries=3):
    """Worst relative error of analytic vs central-difference gradients of an
    RGB + depth loss through a 2-layer decoder and the rasterizer."""
    cfg = DecoderConfig(views=2, resolution=32, patch=4, **SMALL)
    model = perturb(GSDecoder(cfg).double(), seed=seed + 1)
    lat, cond, cams = inputs(cfg, seed)
    g = torch.Generator().manual_seed(seed)
    latents = torch.from_numpy(lat.data)
    tokens = torch.from_numpy(cond.tokens)
    target = torch.rand(32, 32, 3, dtype=torch.float64, generator=g)
    target_depth = 2.0 * torch.rand(32, 32, dtype=torch.float64, generator=g)

    def loss():
        img, dep, _ = render_torch(model(latents, tokens, cams), cams[0])
        return ((img - target) ** 2).mean() + 0.2 * ((dep - target_depth) ** 2).mean()

    model.zero_grad()
    loss().backward()
    params = dict(model.named_parameters())
    rng = np.random.default_rng(seed)
    worst = 0.0
    for name in ("head.weight", "head.bias", "trunk.0.cross_attn.q.weight", "trunk.1.self_attn.v.weight",
                 "embed.weight", "up_proj.0.weight", "pose_embed.weight"):
        p = params[name]
        flat, grad = p.data.view(-1), p.grad.view(-1)
        for i in rng.choice(flat.numel(), entries, replace=False):
            old = flat[i].item()
            flat[i] = old + 1e-5
            lp = loss().item()
            flat[i] = old - 1e-5
            lm = loss().item()
            flat[i] = old
            num, ana = (lp - lm) / 2e-5, grad[i].item()
            worst = max(worst, abs(num - ana) / max(abs(num), abs(ana), 1e-6))
    return worst


def test_gradient_through_decoder_and_renderer():
    assert decoder_render_fd(0) <= 1e-3


def test_config_validation():
    with pytest.raises(ValueError):
        DecoderConfig(trunk_layers=0)
    with pytest.raises(ValueError):
        DecoderConfig(near=3.0, far=2.0)
    with pytest.raises(ValueError):
        DecoderConfig(upsample_factor=3)
    assert DecoderConfig(upsample_factor=4).latent_size == 16
    assert math.isclose(DecoderConfig().latent_channels, 48)
