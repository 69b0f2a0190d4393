import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from gsdistill.codec import LatentGrid, decode_latents, encode_views
from gsdistill.data import quantize
from gsdistill.netkit import ShapeError


def fixed_point_images(n, size, bits=30):
    return arrays(np.int64, (n, size, size, 3), elements=st.integers(0, 2**bits)).map(lambda a: a / 2.0**bits)


def test_shapes():
    z = encode_views([np.zeros((64, 64, 3))], 8)
    assert z.shape == (1, 8, 8, 192) and z.resolution == (64, 64)


def test_mid_gray_is_zero():
    assert not encode_views([np.full((16, 16, 3), 0.5)], 4).data.any()
    out = decode_latents(LatentGrid(np.zeros((2, 4, 4, 48)), 4))
    assert len(out) == 2 and np.all(out[0] == 0.5)


@given(fixed_point_images(2, 8), st.sampled_from([1, 2, 4, 8]))
def test_roundtrip_bit_exact(images, p):
    back = np.stack(decode_latents(encode_views(list(images), p)))
    assert np.array_equal(back, images)


@given(arrays(np.float64, (1, 2, 2, 12), elements=st.floats(-1, 1)))
def test_latent_roundtrip_in_range(data):
    z = LatentGrid(data, 2)
    np.testing.assert_allclose(encode_views(decode_latents(z), 2).data, data, atol=1e-15)


def test_eight_bit_levels_roundtrip():
    levels = quantize(np.arange(256.0).reshape(1, 16, 16, 1).repeat(3, -1) / 255.0)
    assert np.array_equal(np.stack(decode_latents(encode_views(list(levels), 4))), levels)


def test_single_entry_maps_to_single_pixel():
    p = 4
    data = np.full((1, 2, 2, 3 * p * p), -1.0)
    cell, k = (1, 0), 3 * (2 * p + 1) + 2  # patch pixel (2, 1), blue
    data[0, cell[0], cell[1], k] = 1.0
    img = decode_latents(LatentGrid(data, p))[0]
    hot = np.argwhere(img == 1.0)
    assert hot.tolist() == [[cell[0] * p + 2, cell[1] * p + 1, 2]]
    assert img.sum() == 1.0


def test_bad_resolution():
    with pytest.raises(ShapeError):
        encode_views([np.zeros((10, 10, 3))], 4)
    with pytest.raises(ShapeError):
        LatentGrid(np.zeros((1, 2, 2, 10)), 2)
