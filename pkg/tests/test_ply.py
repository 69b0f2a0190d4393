import numpy as np
import pytest
from conftest import random_scene
from hypothesis import given
from hypothesis import strategies as st

from gsdistill.core import GaussianScene
from gsdistill.ply import PlyFormatError, export_ply, import_ply


@given(st.integers(0, 2**31), st.integers(0, 50))
def test_roundtrip_float32_exact(tmp_path_factory, seed, n):
    scene = random_scene(np.random.default_rng(seed), n)
    path = export_ply(scene, tmp_path_factory.mktemp("ply") / "s.ply")
    back = import_ply(path)
    assert len(back) == n
    for name in ("means", "log_scales", "rotations", "opacity_logits", "colors"):
        assert np.array_equal(getattr(back, name), getattr(scene, name).astype(np.float32).astype(np.float64))
    again = export_ply(back, path.with_name("t.ply"))
    assert again.read_bytes() == path.read_bytes()


def test_header(tmp_path):
    path = export_ply(GaussianScene.empty(), tmp_path / "e.ply")
    raw = path.read_bytes()
    assert raw.startswith(b"ply\nformat binary_little_endian 1.0")
    assert b"element vertex 0" in raw and len(import_ply(path)) == 0


def test_malformed(tmp_path):
    (tmp_path / "a.ply").write_bytes(b"not a ply")
    with pytest.raises(PlyFormatError):
        import_ply(tmp_path / "a.ply")
    good = export_ply(random_scene(np.random.default_rng(0), 3), tmp_path / "g.ply").read_bytes()
    (tmp_path / "b.ply").write_bytes(good.replace(b"property float red", b"property float bogus"))
    with pytest.raises(PlyFormatError):
        import_ply(tmp_path / "b.ply")
    (tmp_path / "c.ply").write_bytes(good.replace(b"binary_little_endian", b"binary_big_endian"))
    with pytest.raises(PlyFormatError):
        import_ply(tmp_path / "c.ply")
    (tmp_path / "d.ply").write_bytes(good[:-8])
    with pytest.raises(PlyFormatError):
        import_ply(tmp_path / "d.ply")
