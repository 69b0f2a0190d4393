"""Binary little-endian PLY export/import of Gaussian scenes (raw parameters)."""

from __future__ import annotations

from pathlib import Path

import numpy as np

from .core import GaussianScene

PROPERTIES = (
    ["x", "y", "z"]
    + [f"scale_{i}" for i in range(3)]
    + [f"rot_{i}" for i in range(4)]
    + ["opacity", "red", "green", "blue"]
)
_DTYPE = np.dtype([(name, "<f4") for name in PROPERTIES])


class PlyFormatError(ValueError):
    pass


def export_ply(scene: GaussianScene, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    cols = np.concatenate(
        [scene.means, scene.log_scales, scene.rotations, scene.opacity_logits[:, None], scene.colors], axis=1
    )
    data = np.empty(len(scene), dtype=_DTYPE)
    for i, name in enumerate(PROPERTIES):
        data[name] = cols[:, i]
    header = ["ply", "format binary_little_endian 1.0", f"element vertex {len(scene)}"]
    header += [f"property float {name}" for name in PROPERTIES]
    header.append("end_header")
    path.write_bytes(("\n".join(header) + "\n").encode("ascii") + data.tobytes())
    return path


def import_ply(path, bound_radius: float = 1.0) -> GaussianScene:
    raw = Path(path).read_bytes()
    end = raw.find(b"end_header\n")
    if not raw.startswith(b"ply\n") or end < 0:
        raise PlyFormatError(f"{path}: not a PLY file")
    lines = raw[:end].decode("ascii").splitlines()
    if len(lines) < 2 or lines[1] != "format binary_little_endian 1.0":
        raise PlyFormatError(f"{path}: unsupported PLY format line {lines[1:2]}")
    count, props = None, []
    for line in lines[2:]:
        parts = line.split()
        if parts[:2] == ["element", "vertex"]:
            count = int(parts[2])
        elif parts[:1] == ["property"]:
            if parts[1] != "float":
                raise PlyFormatError(f"{path}: property {parts[-1]} is {parts[1]}, expected float")
            props.append(parts[2])
        elif parts and parts[0] not in ("comment", "obj_info"):
            raise PlyFormatError(f"{path}: unexpected header line {line!r}")
    if count is None:
        raise PlyFormatError(f"{path}: missing vertex element")
    if props != PROPERTIES:
        raise PlyFormatError(f"{path}: property list {props} does not match the Gaussian layout")
    body = raw[end + len(b"end_header\n"):]
    if len(body) != count * _DTYPE.itemsize:
        raise PlyFormatError(f"{path}: expected {count} vertices, body has {len(body)} bytes")
    data = np.frombuffer(body, dtype=_DTYPE)
    cols = np.stack([data[name].astype(np.float64) for name in PROPERTIES], axis=1)
    return GaussianScene(cols[:, 0:3], cols[:, 3:6], cols[:, 6:10], cols[:, 10], cols[:, 11:14], bound_radius)
