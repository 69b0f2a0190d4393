"""Procedural objects and multi-view RGB + depth datasets on disk.

Layout of a dataset directory::

    manifest.json
    obj_000/object.ply          ground-truth Gaussians
    obj_000/view_000.png        8-bit RGBA (RGB over white, A = coverage)
    obj_000/view_000.depth      DPTH header + float32 depth

Ground truth is rendered with the brute-force reference renderer.
"""

from __future__ import annotations

import colorsys
import json
import math
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image

from .camera import Camera, focal_from_fov, make_orbit_cameras, orbit_camera, select_input_views
from .core import GaussianScene, quat_to_rotmat
from .ply import export_ply, import_ply
from .rasterizer import render_reference

DEPTH_MAGIC = b"DPTH"
BOUND = 0.95
WHITE = (1.0, 1.0, 1.0)


class DataError(RuntimeError):
    """Missing or malformed dataset files."""


@dataclass
class DatasetConfig:
    object_count: int = 2
    views_per_object: int = 84
    input_views: int = 16
    elevation_range: tuple[float, float] = (-5.0, 30.0)  # degrees
    resolution: int = 64
    radius: float = 2.6
    fov_deg: float = 45.0
    seed: int = 0
    kind: str = "train"
    first_object: int = 0

    def __post_init__(self):
        self.elevation_range = tuple(self.elevation_range)
        if self.input_views > self.views_per_object:
            raise ValueError("input_views must not exceed views_per_object")

    @property
    def focal(self) -> float:
        return focal_from_fov(self.resolution, self.fov_deg)

    def to_dict(self) -> dict:
        return asdict(self)


def gen_object(seed: int) -> GaussianScene:
    """3-8 ellipsoidal clusters of 50-400 Gaussians each, means inside the unit sphere."""
    rng = np.random.default_rng(seed)
    k = int(rng.integers(3, 9))
    hue0 = rng.uniform()
    parts = []
    for c in range(k):
        direction = rng.normal(size=3)
        center = direction / np.linalg.norm(direction) * rng.uniform(0.0, 0.6)
        radii = rng.uniform(0.12, 0.35, 3)
        q = rng.normal(size=4)
        rot = quat_to_rotmat(q)
        count = int(rng.integers(50, 401))
        u = rng.normal(size=(count, 3))
        u /= np.linalg.norm(u, axis=1, keepdims=True)
        u *= rng.uniform(size=(count, 1)) ** (1.0 / 3.0)
        means = (u * radii) @ rot.T + center
        norms = np.linalg.norm(means, axis=1, keepdims=True)
        means = np.where(norms > BOUND, means * (BOUND / np.maximum(norms, 1e-12)), means)
        base = np.array(colorsys.hsv_to_rgb((hue0 + c / k) % 1.0, 0.75, 0.85))
        parts.append(
            GaussianScene(
                means,
                np.log(rng.uniform(0.02, 0.06, (count, 3))),
                rng.normal(size=(count, 4)),
                rng.uniform(1.5, 4.0, count),
                np.clip(base + rng.normal(0.0, 0.03, (count, 3)), 0.0, 1.0),
            )
        )
    scene = parts[0]
    for p in parts[1:]:
        scene = scene.concat(p)
    scene.bound_radius = 1.0
    return scene


def write_depth(path, depth: np.ndarray) -> None:
    depth = np.asarray(depth, dtype="<f4")
    h, w = depth.shape
    Path(path).write_bytes(DEPTH_MAGIC + struct.pack("<III", h, w, 0) + depth.tobytes())


def read_depth(path) -> np.ndarray:
    raw = Path(path).read_bytes()
    if raw[:4] != DEPTH_MAGIC:
        raise DataError(f"{path}: bad depth magic")
    h, w, _ = struct.unpack("<III", raw[4:16])
    if len(raw) != 16 + 4 * h * w:
        raise DataError(f"{path}: truncated depth file")
    return np.frombuffer(raw, dtype="<f4", offset=16).reshape(h, w).astype(np.float64)


def write_rgba(path, image: np.ndarray, alpha: np.ndarray) -> None:
    rgba = np.concatenate([image, alpha[..., None]], axis=-1)
    Image.fromarray(np.round(np.clip(rgba, 0.0, 1.0) * 255.0).astype(np.uint8), "RGBA").save(path)


def _unit8(levels: np.ndarray) -> np.ndarray:
    # single-precision levels keep the latent codec round trip bit-exact
    return (levels.astype(np.float32) / np.float32(255.0)).astype(np.float64)


def read_rgba(path) -> tuple[np.ndarray, np.ndarray]:
    arr = _unit8(np.asarray(Image.open(path).convert("RGBA")))
    return arr[..., :3], arr[..., 3]


def quantize(image: np.ndarray) -> np.ndarray:
    return _unit8(np.round(np.clip(image, 0.0, 1.0) * 255.0))


def camera_record(cam: Camera) -> dict:
    return {"azimuth": cam.azimuth, "elevation": cam.elevation, "radius": cam.radius, "focal": cam.focal,
            "width": cam.width, "height": cam.height}


def camera_from_record(rec: dict) -> Camera:
    return orbit_camera(rec["azimuth"], rec["elevation"], rec["radius"], rec["focal"], (rec["width"], rec["height"]))


def _object_draws(cfg: DatasetConfig, i: int) -> tuple[int, float]:
    rng = np.random.default_rng([cfg.seed, cfg.first_object + i])
    obj_seed = int(rng.integers(0, 2**31 - 1))
    lo, hi = cfg.elevation_range
    return obj_seed, float(rng.uniform(lo, hi))


def _render_object(cfg: DatasetConfig, i: int, out_dir: Path) -> dict:
    obj_seed, elev_deg = _object_draws(cfg, i)
    scene = gen_object(obj_seed)
    cams = make_orbit_cameras(cfg.views_per_object, math.radians(elev_deg), cfg.radius, cfg.focal, cfg.resolution)
    obj_dir = out_dir / f"obj_{cfg.first_object + i:03d}"
    obj_dir.mkdir(parents=True, exist_ok=True)
    export_ply(scene, obj_dir / "object.ply")
    images, depths = [], []
    for v, cam in enumerate(cams):
        try:
            out = render_reference(scene, cam, WHITE)
            img_path, depth_path = obj_dir / f"view_{v:03d}.png", obj_dir / f"view_{v:03d}.depth"
            write_rgba(img_path, out.image, out.alpha)
            write_depth(depth_path, out.depth)
        except OSError as exc:
            raise DataError(f"object {i} view {v}: {exc}") from exc
        images.append(str(img_path.relative_to(out_dir)))
        depths.append(str(depth_path.relative_to(out_dir)))
    entry = {
        "id": f"obj_{cfg.first_object + i:03d}",
        "seed": obj_seed,
        "elevation": elev_deg,
        "cameras": [camera_record(c) for c in cams],
        "images": images,
        "depths": depths,
        "ply": str((obj_dir / "object.ply").relative_to(out_dir)),
        "input_views": select_input_views(cfg.views_per_object, cfg.input_views),
    }
    if cfg.kind == "eval":
        entry["conditioning_view"] = 0
        entry["eval_views"] = list(range(1, cfg.views_per_object))
    return entry


def render_dataset(cfg: DatasetConfig, out_dir) -> dict:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    manifest = {"config": cfg.to_dict(), "objects": [_render_object(cfg, i, out_dir) for i in range(cfg.object_count)]}
    (out_dir / "manifest.json").write_text(json.dumps(manifest, indent=1, sort_keys=True))
    return manifest


def make_eval_set(cfg: DatasetConfig, out_dir) -> dict:
    """21 orbit views at one elevation per object; view 0 is the conditioning input."""
    cfg = DatasetConfig(**{**cfg.to_dict(), "views_per_object": 21, "input_views": min(cfg.input_views, 21),
                           "kind": "eval"})
    return render_dataset(cfg, out_dir)


def load_manifest(root) -> dict:
    path = Path(root) / "manifest.json"
    if not path.exists():
        raise DataError(f"missing manifest {path}")
    return json.loads(path.read_text())


@dataclass
class ObjectViews:
    """In-memory copy of one manifest entry."""

    id: str
    cameras: list[Camera]
    images: np.ndarray  # (Q,H,W,3)
    alphas: np.ndarray  # (Q,H,W)
    depths: np.ndarray  # (Q,H,W)
    input_views: list[int]
    scene: GaussianScene | None = None
    meta: dict = field(default_factory=dict)


def load_object(root, entry: dict, with_scene: bool = True) -> ObjectViews:
    root = Path(root)
    images, alphas, depths = [], [], []
    for img_rel, depth_rel in zip(entry["images"], entry["depths"]):
        try:
            img, a = read_rgba(root / img_rel)
            d = read_depth(root / depth_rel)
        except FileNotFoundError as exc:
            raise DataError(f"{entry['id']}: missing file {exc.filename}") from exc
        images.append(img)
        alphas.append(a)
        depths.append(d)
    scene = import_ply(root / entry["ply"]) if with_scene and "ply" in entry else None
    return ObjectViews(entry["id"], [camera_from_record(c) for c in entry["cameras"]], np.stack(images),
                       np.stack(alphas), np.stack(depths), list(entry["input_views"]), scene, entry)
