"""Training, distillation, inference and evaluation loops.

Stage one trains the Gaussian decoder on clean latents of each object's input
views, supervised by RGB + depth renders at every dataset view. Stage two
freezes the decoder and a pretrained base denoiser and trains LoRA adapters
on the denoiser with the latent loss plus the decoded-and-rendered 3D loss.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field, fields, is_dataclass
from pathlib import Path

import numpy as np
import torch

from .camera import Camera, focal_from_fov, make_orbit_cameras, select_input_views
from .codec import LatentGrid, encode_views
from .core import GaussianScene
from .data import DatasetConfig, ObjectViews, load_manifest, load_object, make_eval_set, quantize, render_dataset
from .decoder import DecoderConfig, GSDecoder, extract_condition_features
from .denoiser import (
    DenoiserConfig,
    MVDenoiser,
    adapter_names,
    add_noise,
    attach_lora,
    attention_targets,
    make_schedule,
    poses_tensor,
    sample,
)
from .diffrender import GaussianTensors, render_torch
from .losses import LossConfig, depth_loss, depth_mask, loss_2d, loss_3d, loss_distill, rgb_loss
from .metrics import POINTS_PER_CLOUD, chamfer, default_tau, fscore, iou_voxel, psnr, sample_points, ssim
from .netkit import ParamStore, adamw_step, load_checkpoint, save_checkpoint
from .ply import export_ply
from .rasterizer import render_reference

WHITE = (1.0, 1.0, 1.0)
PAPER_TABLE2 = {16: {"psnr": 20.390, "ssim": 0.884}, 8: {"psnr": 19.733, "ssim": 0.877},
                4: {"psnr": 19.548, "ssim": 0.874}}


class NumericalError(RuntimeError):
    pass


@dataclass
class StageConfig:
    steps: int = 2000
    batch: int = 8
    lr: float = 1e-5
    warmup: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.01
    background: str = "white"  # or "random": a fresh uniform RGB background per object and step

    def __post_init__(self):
        if self.background not in ("white", "random"):
            raise ValueError(f"background must be 'white' or 'random', not {self.background!r}")

    def backgrounds(self, seed) -> "BackgroundDraws":
        return BackgroundDraws(self.background == "random", np.random.default_rng(seed))

    def lr_at(self, step: int) -> float:
        if self.warmup and step < self.warmup:
            return self.lr * (step + 1) / self.warmup
        return self.lr


class BackgroundDraws:
    def __init__(self, random: bool, rng: np.random.Generator):
        self.random, self.rng = random, rng

    def next(self) -> tuple[float, float, float]:
        return tuple(float(c) for c in self.rng.uniform(size=3)) if self.random else WHITE


@dataclass
class RunConfig:
    dataset: DatasetConfig = field(default_factory=DatasetConfig)
    eval_dataset: DatasetConfig = field(default_factory=lambda: DatasetConfig(object_count=2, kind="eval", seed=1))
    decoder: DecoderConfig = field(default_factory=DecoderConfig)
    denoiser: DenoiserConfig = field(default_factory=DenoiserConfig)
    loss: LossConfig = field(default_factory=LossConfig)
    stage_one: StageConfig = field(default_factory=lambda: StageConfig(steps=2000, batch=8))
    denoiser_pretrain: StageConfig = field(default_factory=lambda: StageConfig(steps=500, batch=4, lr=1e-3))
    stage_two: StageConfig = field(default_factory=lambda: StageConfig(steps=1000, batch=4))
    holdout: int = 0
    heldout_draws: int = 4
    check_every: int = 1000
    sample_steps: int = 4
    seed: int = 0
    data_dir: str = "data/train"
    eval_dir: str = "data/eval"
    output_dir: str = "runs/default"

    def __post_init__(self):
        n = self.dataset.input_views
        if self.decoder.views != n or self.denoiser.views != n:
            raise ValueError(f"decoder/denoiser views ({self.decoder.views}/{self.denoiser.views}) "
                             f"must equal dataset input_views ({n})")
        for name in ("resolution", "patch", "cond_patch", "cond_dim", "pose_k"):
            if getattr(self.decoder, name) != getattr(self.denoiser, name):
                raise ValueError(f"decoder and denoiser disagree on {name}")
        if self.decoder.resolution != self.dataset.resolution:
            raise ValueError("decoder resolution must match dataset resolution")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, doc: dict) -> "RunConfig":
        return _build(cls, doc)

    @classmethod
    def load(cls, path) -> "RunConfig":
        return cls.from_dict(json.loads(Path(path).read_text()))

    def save(self, path) -> None:
        Path(path).parent.mkdir(parents=True, exist_ok=True)
        Path(path).write_text(json.dumps(self.to_dict(), indent=1, sort_keys=True))

    @property
    def out(self) -> Path:
        return Path(self.output_dir)


def _build(cls, doc: dict):
    known = {f.name: f for f in fields(cls)}
    unknown = set(doc) - set(known)
    if unknown:
        raise ValueError(f"unknown {cls.__name__} fields: {sorted(unknown)}")
    kwargs = {}
    for name, value in doc.items():
        default = known[name].default_factory() if callable(known[name].default_factory) else known[name].default
        kwargs[name] = _build(type(default), value) if is_dataclass(default) else value
    return cls(**kwargs)


def preset(name: str) -> RunConfig:
    """Named configurations. `paper` keeps the published schedule; the others are desk-scale."""
    if name == "paper":
        return RunConfig(
            dataset=DatasetConfig(object_count=1000, views_per_object=84, input_views=16),
            decoder=DecoderConfig(trunk_layers=16, views=16),
            denoiser=DenoiserConfig(views=16),
            stage_one=StageConfig(steps=80_000, batch=128, lr=1e-5),
            stage_two=StageConfig(steps=40_000, batch=32, lr=1e-5),
        )
    if name == "desk":
        return RunConfig(
            dataset=DatasetConfig(object_count=32, views_per_object=84, input_views=16),
            decoder=DecoderConfig(views=16),
            denoiser=DenoiserConfig(views=16),
            stage_one=StageConfig(steps=2000, batch=8, lr=3e-4, warmup=100),
            stage_two=StageConfig(steps=1000, batch=4, lr=1e-4),
            holdout=8,
        )
    if name == "overfit":
        return RunConfig(
            dataset=DatasetConfig(object_count=1, views_per_object=16, input_views=4, resolution=64),
            eval_dataset=DatasetConfig(object_count=1, kind="eval", seed=1, input_views=4),
            decoder=DecoderConfig(trunk_layers=2, trunk_width=128, views=4),
            denoiser=DenoiserConfig(layers=1, width=64, views=4),
            stage_one=StageConfig(steps=400, batch=1, lr=1e-3, warmup=50, weight_decay=0.0),
            denoiser_pretrain=StageConfig(steps=50, batch=1, lr=1e-3),
            stage_two=StageConfig(steps=50, batch=1, lr=1e-4),
            output_dir="runs/overfit",
            data_dir="data/overfit",
            eval_dir="data/overfit_eval",
        )
    if name == "toy":
        return RunConfig(
            dataset=DatasetConfig(object_count=32, views_per_object=8, input_views=4, resolution=32),
            eval_dataset=DatasetConfig(object_count=4, kind="eval", seed=1, input_views=4, resolution=32),
            decoder=DecoderConfig(trunk_layers=2, trunk_width=64, views=4, resolution=32, patch=4, cond_patch=8,
                                  cond_dim=32),
            denoiser=DenoiserConfig(layers=2, width=64, views=4, resolution=32, patch=4, cond_patch=8, cond_dim=32),
            stage_one=StageConfig(steps=1500, batch=4, lr=1e-3, warmup=50, weight_decay=0.0, background="random"),
            denoiser_pretrain=StageConfig(steps=1500, batch=4, lr=1e-3, weight_decay=0.0),
            stage_two=StageConfig(steps=300, batch=4, lr=3e-4, weight_decay=0.0, background="random"),
            holdout=8,
            check_every=100,
            output_dir="runs/toy",
            data_dir="data/toy",
            eval_dir="data/toy_eval",
        )
    raise KeyError(f"unknown preset {name!r}; choose paper, desk, overfit or toy")


# ---------------------------------------------------------------- data access


class ObjectCache:
    def __init__(self, root, with_scene: bool = True):
        self.root = Path(root)
        self.manifest = load_manifest(self.root)
        self._cache: dict[int, ObjectViews] = {}
        self.with_scene = with_scene

    def __len__(self) -> int:
        return len(self.manifest["objects"])

    def __getitem__(self, i: int) -> ObjectViews:
        if i not in self._cache:
            self._cache[i] = load_object(self.root, self.manifest["objects"][i], self.with_scene)
        return self._cache[i]


def split_objects(count: int, holdout: int) -> tuple[list[int], list[int]]:
    """The last `holdout` objects are held out."""
    if holdout >= count:
        raise ValueError(f"holdout {holdout} leaves no training objects out of {count}")
    return list(range(count - holdout)), list(range(count - holdout, count))


def input_indices(cfg: RunConfig, obj: ObjectViews) -> list[int]:
    return select_input_views(len(obj.cameras), cfg.dataset.input_views)


@dataclass
class Conditioning:
    latents: torch.Tensor  # (N,h,w,C) clean latents of the input views
    cond_latent: torch.Tensor  # (h,w,C)
    tokens: torch.Tensor  # (M,D)
    cameras: list[Camera]


def conditioning(cfg: RunConfig, obj: ObjectViews) -> Conditioning:
    idx = input_indices(cfg, obj)
    image_r = obj.images[idx[0]]
    z = encode_views(obj.images[idx], cfg.decoder.patch)
    return Conditioning(
        torch.from_numpy(z.data),
        torch.from_numpy(encode_views([image_r], cfg.decoder.patch).data[0]),
        torch.from_numpy(extract_condition_features(image_r, cfg.decoder.cond_patch, cfg.decoder.cond_dim).tokens),
        [obj.cameras[i] for i in idx],
    )


def render_loss(gs: GaussianTensors, obj: ObjectViews, loss_cfg: LossConfig, views=None, background=WHITE):
    """(L_3D, L_rgb, L_depth) of a decoded scene against the object's GT views.

    GT images are stored over white; for another background they are
    recomposited through the stored alpha."""
    views = range(len(obj.cameras)) if views is None else views
    images, depths = [], []
    for v in views:
        img, dep, _ = render_torch(gs, obj.cameras[v], background)
        images.append(img)
        depths.append(dep)
    views = list(views)
    dtype = images[0].dtype
    gt = obj.images[views]
    if tuple(background) != WHITE:
        gt = gt + (1.0 - obj.alphas[views])[..., None] * (np.asarray(background) - 1.0)
    gt_img = torch.from_numpy(gt).to(dtype)
    gt_depth = torch.from_numpy(obj.depths[views]).to(dtype)
    mask = torch.from_numpy(depth_mask(obj.alphas[views]))
    l_rgb = rgb_loss(torch.stack(images), gt_img)
    l_depth = depth_loss(torch.stack(depths), gt_depth, mask)
    return loss_3d(l_rgb, l_depth, loss_cfg), l_rgb, l_depth


def _check_finite(value: float, what: str, step: int) -> None:
    if not math.isfinite(value):
        raise NumericalError(f"non-finite {what} at step {step}")


class JsonlLog:
    def __init__(self, path):
        self.path = Path(path)
        self.path.parent.mkdir(parents=True, exist_ok=True)
        self.path.write_text("")

    def write(self, record: dict) -> None:
        with self.path.open("a") as fh:
            fh.write(json.dumps(record, sort_keys=True) + "\n")


def read_log(path) -> list[dict]:
    return [json.loads(line) for line in Path(path).read_text().splitlines() if line.strip()]


def _setup() -> None:
    torch.use_deterministic_algorithms(True)


# ---------------------------------------------------------------- stage one


def build_decoder(cfg: RunConfig) -> GSDecoder:
    return GSDecoder(cfg.decoder)


def decoder_object_loss(model: GSDecoder, cfg: RunConfig, obj: ObjectViews, background=WHITE):
    cond = conditioning(cfg, obj)
    gs = model(cond.latents, cond.tokens, cond.cameras)
    return render_loss(gs, obj, cfg.loss, background=background)


def train_decoder(cfg: RunConfig, data: ObjectCache | None = None) -> Path:
    """Stage one. Writes decoder checkpoint, JSON-lines log and the effective config."""
    _setup()
    data = data or ObjectCache(cfg.data_dir, with_scene=False)
    train_ids, _ = split_objects(len(data), cfg.holdout)
    out = cfg.out
    out.mkdir(parents=True, exist_ok=True)
    cfg.save(out / "config.json")
    model = build_decoder(cfg)
    store = ParamStore(model, cfg.decoder.seed)
    log = JsonlLog(out / "decoder_log.jsonl")
    rng = np.random.default_rng([cfg.seed, 1])
    st = cfg.stage_one
    backgrounds = st.backgrounds([cfg.seed, 1, 1])
    for step in range(st.steps):
        batch = rng.choice(train_ids, size=min(st.batch, len(train_ids)), replace=False)
        store.zero_grad()
        totals = np.zeros(3)
        for i in sorted(batch.tolist()):
            l3d, l_rgb, l_depth = decoder_object_loss(model, cfg, data[i], backgrounds.next())
            (l3d / len(batch)).backward()
            totals += [l3d.item(), l_rgb.item(), l_depth.item()]
        totals /= len(batch)
        _check_finite(totals[0], "decoder loss", step)
        lr = st.lr_at(step)
        adamw_step(store, store.grads(), lr, st.beta1, st.beta2, st.eps, st.weight_decay, step + 1)
        log.write({"step": step, "loss_3d": totals[0], "rgb": totals[1], "depth": totals[2],
                   "lambda_depth": cfg.loss.lambda_depth, "lr": lr, "objects": sorted(batch.tolist())})
    save_checkpoint(store, out / "decoder", meta={"decoder": cfg.decoder.to_dict()})
    return out / "decoder"


def load_decoder(cfg: RunConfig, path=None) -> GSDecoder:
    model = build_decoder(cfg)
    load_checkpoint(ParamStore(model), path or cfg.out / "decoder")
    return model


# ---------------------------------------------------------------- base denoiser


def build_denoiser(cfg: RunConfig) -> MVDenoiser:
    return MVDenoiser(cfg.denoiser)


def _noise_draw(rng: np.random.Generator, schedule, shape) -> tuple[int, np.ndarray]:
    t = int(rng.integers(1, schedule.T + 1))
    return t, rng.standard_normal(shape)


def denoise_object(model: MVDenoiser, cfg: RunConfig, obj: ObjectViews, t: int, eps: np.ndarray, schedule):
    """(z_hat, z_gt, conditioning) for one object at timestep t and noise eps."""
    cond = conditioning(cfg, obj)
    z_gt = cond.latents
    z_t = add_noise(z_gt, t, torch.from_numpy(eps), schedule)
    poses = poses_tensor(cond.cameras, cfg.denoiser.pose_k)
    return model(z_t, cond.cond_latent, cond.tokens, poses, t), z_gt, cond


def train_denoiser(cfg: RunConfig, data: ObjectCache | None = None) -> Path:
    """Base denoiser pretraining with the latent loss only (stand-in for a pretrained prior)."""
    _setup()
    data = data or ObjectCache(cfg.data_dir, with_scene=False)
    train_ids, _ = split_objects(len(data), cfg.holdout)
    out = cfg.out
    out.mkdir(parents=True, exist_ok=True)
    cfg.save(out / "config.json")
    model = build_denoiser(cfg)
    store = ParamStore(model, cfg.denoiser.seed)
    schedule = make_schedule(cfg.denoiser.T)
    log = JsonlLog(out / "denoiser_log.jsonl")
    rng = np.random.default_rng([cfg.seed, 2])
    st = cfg.denoiser_pretrain
    shape = (cfg.denoiser.views, cfg.denoiser.latent_size, cfg.denoiser.latent_size, cfg.denoiser.latent_channels)
    for step in range(st.steps):
        batch = rng.choice(train_ids, size=min(st.batch, len(train_ids)), replace=False)
        store.zero_grad()
        total = 0.0
        for i in sorted(batch.tolist()):
            t, eps = _noise_draw(rng, schedule, shape)
            z_hat, z_gt, _ = denoise_object(model, cfg, data[i], t, eps, schedule)
            l2d = loss_2d(z_hat, z_gt.to(z_hat.dtype))
            (l2d / len(batch)).backward()
            total += l2d.item() / len(batch)
        _check_finite(total, "denoiser loss", step)
        lr = st.lr_at(step)
        adamw_step(store, store.grads(), lr, st.beta1, st.beta2, st.eps, st.weight_decay, step + 1)
        log.write({"step": step, "loss_2d": total, "lr": lr})
    save_checkpoint(store, out / "denoiser", meta={"denoiser": cfg.denoiser.to_dict()})
    return out / "denoiser"


def load_denoiser(cfg: RunConfig, path=None, adapters=None) -> MVDenoiser:
    model = build_denoiser(cfg)
    load_checkpoint(ParamStore(model), path or cfg.out / "denoiser", strict=True)
    if adapters is not None:
        attach_lora(model, attention_targets(model), cfg.denoiser.lora_rank, cfg.denoiser.lora_alpha, cfg.seed)
        load_checkpoint(ParamStore(model), adapters, strict=False)
    return model


# ---------------------------------------------------------------- stage two


def distill_step_losses(denoiser, decoder, cfg: RunConfig, obj: ObjectViews, t: int, eps, schedule,
                        background=WHITE):
    z_hat, z_gt, cond = denoise_object(denoiser, cfg, obj, t, eps, schedule)
    l2d = loss_2d(z_hat, z_gt.to(z_hat.dtype))
    gs = decoder(z_hat, cond.tokens, cond.cameras)
    l3d, _, _ = render_loss(gs, obj, cfg.loss, background=background)
    return l2d, l3d, gs


def heldout_evaluation(denoiser, decoder, cfg: RunConfig, data: ObjectCache, ids: list[int]) -> dict:
    """Mean L_2D, L_3D and Chamfer over fixed (t, noise) draws on the given objects."""
    schedule = make_schedule(cfg.denoiser.T)
    shape = (cfg.denoiser.views, cfg.denoiser.latent_size, cfg.denoiser.latent_size, cfg.denoiser.latent_channels)
    l2ds, l3ds, cds = [], [], []
    with torch.no_grad():
        for i in ids:
            obj = data[i]
            rng = np.random.default_rng([cfg.seed, 7, i])
            gt_points = sample_points(obj.scene, POINTS_PER_CLOUD, seed=i)
            for k in range(cfg.heldout_draws):
                t, eps = _noise_draw(rng, schedule, shape)
                l2d, l3d, gs = distill_step_losses(denoiser, decoder, cfg, obj, t, eps, schedule)
                l2ds.append(l2d.item())
                l3ds.append(l3d.item())
                cds.append(chamfer(sample_points(gs.to_scene(), POINTS_PER_CLOUD, seed=1000 + k), gt_points))
    return {"loss_2d": float(np.mean(l2ds)), "loss_3d": float(np.mean(l3ds)), "chamfer": float(np.mean(cds))}


def distill(cfg: RunConfig, decoder_ckpt=None, denoiser_ckpt=None, data: ObjectCache | None = None) -> dict:
    """Stage two: LoRA on the denoiser, decoder and base denoiser frozen and checksummed."""
    _setup()
    data = data or ObjectCache(cfg.data_dir, with_scene=True)
    train_ids, held_ids = split_objects(len(data), cfg.holdout)
    out = cfg.out
    out.mkdir(parents=True, exist_ok=True)
    cfg.save(out / "config.json")
    decoder = load_decoder(cfg, decoder_ckpt)
    dec_store = ParamStore(decoder)
    dec_store.freeze()
    denoiser = load_denoiser(cfg, denoiser_ckpt)
    store = ParamStore(denoiser, cfg.seed)
    base_names = list(store.tensors)
    attach_lora(denoiser, attention_targets(denoiser), cfg.denoiser.lora_rank, cfg.denoiser.lora_alpha, cfg.seed)
    frozen = {"decoder": dec_store.checksum(), "denoiser": store.checksum(base_names)}

    def verify(step):
        now = {"decoder": dec_store.checksum(), "denoiser": store.checksum(base_names)}
        if now != frozen:
            raise NumericalError(f"frozen tensors changed by step {step}: {now} vs {frozen}")

    summary = {"frozen_checksums": frozen, "lambda_3d": cfg.loss.lambda_3d}
    if held_ids:
        summary["heldout_init"] = heldout_evaluation(denoiser, decoder, cfg, data, held_ids)
    schedule = make_schedule(cfg.denoiser.T)
    shape = (cfg.denoiser.views, cfg.denoiser.latent_size, cfg.denoiser.latent_size, cfg.denoiser.latent_channels)
    log = JsonlLog(out / "distill_log.jsonl")
    rng = np.random.default_rng([cfg.seed, 3])
    st = cfg.stage_two
    backgrounds = st.backgrounds([cfg.seed, 3, 1])
    for step in range(st.steps):
        batch = rng.choice(train_ids, size=min(st.batch, len(train_ids)), replace=False)
        store.zero_grad()
        dec_store.zero_grad()
        totals = np.zeros(3)
        for i in sorted(batch.tolist()):
            t, eps = _noise_draw(rng, schedule, shape)
            l2d, l3d, _ = distill_step_losses(denoiser, decoder, cfg, data[i], t, eps, schedule, backgrounds.next())
            total = loss_distill(l2d, l3d, cfg.loss)
            (total / len(batch)).backward()
            totals += [total.item(), l2d.item(), l3d.item()]
        totals /= len(batch)
        _check_finite(totals[0], "distillation loss", step)
        lr = st.lr_at(step)
        adamw_step(store, store.grads(), lr, st.beta1, st.beta2, st.eps, st.weight_decay, step + 1)
        log.write({"step": step, "loss_distill": totals[0], "loss_2d": totals[1], "loss_3d": totals[2],
                   "lambda_3d": cfg.loss.lambda_3d, "lambda_depth": cfg.loss.lambda_depth, "lr": lr})
        if (step + 1) % cfg.check_every == 0:
            verify(step)
    verify(st.steps)
    if held_ids:
        summary["heldout_final"] = heldout_evaluation(denoiser, decoder, cfg, data, held_ids)
    save_checkpoint(store, out / "adapters", names=adapter_names(store), meta={"targets": attention_targets(denoiser)})
    (out / "distill_summary.json").write_text(json.dumps(summary, indent=1, sort_keys=True))
    return summary


# ---------------------------------------------------------------- inference & evaluation


def input_cameras(cfg: RunConfig, elevation: float, views: int | None = None) -> list[Camera]:
    ds = cfg.dataset
    return make_orbit_cameras(views or ds.input_views, elevation, ds.radius, focal_from_fov(ds.resolution, ds.fov_deg),
                              ds.resolution)


def infer(image: np.ndarray, cameras: list[Camera], decoder: GSDecoder, denoiser: MVDenoiser, steps: int,
          seed: int) -> tuple[GaussianScene, list[np.ndarray], LatentGrid]:
    """Sample multi-view latents from one image and decode them to Gaussians."""
    cfg_d = decoder.cfg
    if image.shape[:2] != (cfg_d.resolution, cfg_d.resolution):
        raise ValueError(f"image is {image.shape[:2]}, model expects {cfg_d.resolution}px")
    z0 = sample(image, cameras, steps, denoiser, seed)
    tokens = extract_condition_features(image, cfg_d.cond_patch, cfg_d.cond_dim)
    with torch.no_grad():
        gs = decoder(torch.from_numpy(z0.data), torch.from_numpy(tokens.tokens), cameras)
    scene = gs.to_scene()
    renders = [render_reference(scene, cam, WHITE).image for cam in cameras]
    return scene, renders, z0


def evaluate_scene(scene: GaussianScene, obj: ObjectViews, eval_views: list[int], seed: int = 0) -> dict:
    """Appearance metrics at the held-out views plus geometry metrics on 4096-point clouds."""
    per_view = []
    for v in eval_views:
        img = quantize(render_reference(scene, obj.cameras[v], WHITE).image)
        per_view.append({"view": v, "psnr": psnr(img, obj.images[v]), "ssim": ssim(img, obj.images[v])})
    pred = sample_points(scene, POINTS_PER_CLOUD, seed)
    gt = sample_points(obj.scene, POINTS_PER_CLOUD, seed)
    bound = obj.scene.bound_radius
    agg = {
        "psnr": float(np.mean([p["psnr"] for p in per_view])),
        "ssim": float(np.mean([p["ssim"] for p in per_view])),
        "chamfer": chamfer(pred, gt),
        "iou": iou_voxel(pred, gt, 32, ((-bound,) * 3, (bound,) * 3)),
        "fscore": fscore(pred, gt, default_tau(bound)),
    }
    return {"object": obj.id, "per_view": per_view, "aggregate": agg, "points": POINTS_PER_CLOUD}


def evaluate_pipeline(cfg: RunConfig, decoder: GSDecoder, denoiser: MVDenoiser, eval_data: ObjectCache) -> dict:
    """Run single-image inference from each eval object's conditioning view and score it."""
    reports = []
    for i in range(len(eval_data)):
        obj = eval_data[i]
        entry = eval_data.manifest["objects"][i]
        cond_view = entry.get("conditioning_view", 0)
        cams = input_cameras(cfg, obj.cameras[cond_view].elevation)
        scene, _, _ = infer(obj.images[cond_view], cams, decoder, denoiser, cfg.sample_steps, cfg.seed + i)
        reports.append(evaluate_scene(scene, obj, entry.get("eval_views", list(range(1, len(obj.cameras)))),
                                      seed=cfg.seed))
    keys = ("psnr", "ssim", "chamfer", "iou", "fscore")
    agg = {k: float(np.mean([r["aggregate"][k] for r in reports])) for k in keys}
    return {"objects": reports, "aggregate": agg, "points": POINTS_PER_CLOUD}


def generate_data(cfg: RunConfig) -> tuple[dict, dict]:
    train = render_dataset(cfg.dataset, cfg.data_dir)
    evalset = make_eval_set(cfg.eval_dataset, cfg.eval_dir)
    return train, evalset


def _with_frames(cfg: RunConfig, n: int) -> RunConfig:
    doc = cfg.to_dict()
    doc["dataset"]["input_views"] = n
    doc["eval_dataset"]["input_views"] = min(n, 21)
    doc["decoder"]["views"] = n
    doc["denoiser"]["views"] = n
    doc["output_dir"] = str(Path(cfg.output_dir) / f"frames_{n}")
    return RunConfig.from_dict(doc)


def ablate_frames(cfg: RunConfig, frame_counts=(4, 8, 16)) -> dict:
    """Train, distill and evaluate once per frame count on a shared dataset."""
    data = ObjectCache(cfg.data_dir, with_scene=True)
    eval_data = ObjectCache(cfg.eval_dir, with_scene=True)
    q = len(data[0].cameras)
    rows = []
    for n in frame_counts:
        if n > q:
            raise ValueError(f"{n} frames requested but the dataset has {q} views per object")
        run = _with_frames(cfg, n)
        train_decoder(run, data)
        train_denoiser(run, data)
        distill(run, data=data)
        denoiser = load_denoiser(run, adapters=run.out / "adapters")
        report = evaluate_pipeline(run, load_decoder(run), denoiser, eval_data)
        (run.out / "metrics.json").write_text(json.dumps(report, indent=1, sort_keys=True))
        agg = report["aggregate"]
        rows.append({"frames": n, "psnr": agg["psnr"], "ssim": agg["ssim"], "chamfer": agg["chamfer"],
                     "dataset_seed": cfg.dataset.seed})
    result = {"reference_paper_scale": {str(k): v for k, v in PAPER_TABLE2.items()}, "rows": rows}
    Path(cfg.output_dir).mkdir(parents=True, exist_ok=True)
    (Path(cfg.output_dir) / "ablation.json").write_text(json.dumps(result, indent=1, sort_keys=True))
    (Path(cfg.output_dir) / "ablation.md").write_text(format_ablation(result))
    return result


def format_ablation(result: dict) -> str:
    ref = result["reference_paper_scale"]
    lines = [
        "Reference (paper scale, GSO; context only): "
        + ", ".join(f"N={k} PSNR {v['psnr']:.3f}" for k, v in sorted(ref.items(), key=lambda kv: -int(kv[0]))),
        "",
        "| frames | PSNR | SSIM | Chamfer | dataset seed |",
        "|---|---|---|---|---|",
    ]
    for r in result["rows"]:
        lines.append(f"| {r['frames']} | {r['psnr']:.3f} | {r['ssim']:.4f} | {r['chamfer']:.4f} | {r['dataset_seed']} |")
    return "\n".join(lines) + "\n"


def reconstruct_object(cfg: RunConfig, decoder: GSDecoder, obj: ObjectViews) -> GaussianScene:
    """Stage-one reconstruction from an object's clean input-view latents."""
    cond = conditioning(cfg, obj)
    with torch.no_grad():
        return decoder(cond.latents, cond.tokens, cond.cameras).to_scene()


def export_scene(scene: GaussianScene, path) -> Path:
    return export_ply(scene, path)


def reconstruction_metrics(cfg: RunConfig, decoder: GSDecoder, obj: ObjectViews) -> dict:
    """Train-view fit of a stage-one reconstruction: mean PSNR over all views and masked depth MAE."""
    scene = reconstruct_object(cfg, decoder, obj)
    psnrs, errs = [], []
    for v, cam in enumerate(obj.cameras):
        out = render_reference(scene, cam, WHITE)
        psnrs.append(psnr(out.image, obj.images[v]))
        mask = depth_mask(obj.alphas[v])
        errs.append(np.abs(out.depth - obj.depths[v])[mask])
    errs = np.concatenate(errs)
    return {"psnr": float(np.mean(psnrs)), "depth_mae": float(errs.mean()) if errs.size else 0.0,
            "extent": 2.0 * (obj.scene.bound_radius if obj.scene is not None else 1.0)}
