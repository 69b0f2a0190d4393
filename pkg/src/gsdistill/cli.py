"""Command-line entry point: `gsdistill <command> --config run.json ...`.

Exit codes: 0 success, 1 usage/config error, 2 data or checkpoint error, 3 numerical failure.
"""

from __future__ import annotations

import argparse
import json
import math
import sys
from pathlib import Path

import numpy as np

from . import pipeline as pl
from .core import ContractViolationError, InvalidParameterError
from .data import DataError, read_rgba, write_rgba
from .netkit import ShapeError
from .ply import PlyFormatError, export_ply, import_ply

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _config(args) -> pl.RunConfig:
    try:
        return pl.RunConfig.load(args.config)
    except FileNotFoundError as exc:
        raise UsageError(f"config file not found: {args.config}") from exc
    except (json.JSONDecodeError, TypeError, ValueError) as exc:
        raise UsageError(f"invalid config {args.config}: {exc}") from exc


def _dump(path: Path, doc) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(doc, indent=1, sort_keys=True))


def cmd_config(args) -> None:
    try:
        cfg = pl.preset(args.preset)
    except KeyError as exc:
        raise UsageError(str(exc)) from exc
    text = json.dumps(cfg.to_dict(), indent=1, sort_keys=True)
    if args.out:
        Path(args.out).write_text(text)
    else:
        print(text)


def cmd_gen_data(args) -> None:
    cfg = _config(args)
    train, evalset = pl.generate_data(cfg)
    print(f"wrote {len(train['objects'])} training objects to {cfg.data_dir}, "
          f"{len(evalset['objects'])} eval objects to {cfg.eval_dir}")


def cmd_train_decoder(args) -> None:
    cfg = _config(args)
    print(f"decoder checkpoint: {pl.train_decoder(cfg)}")


def cmd_train_denoiser(args) -> None:
    cfg = _config(args)
    print(f"denoiser checkpoint: {pl.train_denoiser(cfg)}")


def cmd_distill(args) -> None:
    cfg = _config(args)
    summary = pl.distill(cfg, args.decoder, args.denoiser)
    print(json.dumps(summary, indent=1, sort_keys=True))


def _load_models(cfg, args):
    decoder = pl.load_decoder(cfg, args.decoder)
    adapters = args.adapters or cfg.out / "adapters"
    if args.no_adapters:
        adapters = None
    denoiser = pl.load_denoiser(cfg, args.denoiser, adapters=adapters)
    return decoder, denoiser


def cmd_infer(args) -> None:
    cfg = _config(args)
    pl._setup()
    image, _ = read_rgba(args.image)
    decoder, denoiser = _load_models(cfg, args)
    cams = pl.input_cameras(cfg, math.radians(args.elevation))
    steps = args.steps if args.steps is not None else cfg.sample_steps
    seed = args.seed if args.seed is not None else cfg.seed
    try:
        scene, renders, _ = pl.infer(image, cams, decoder, denoiser, steps, seed)
    except ValueError as exc:
        raise UsageError(str(exc)) from exc
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    for i, img in enumerate(renders):
        write_rgba(out / f"render_{i:03d}.png", img, np.ones(img.shape[:2]))
    export_ply(scene, out / "scene.ply")
    _dump(out / "infer.json", {"image": str(args.image), "elevation_deg": args.elevation, "steps": steps,
                               "seed": seed, "gaussians": len(scene), "views": len(renders)})
    print(f"{len(scene)} Gaussians, {len(renders)} renders in {out}")


def cmd_eval(args) -> None:
    cfg = _config(args)
    pl._setup()
    eval_dir = args.eval_dir or cfg.eval_dir
    data = pl.ObjectCache(eval_dir, with_scene=True)
    if args.scene:
        ids = [e["id"] for e in data.manifest["objects"]]
        if args.object not in ids:
            raise DataError(f"object {args.object!r} not in {eval_dir} (have {ids[:5]}...)")
        i = ids.index(args.object)
        entry = data.manifest["objects"][i]
        report = pl.evaluate_scene(import_ply(args.scene), data[i], entry["eval_views"], seed=cfg.seed)
    else:
        decoder, denoiser = _load_models(cfg, args)
        report = pl.evaluate_pipeline(cfg, decoder, denoiser, data)
    _dump(Path(args.out), report)
    print(json.dumps(report["aggregate"], sort_keys=True))


def cmd_ablate(args) -> None:
    cfg = _config(args)
    result = pl.ablate_frames(cfg, tuple(args.frames))
    print(pl.format_ablation(result))


def cmd_export_ply(args) -> None:
    cfg = _config(args)
    pl._setup()
    data = pl.ObjectCache(args.data_dir or cfg.data_dir, with_scene=False)
    ids = [e["id"] for e in data.manifest["objects"]]
    if args.object not in ids:
        raise DataError(f"object {args.object!r} not in dataset")
    scene = pl.reconstruct_object(cfg, pl.load_decoder(cfg, args.decoder), data[ids.index(args.object)])
    export_ply(scene, args.out)
    print(f"wrote {len(scene)} Gaussians to {args.out}")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="gsdistill", description="Multi-view diffusion to Gaussian splats, desk scale.")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("config", help="print a preset RunConfig as JSON")
    p.add_argument("--preset", default="desk")
    p.add_argument("--out")
    p.set_defaults(func=cmd_config)

    def with_config(name, func, help_):
        p = sub.add_parser(name, help=help_)
        p.add_argument("--config", required=True)
        p.set_defaults(func=func)
        return p

    with_config("gen-data", cmd_gen_data, "render the training and evaluation datasets")
    with_config("train-decoder", cmd_train_decoder, "stage one: train the Gaussian decoder")
    with_config("train-denoiser", cmd_train_denoiser, "pretrain the base multi-view denoiser")
    p = with_config("distill", cmd_distill, "stage two: LoRA distillation through the frozen decoder")
    p.add_argument("--decoder")
    p.add_argument("--denoiser")

    for name, func, help_ in (("infer", cmd_infer, "single-image inference"),
                              ("eval", cmd_eval, "evaluate a scene or the full pipeline")):
        p = with_config(name, func, help_)
        p.add_argument("--decoder")
        p.add_argument("--denoiser")
        p.add_argument("--adapters")
        p.add_argument("--no-adapters", action="store_true")
        p.add_argument("--out", required=True)
    infer_p = sub.choices["infer"]
    infer_p.add_argument("--image", required=True)
    infer_p.add_argument("--elevation", type=float, default=0.0, help="degrees")
    infer_p.add_argument("--steps", type=int)
    infer_p.add_argument("--seed", type=int)
    eval_p = sub.choices["eval"]
    eval_p.add_argument("--scene", help="PLY to evaluate instead of running inference")
    eval_p.add_argument("--object", help="eval object id the --scene belongs to")
    eval_p.add_argument("--eval-dir")

    p = with_config("ablate-frames", cmd_ablate, "train/distill/evaluate once per frame count")
    p.add_argument("--frames", type=int, nargs="+", default=[4, 8, 16])

    p = with_config("export-ply", cmd_export_ply, "decode a dataset object with the stage-one decoder to PLY")
    p.add_argument("--object", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--decoder")
    p.add_argument("--data-dir")
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    if args.command == "eval" and args.scene and not args.object:
        parser.error("--scene requires --object")
    try:
        args.func(args)
    except (UsageError, InvalidParameterError, KeyError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (DataError, FileNotFoundError, ShapeError, PlyFormatError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except (pl.NumericalError, ContractViolationError, FloatingPointError) as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
