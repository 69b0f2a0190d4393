"""Toy distillation experiment: 32 procedural objects, 8 held out.

    python3 scripts/run_distill_toy.py --workdir runs/toy

Runs stage one, base denoiser pretraining and stage two, then prints the
held-out L_3D / Chamfer before and after the adapters were trained.
"""

import argparse
import json
import time
from pathlib import Path

from gsdistill import pipeline as pl


def run(workdir: str, overrides: dict | None = None) -> dict:
    doc = pl.preset("toy").to_dict()
    root = Path(workdir)
    doc.update(data_dir=str(root / "data"), eval_dir=str(root / "eval"), output_dir=str(root / "run"))
    for key, value in (overrides or {}).items():
        doc[key].update(value) if isinstance(value, dict) else doc.__setitem__(key, value)
    cfg = pl.RunConfig.from_dict(doc)
    t0 = time.time()
    if not (root / "data" / "manifest.json").exists():
        pl.generate_data(cfg)
    data = pl.ObjectCache(cfg.data_dir, with_scene=True)
    pl.train_decoder(cfg, data)
    pl.train_denoiser(cfg, data)
    summary = pl.distill(cfg, data=data)
    summary["seconds"] = time.time() - t0
    (root / "toy_result.json").write_text(json.dumps(summary, indent=1, sort_keys=True))
    return summary


if __name__ == "__main__":
    ap = argparse.ArgumentParser()
    ap.add_argument("--workdir", default="runs/toy")
    args = ap.parse_args()
    print(json.dumps(run(args.workdir), indent=1))
