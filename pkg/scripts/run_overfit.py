"""Stage-one overfit experiment: one object, four input views, 64x64.

    python3 scripts/run_overfit.py --workdir runs/overfit [--steps 400]

Prints train-view PSNR and masked depth MAE of the final decoder.
"""

import argparse
import json
import time
from pathlib import Path

from gsdistill import pipeline as pl


def run(workdir: str, steps: int | None = None) -> dict:
    doc = pl.preset("overfit").to_dict()
    root = Path(workdir)
    doc.update(data_dir=str(root / "data"), eval_dir=str(root / "eval"), output_dir=str(root / "run"))
    if steps is not None:
        doc["stage_one"]["steps"] = steps
    cfg = pl.RunConfig.from_dict(doc)
    t0 = time.time()
    if not (root / "data" / "manifest.json").exists():
        pl.generate_data(cfg)
    pl.train_decoder(cfg)
    data = pl.ObjectCache(cfg.data_dir, with_scene=True)
    result = pl.reconstruction_metrics(cfg, pl.load_decoder(cfg), data[0])
    result.update(steps=cfg.stage_one.steps, seconds=time.time() - t0)
    (root / "overfit_result.json").write_text(json.dumps(result, indent=1, sort_keys=True))
    return result


if __name__ == "__main__":
    ap = argparse.ArgumentParser()
    ap.add_argument("--workdir", default="runs/overfit")
    ap.add_argument("--steps", type=int)
    args = ap.parse_args()
    print(json.dumps(run(args.workdir, args.steps), indent=1))
