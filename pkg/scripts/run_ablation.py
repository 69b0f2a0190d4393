"""N-frames ablation at toy scale (frames 4 and 8 by default; 16 needs views_per_object >= 16).

    python3 scripts/run_ablation.py --workdir runs/ablation --frames 4 8
"""

import argparse
from pathlib import Path

from gsdistill import pipeline as pl

if __name__ == "__main__":
    ap = argparse.ArgumentParser()
    ap.add_argument("--workdir", default="runs/ablation")
    ap.add_argument("--frames", type=int, nargs="+", default=[4, 8, 16])
    args = ap.parse_args()
    doc = pl.preset("toy").to_dict()
    root = Path(args.workdir)
    doc.update(data_dir=str(root / "data"), eval_dir=str(root / "eval"), output_dir=str(root / "run"))
    doc["dataset"]["views_per_object"] = max(16, max(args.frames))
    cfg = pl.RunConfig.from_dict(doc)
    if not (root / "data" / "manifest.json").exists():
        pl.generate_data(cfg)
    print(pl.format_ablation(pl.ablate_frames(cfg, tuple(args.frames))))
