"""Run the pipeline over a range of seeds and print one metrics row per run.

    python scripts/run_seeds.py --seeds 10 --config configs/reverse.yaml
"""

import argparse
import csv
import sys

import numpy as np

from mcoslam.config import PipelineConfig, load_config
from mcoslam.pipeline import run_pipeline

FIELDS = ["seed", "ate_pre", "ate_post", "assoc_p", "assoc_r", "loops", "tracks", "missed", "spurious", "iou_mean"]


def row(seed, rep):
    return [seed, rep.ate_pre, rep.ate_post, rep.association_precision, rep.association_recall,
            rep.n_loops, rep.n_tracks, rep.objects_missed, rep.objects_spurious, rep.iou_mean]


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--config")
    ap.add_argument("--seeds", type=int, default=5)
    ap.add_argument("--first", type=int, default=0)
    args = ap.parse_args()
    base = load_config(args.config) if args.config else PipelineConfig()
    out = csv.writer(sys.stdout)
    out.writerow(FIELDS)
    rows = []
    for seed in range(args.first, args.first + args.seeds):
        rows.append(row(seed, run_pipeline(base.with_seed(seed)).report))
        out.writerow([f"{v:.4f}" if isinstance(v, float) else v for v in rows[-1]])
        sys.stdout.flush()
    mean = np.nanmean(np.array([r[1:] for r in rows], dtype=float), axis=0)
    out.writerow(["mean"] + [f"{v:.4f}" for v in mean])


if __name__ == "__main__":
    main()
