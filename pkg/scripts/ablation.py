"""Association and loop-closure ablations, averaged over seeds.

Each variant switches off one stage: the memory lookup, the geometric check,
or loop closure. Duplicates count ground-truth objects that ended up with
more than one fitted track.
"""

import argparse
import dataclasses
from collections import Counter

import numpy as np

from mcoslam.config import PipelineConfig
from mcoslam.pipeline import run_pipeline


def duplicates(res) -> int:
    owners = Counter()
    for t in res.store:
        ids = Counter(d.gt_id for d in t.history.values() if d.gt_id is not None)
        if t.landmark is not None and ids:
            owners[ids.most_common(1)[0][0]] += 1
    return sum(n > 1 for n in owners.values())


def variants(base: PipelineConfig):
    assoc = base.association
    yield "full", base
    yield "no_memory", dataclasses.replace(base, association=dataclasses.replace(assoc, use_memory=False))
    yield "no_geometry", dataclasses.replace(base, association=dataclasses.replace(assoc, use_geometry=False))
    yield "no_loop_closure", dataclasses.replace(base, loop_closure=False)


def main():
    ap = argparse.ArgumentParser(description="association / loop-closure ablation")
    ap.add_argument("--seeds", type=int, default=5)
    args = ap.parse_args()
    print(f"{'variant':<16} {'assoc_p':>8} {'assoc_r':>8} {'ate_post':>9} {'tracks':>7} {'dups':>5}")
    for name, cfg in variants(PipelineConfig()):
        stats = []
        for seed in range(args.seeds):
            res = run_pipeline(cfg.with_seed(seed))
            r = res.report
            stats.append([r.association_precision, r.association_recall, r.ate_post, r.n_tracks, duplicates(res)])
        p, rc, ate, n, d = np.mean(stats, axis=0)
        print(f"{name:<16} {p:8.3f} {rc:8.3f} {ate:9.3f} {n:7.1f} {d:5.1f}")


if __name__ == "__main__":
    main()
