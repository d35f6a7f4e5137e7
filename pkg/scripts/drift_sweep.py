"""ATE before and after loop correction as the odometry drift grows."""

import argparse
import dataclasses

import numpy as np

from mcoslam.config import PipelineConfig
from mcoslam.pipeline import run_pipeline


def with_drift(cfg: PipelineConfig, drift: float) -> PipelineConfig:
    noise = dataclasses.replace(cfg.sim.noise, odom_drift=drift)
    return dataclasses.replace(cfg, sim=dataclasses.replace(cfg.sim, noise=noise))


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--drifts", type=float, nargs="+", default=[0.0025, 0.005, 0.01, 0.02, 0.04])
    ap.add_argument("--seeds", type=int, default=3)
    args = ap.parse_args()
    print(f"{'drift':>7} {'ate_pre':>8} {'ate_post':>9} {'ratio':>6} {'loops':>6}")
    for drift in args.drifts:
        reps = [run_pipeline(with_drift(PipelineConfig(), drift).with_seed(s)).report for s in range(args.seeds)]
        pre = np.mean([r.ate_pre for r in reps])
        post = np.mean([r.ate_post for r in reps])
        loops = np.mean([r.n_loops for r in reps])
        print(f"{drift:7.4f} {pre:8.3f} {post:9.3f} {post / pre:6.2f} {loops:6.1f}")


if __name__ == "__main__":
    main()
