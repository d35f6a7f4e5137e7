"""Command-line entry point: ``mcoslam {simulate,run,eval,query,export}``."""

from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import sys
from pathlib import Path

import numpy as np

from .config import ConfigError, PipelineConfig, load_config
from .evaluation import evaluate_ate
from .pipeline import PipelineError, run_pipeline, tum_lines
from .scene_graph import export_graph, load_graph, query_objects
from .simulation import generate_world, odometry_poses

log = logging.getLogger("mcoslam")


def _config(args) -> PipelineConfig:
    cfg = load_config(args.config) if args.config else PipelineConfig()
    if getattr(args, "seed", None) is not None:
        cfg = cfg.with_seed(args.seed)
    if getattr(args, "no_loop_closure", False):
        cfg = dataclasses.replace(cfg, loop_closure=False)
    return cfg


def _out(args) -> Path:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def cmd_simulate(args) -> int:
    cfg = _config(args)
    gt = generate_world(cfg.sim)
    out = _out(args)
    gt.dump_json(out / "ground_truth.json")
    (out / "trajectory_gt.txt").write_text(tum_lines(gt.rig_poses))
    (out / "trajectory_odometry.txt").write_text(tum_lines(odometry_poses(gt, cfg.sim)))
    print(f"simulated {gt.n_frames} keyframes, {len(gt.objects)} objects, "
          f"{len(gt.points)} map points -> {out}")
    return 0


def cmd_run(args) -> int:
    cfg = _config(args)
    res = run_pipeline(cfg, args.out, args.report_format)
    r = res.report
    print(f"ATE pre {r.ate_pre:.4f} m, post {r.ate_post:.4f} m; association P {r.association_precision:.3f} "
          f"R {r.association_recall:.3f}; loops {r.n_loops}; objects {r.n_tracks}/{r.n_gt_objects}")
    if args.out:
        print(f"artifacts written to {args.out}")
    else:
        sys.stdout.write(r.to_csv() if args.report_format == "csv" else r.to_json() + "\n")
    return 0


def _read_tum(path) -> np.ndarray:
    rows = np.loadtxt(path, ndmin=2)
    if rows.shape[1] != 8:
        raise ValueError(f"{path}: expected 8 columns (timestamp tx ty tz qx qy qz qw)")
    return rows[:, 1:4]


def cmd_eval(args) -> int:
    ate = evaluate_ate(_read_tum(args.est), _read_tum(args.gt))
    if args.report_format == "json":
        print(json.dumps({"ate_rmse": ate}, sort_keys=True))
    else:
        print("metric,stage,value")
        print(f"ate_rmse,{Path(args.est).stem},{ate:.9g}")
    return 0


def cmd_query(args) -> int:
    graph = load_graph(args.graph)
    if args.object is not None:
        match = [o for o in graph.objects if o.object_id == args.object]
        if not match:
            raise ValueError(f"object {args.object} not in graph")
        q = match[0].embedding
    elif args.vector:
        q = np.asarray(json.loads(Path(args.vector).read_text()), dtype=float)
    else:
        protos = generate_world(_config(args).sim).prototypes
        if args.cls not in protos:
            raise ValueError(f"unknown class {args.cls!r}; choose from {sorted(protos)}")
        q = protos[args.cls]
    classes = {o.object_id: o.class_label for o in graph.objects}
    for oid, score in query_objects(graph, q, args.top_k):
        print(f"{oid}\t{classes[oid]}\t{score:.6f}")
    return 0


def cmd_export(args) -> int:
    graph = load_graph(args.graph)
    out = _out(args)
    export_graph(graph, out / "scene_graph.json")
    lines = ["id,class,parent_road,cx,cy,cz,a,b,c,qw,qx,qy,qz"]
    for o in graph.objects:
        vals = [*o.center, *o.semi_axes, *o.quat_wxyz]
        parent = "" if o.parent_road is None else str(o.parent_road)
        lines.append(",".join([str(o.object_id), o.class_label, parent] + [f"{v:.9g}" for v in vals]))
    (out / "objects.csv").write_text("\n".join(lines) + "\n")
    print(f"exported {len(graph.objects)} objects, {len(graph.roads)} roads -> {out}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="mcoslam", description=__doc__)
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, out_required=False):
        sp.add_argument("--config", help="YAML config file (defaults built in)")
        sp.add_argument("--seed", type=int, help="override the config seed")
        sp.add_argument("--out", required=out_required, help="output directory")

    sp = sub.add_parser("simulate", help="generate a world and dump its ground truth")
    common(sp, out_required=True)
    sp.set_defaults(func=cmd_simulate)

    sp = sub.add_parser("run", help="run the full pipeline on a simulated world")
    common(sp)
    sp.add_argument("--no-loop-closure", action="store_true")
    sp.add_argument("--report-format", choices=("csv", "json"), default="csv")
    sp.set_defaults(func=cmd_run)

    sp = sub.add_parser("eval", help="ATE between two TUM trajectory files")
    sp.add_argument("--est", required=True)
    sp.add_argument("--gt", required=True)
    sp.add_argument("--report-format", choices=("csv", "json"), default="csv")
    sp.set_defaults(func=cmd_eval)

    sp = sub.add_parser("query", help="rank scene-graph objects by embedding similarity")
    sp.add_argument("--graph", required=True)
    sp.add_argument("--config")
    sp.add_argument("--seed", type=int)
    g = sp.add_mutually_exclusive_group(required=True)
    g.add_argument("--class", dest="cls", help="use the simulated class prototype")
    g.add_argument("--object", type=int, help="use an object's own embedding")
    g.add_argument("--vector", help="JSON file holding an embedding list")
    sp.add_argument("--top-k", type=int, default=5)
    sp.set_defaults(func=cmd_query)

    sp = sub.add_parser("export", help="rewrite a scene graph canonically plus an object table")
    sp.add_argument("--graph", required=True)
    sp.add_argument("--out", required=True)
    sp.set_defaults(func=cmd_export)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"error: [config] {exc}", file=sys.stderr)
        return 2
    except PipelineError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except (OSError, ValueError, KeyError) as exc:
        print(f"error: [{args.command}] {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
