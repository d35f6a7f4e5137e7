import dataclasses
import json

import numpy as np
import pytest
import yaml

import mcoslam.pipeline as pipeline
from mcoslam.cli import main
from mcoslam.config import ConfigError, PipelineConfig, config_to_dict, load_config
from mcoslam.pipeline import PipelineError, run_pipeline, tum_lines
from mcoslam.geometry import Pose, so3_exp

ARTIFACTS = {"config.yaml", "metrics.csv", "scene_graph.json", "timings.csv",
             "trajectory_gt.txt", "trajectory_post.txt", "trajectory_pre.txt"}


def test_config_yaml_round_trip(tmp_path):
    cfg = PipelineConfig().with_seed(7)
    path = tmp_path / "c.yaml"
    path.write_text(yaml.safe_dump(config_to_dict(cfg)))
    assert load_config(path) == cfg
    assert cfg.loop.seed == 7 and cfg.seed == 7


def test_partial_config_keeps_defaults(tmp_path):
    path = tmp_path / "c.yaml"
    path.write_text("sim:\n  noise:\n    p_drop: 0.2\nloop_closure: false\n")
    cfg = load_config(path)
    assert cfg.sim.noise.p_drop == 0.2 and not cfg.loop_closure
    assert cfg.sim.noise.sigma_mu == PipelineConfig().sim.noise.sigma_mu
    path.write_text("")
    assert load_config(path) == PipelineConfig()


@pytest.mark.parametrize("text", [
    "sim:\n  nosie: {}\n",            # misspelt key
    "sim: [1, 2]\n",                  # wrong shape
    "sim:\n  noise:\n    p_drop: 2\n",  # out of range
    "sim: {seed: 1\n",                # broken YAML
])
def test_bad_configs(tmp_path, text):
    path = tmp_path / "bad.yaml"
    path.write_text(text)
    with pytest.raises(ConfigError):
        load_config(path)
    assert main(["run", "--config", str(path)]) == 2


def test_missing_config_file(tmp_path):
    with pytest.raises(ConfigError):
        load_config(tmp_path / "nope.yaml")


def test_stage_failures_are_labelled(monkeypatch):
    def boom(*a, **k):
        raise FloatingPointError("synthetic")
    monkeypatch.setattr(pipeline, "simulate_run", boom)
    with pytest.raises(PipelineError) as info:
        run_pipeline(PipelineConfig())
    assert info.value.stage == "simulate"
    assert "[simulate] FloatingPointError" in str(info.value)
    assert main(["run"]) == 1


def test_tum_lines_format():
    p = Pose.from_body(so3_exp([0, 0, np.pi / 2]), [1.0, 2.0, 3.0])
    (line,) = tum_lines([p]).splitlines()
    vals = [float(v) for v in line.split()]
    assert vals[:4] == [0, 1, 2, 3]
    assert np.allclose(vals[4:], [0, 0, np.sqrt(0.5), np.sqrt(0.5)])


@pytest.fixture(scope="module")
def run_dir(tmp_path_factory):
    out = tmp_path_factory.mktemp("run")
    assert main(["run", "--seed", "3", "--out", str(out)]) == 0
    return out


def test_run_writes_artifacts(run_dir, capsys):
    assert ARTIFACTS <= {p.name for p in run_dir.iterdir()}
    metrics = (run_dir / "metrics.csv").read_text().splitlines()
    assert metrics[0] == "metric,stage,value"
    assert not any("wall_clock" in m for m in metrics)
    assert "wall_clock_s,association" in (run_dir / "timings.csv").read_text()
    cfg = load_config(run_dir / "config.yaml")
    assert cfg.seed == 3
    n = cfg.sim.trajectory.n_keyframes
    assert len((run_dir / "trajectory_post.txt").read_text().splitlines()) == n


def test_eval_matches_report(run_dir, capsys):
    assert main(["eval", "--est", str(run_dir / "trajectory_post.txt"), "--gt", str(run_dir / "trajectory_gt.txt"),
                 "--report-format", "json"]) == 0
    ate = json.loads(capsys.readouterr().out)["ate_rmse"]
    rows = dict(((m, s), float(v)) for m, s, v in
                (line.split(",") for line in (run_dir / "metrics.csv").read_text().splitlines()[1:]))
    # the files hold 9 significant digits
    assert ate == pytest.approx(rows[("ate_rmse", "post_loop")], rel=1e-6)


def test_query_and_export(run_dir, tmp_path, capsys):
    graph = run_dir / "scene_graph.json"
    assert main(["query", "--graph", str(graph), "--object", "0", "--top-k", "2"]) == 0
    first = capsys.readouterr().out.splitlines()[0].split("\t")
    assert first[0] == "0" and float(first[2]) == pytest.approx(1.0)
    assert main(["query", "--graph", str(graph), "--seed", "3", "--class", "car", "--top-k", "3"]) == 0
    lines = capsys.readouterr().out.splitlines()
    assert len(lines) == 3 and all(line.split("\t")[1] == "car" for line in lines)
    assert main(["export", "--graph", str(graph), "--out", str(tmp_path)]) == 0
    assert (tmp_path / "scene_graph.json").read_bytes() == graph.read_bytes()
    table = (tmp_path / "objects.csv").read_text().splitlines()
    assert table[0].startswith("id,class,parent_road")
    assert len(table) - 1 == len(json.loads(graph.read_text())["objects"])


def test_cli_errors(tmp_path, capsys):
    assert main(["query", "--graph", str(tmp_path / "none.json"), "--object", "0"]) == 1
    assert "error: [query]" in capsys.readouterr().err
    with pytest.raises(SystemExit):
        main(["bogus"])


def test_simulate_command(tmp_path, capsys):
    assert main(["simulate", "--out", str(tmp_path), "--seed", "2"]) == 0
    gt = json.loads((tmp_path / "ground_truth.json").read_text())
    assert len(gt["objects"]) == PipelineConfig().sim.objects.count
    assert (tmp_path / "trajectory_odometry.txt").exists()


def test_no_loop_closure_flag(tmp_path, capsys):
    cfg = dataclasses.replace(PipelineConfig(), loop_closure=False)
    res = run_pipeline(cfg)
    assert res.loops == [] and res.report.ate_post == res.report.ate_pre
