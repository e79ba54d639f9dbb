import json

import pytest

from plslam.cli import EXIT_INPUT, EXIT_OK, EXIT_TRACKING_LOST, main
from plslam.evaluation import read_tum


@pytest.fixture
def spec_file(tmp_path):
    p = tmp_path / "sim.cfg"
    p.write_text("shape = line\nlength = 4\nframes = 15\npixel_sigma = 0.3\n")
    return p


def test_simulate_run_eval(tmp_path, spec_file):
    tracks, gt = tmp_path / "t.jsonl", tmp_path / "gt.txt"
    assert main(["simulate", "--spec", str(spec_file), "--seed", "2", "--out", str(tracks), "--gt", str(gt)]) == EXIT_OK
    assert len(read_tum(gt)) == 15
    out = {k: tmp_path / k for k in ("traj.txt", "map.json", "m.json", "s.csv")}
    rc = main(["run", "--tracks", str(tracks), "--gt", str(gt), "--traj", str(out["traj.txt"]),
               "--map", str(out["map.json"]), "--metrics", str(out["m.json"]), "--sim-matrix", str(out["s.csv"])])
    assert rc == EXIT_OK
    m = json.loads(out["m.json"].read_text())
    assert m["run"]["status"] == "ok" and m["mode"] == "pl"
    assert m["trajectory"]["rmse_translation_m"] < 0.05
    assert json.loads(out["map.json"].read_text())["keyframes"]
    ev = tmp_path / "ev.json"
    assert main(["eval", "--gt", str(gt), "--est", str(out["traj.txt"]), "--lengths", "1,2", "--out", str(ev)]) == EXIT_OK
    assert json.loads(ev.read_text())["lengths_m"] == [1.0, 2.0]


def test_deterministic_runs_are_identical(tmp_path, spec_file):
    outs = []
    for k in range(2):
        traj, met = tmp_path / f"t{k}.txt", tmp_path / f"m{k}.json"
        assert main(["run", "--sim", str(spec_file), "--deterministic", "--traj", str(traj),
                     "--metrics", str(met)]) == EXIT_OK
        outs.append((traj.read_bytes(), met.read_bytes()))
    assert outs[0] == outs[1]


def test_tracking_lost_exit_code(tmp_path):
    spec = tmp_path / "sim.cfg"
    spec.write_text("shape = line\nlength = 4\nframes = 12\nmax_points = 10\nn_points = 1500\n")
    met = tmp_path / "m.json"
    assert main(["run", "--sim", str(spec), "--mode", "points", "--metrics", str(met)]) == EXIT_TRACKING_LOST
    assert json.loads(met.read_text())["run"]["status"] == "tracking_lost"


@pytest.mark.parametrize("argv", [
    ["run", "--tracks", "/nonexistent/t.jsonl"],
    ["eval", "--gt", "/nonexistent/a.txt", "--est", "/nonexistent/b.txt"],
])
def test_missing_input_exit_code(argv, capsys):
    assert main(argv) == EXIT_INPUT
    assert capsys.readouterr().err.startswith("error:")


def test_bad_config_and_schema(tmp_path, spec_file):
    cfg = tmp_path / "bad.cfg"
    cfg.write_text("warp = 9\n")
    assert main(["run", "--sim", str(spec_file), "--config", str(cfg)]) == EXIT_INPUT
    tracks = tmp_path / "t.jsonl"
    tracks.write_text('{"camera": {"fx": 400, "fy": 400, "cx": 320, "cy": 240, "baseline": 0.5}}\n{"frame": "a"}\n')
    assert main(["run", "--tracks", str(tracks)]) == EXIT_INPUT
    assert main(["eval", "--gt", str(tracks), "--est", str(tracks), "--lengths", "-1"]) == EXIT_INPUT
