import csv
import json
import shutil

import numpy as np
import pytest
import yaml

from ssmkit import config
from ssmkit.cli import main
from ssmkit.errors import ConfigError


def _files(d):
    return {p.name: p.read_bytes() for p in sorted(d.iterdir()) if p.name != "timings.json"}


def _run_twice(tmp_path, args):
    out = tmp_path / "out"
    assert main([*args, "--out", str(out)]) == 0
    first = _files(out)
    shutil.rmtree(out)
    assert main([*args, "--out", str(out)]) == 0
    return first, _files(out), out


def _rows(p):
    return list(csv.reader(open(p)))


def test_usage_errors_exit_2(tmp_path, capsys):
    assert main([]) == 2
    assert main(["lorenz", "--particles", "many"]) == 2
    assert main(["track", "--out", str(tmp_path)]) == 2     # missing required parameters
    err = json.loads(capsys.readouterr().err.strip().splitlines()[-1])
    assert err["error"] == "usage" and "p_detect" in err["message"]


def test_runtime_error_exits_1(tmp_path, capsys):
    bad = tmp_path / "bad.csv"
    bad.write_text("date,index\n" + "".join(f"2000-0{i + 1}-01,{v}\n" for i, v in enumerate([1, 2, -3, 4, 5, 6])))
    assert main(["inflation", "--input", str(bad), "--particles", "16", "--out", str(tmp_path / "o")]) == 1
    err = json.loads(capsys.readouterr().err.strip().splitlines()[-1])
    assert "positive" in err["message"]


def test_config_round_trip():
    cfg = config.loads("command: lorenz\nseed: 3\nparams: {n_steps: 7}\n")
    again = config.loads(cfg.dump())
    assert again == cfg
    assert again.params["n_steps"] == 7 and again.params["dt"] == 0.025
    assert again.particles == 1024


@pytest.mark.parametrize("text", [
    "command: lorenz\ncolour: red\n",
    "command: lorenz\nparams: {n_step: 3}\n",
    "command: lorenz\nresampler: {scheme: systematic, threshold: 0}\n",
    "command: lorenz\nresampler: {scheme: stratified}\n",
    "command: lorenz\nengine: kalman\n",
    "command: juggle\n",
    "command: lorenz\nseed: -1\n",
    "command: [unclosed\n",
])
def test_invalid_configs_rejected(text):
    with pytest.raises(ConfigError):
        config.loads(text)


def test_flags_override_config_file(tmp_path):
    f = tmp_path / "c.yaml"
    f.write_text(yaml.safe_dump({"command": "lorenz", "seed": 1, "particles": 64, "params": {"n_steps": 5}}))
    out = tmp_path / "o"
    assert main(["lorenz", "--config", str(f), "--seed", "9", "--out", str(out)]) == 0
    cfg = json.loads((out / "run.json").read_text())["config"]
    assert cfg["seed"] == 9 and cfg["particles"] == 64 and cfg["params"]["n_steps"] == 5


def test_config_for_other_command_rejected(tmp_path):
    f = tmp_path / "c.yaml"
    f.write_text("command: pmmh\n")
    assert main(["lorenz", "--config", str(f), "--out", str(tmp_path / "o")]) == 2


@pytest.mark.parametrize("args", [
    ["lorenz", "--n-steps", "15", "--particles", "128", "--seed", "4"],
    ["lorenz", "--n-steps", "15", "--particles", "128", "--seed", "4", "--partitions", "4", "--workers", "3"],
    ["track", "--p-detect", "0.9", "--clutter-rate", "3", "--bounds", "0", "768", "0", "576",
     "--n-targets", "3", "--n-steps", "10"],
    ["pmmh", "--n-iters", "30", "--n-obs", "20", "--engine", "bootstrap", "--particles", "64"],
    ["inflation", "--particles", "128", "--variant", "ucsv-o"],
])
def test_reruns_are_byte_identical(tmp_path, args):
    a, b, _ = _run_twice(tmp_path, args)
    assert a.keys() == b.keys() and "run.json" in a
    for k in a:
        assert a[k] == b[k], k


def test_worker_count_does_not_change_output(tmp_path):
    base = ["lorenz", "--n-steps", "12", "--particles", "96", "--partitions", "4"]
    assert main([*base, "--workers", "1", "--out", str(tmp_path / "a")]) == 0
    assert main([*base, "--workers", "4", "--out", str(tmp_path / "b")]) == 0
    for name in ("filtered_means.csv", "paths.csv"):
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()


def test_inflation_rows_match_data_length(tmp_path):
    out = tmp_path / "o"
    assert main(["inflation", "--particles", "64", "--out", str(out)]) == 0
    assert len(_rows(out / "quantiles.csv")) == 1 + 200


def test_track_reads_detection_file(tmp_path):
    det = tmp_path / "det.csv"
    det.write_text("frame,x,y\n1,10.0,10.0\n1,50.0,50.0\n2,10.5,10.2\n2,50.4,49.9\n")
    out = tmp_path / "o"
    args = ["track", "--detections", str(det), "--p-detect", "0.9", "--clutter-rate", "1",
            "--bounds", "0", "100", "0", "100", "--n-targets", "2", "--out", str(out)]
    assert main(args) == 0
    rows = _rows(out / "associations.csv")
    # the first frame seeds the tracks, so only frame 2 is associated
    assert rows == [["frame", "target_id", "measurement"], ["2", "0", "1"], ["2", "1", "2"]]


def test_bench_writes_one_row_per_particle_count(tmp_path):
    out = tmp_path / "o"
    assert main(["bench", "--n-grid", "16", "32", "--steps", "3", "--repetitions", "2",
                 "--evidence-seeds", "3", "--evidence-T", "5", "--partitions", "2", "--workers", "2",
                 "--out", str(out)]) == 0
    rows = _rows(out / "timings.csv")
    assert len(rows) == 3 and [r[0] for r in rows[1:]] == ["16", "32"]
    ev = _rows(out / "evidence.csv")
    assert len(ev) == 3
    assert np.all(np.isfinite([float(r[1]) for r in ev[1:]]))
