import csv
import json
import os
import subprocess
import sys

import numpy as np
import pytest

from sbirr.cli import EXIT_CONFIG, EXIT_NUMERICAL, EXIT_OK, main
from sbirr.datagen import load_bundle, load_dataset, lotka_volterra_spec
from sbirr.errors import SchemaError
from sbirr.experiment import (
    METRIC_COLUMNS,
    SCHEMA,
    ExperimentConfig,
    read_metrics,
    run_experiment,
    summarize,
)

FAST_IRR = {"K": 2, "ipml_iters": 1, "dt": 0.05, "epochs": 3, "family": "lotka_volterra", "regressor": {"max_inducing": 32}}


def _config(tmp_path, seeds=(0,), **extra):
    gen = lotka_volterra_spec(n_times=3, particles_per_time=8).to_dict()
    cfg = {"schema": SCHEMA, "dataset": {"generator": gen}, "irr": FAST_IRR, "seeds": list(seeds), "out": str(tmp_path / "res")}
    cfg.update(extra)
    path = tmp_path / "exp.json"
    path.write_text(json.dumps(cfg))
    return path


# ---------------------------------------------------------------- config


def test_config_round_trip(tmp_path):
    cfg = ExperimentConfig.from_dict(json.loads(_config(tmp_path).read_text()))
    assert ExperimentConfig.from_dict(cfg.to_dict()) == cfg
    assert cfg.irr.K == 2 and cfg.irr.regressor.max_inducing == 32


@pytest.mark.parametrize(
    "patch",
    [
        {"schema": "other/9"},
        {"bogus": 1},
        {"methods": ["magic"]},
        {"metrics": []},
        {"seeds": [-1]},
        {"dataset": {"generator": {"system": "nope"}}},
        {"dataset": {}},
        {"irr": {"seed": 4}},
        {"irr": {"K": 0}},
        {"irr": {"unknown": 1}},
        {"drop_times": ["x"]},
    ],
)
def test_bad_configs_raise_schema_error(tmp_path, patch):
    d = json.loads(_config(tmp_path).read_text())
    d.update(patch)
    with pytest.raises(SchemaError):
        ExperimentConfig.from_dict(d)


# ------------------------------------------------------------- generate


def test_generate_directory_and_bundle(tmp_path, capsys):
    spec = tmp_path / "gen.json"
    spec.write_text(json.dumps(lotka_volterra_spec(n_times=3, particles_per_time=5).to_dict()))
    assert main(["generate", "--config", str(spec), "--out", str(tmp_path / "d")]) == EXIT_OK
    assert main(["generate", "--config", str(spec), "--seed", "0", "--out", str(tmp_path / "b.json")]) == EXIT_OK
    a, b = load_dataset(tmp_path / "d"), load_bundle(tmp_path / "b.json")
    assert a.counts == b.counts
    np.testing.assert_array_equal(a.snapshots[2].points, b.snapshots[2].points)
    assert main(["generate", "--config", str(spec), "--seed", "1", "--out", str(tmp_path / "c.json")]) == EXIT_OK
    c = load_bundle(tmp_path / "c.json")
    assert not np.array_equal(a.snapshots[2].points, c.snapshots[2].points)


def test_exit_code_for_bad_json(tmp_path, capsys):
    bad = tmp_path / "bad.json"
    bad.write_text("{oops")
    assert main(["generate", "--config", str(bad), "--out", str(tmp_path / "x")]) == EXIT_CONFIG
    assert main(["run", "--config", str(bad)]) == EXIT_CONFIG
    assert main(["run", "--config", str(tmp_path / "missing.json")]) == EXIT_CONFIG
    assert "error" in capsys.readouterr().err


def test_exit_code_for_protocol_error(tmp_path, capsys):
    # four times cannot be split into train and validation
    gen = lotka_volterra_spec(n_times=4, particles_per_time=4).to_dict()
    path = _config(tmp_path, dataset={"generator": gen})
    assert main(["run", "--config", str(path)]) == EXIT_CONFIG
    assert "seed=0" in capsys.readouterr().err


def test_exit_code_for_numerical_failure(tmp_path, capsys):
    # an explosive truth makes the generator abort
    gen = lotka_volterra_spec(n_times=3, particles_per_time=4, params=[60.0, 0.0, 0.0, 0.0]).to_dict()
    path = _config(tmp_path, dataset={"generator": gen})
    assert main(["run", "--config", str(path)]) == EXIT_NUMERICAL
    assert "numerical failure" in capsys.readouterr().err


def test_argparse_errors_exit_2():
    with pytest.raises(SystemExit) as info:
        main(["run"])
    assert info.value.code == 2
    with pytest.raises(SystemExit):
        main(["frobnicate"])


# ------------------------------------------------------------ run/report


@pytest.fixture(scope="module")
def two_seed_run(tmp_path_factory):
    tmp = tmp_path_factory.mktemp("exp")
    path = _config(tmp, seeds=(0, 1))
    assert main(["run", "--config", str(path), "--out", str(tmp / "res")]) == EXIT_OK
    return tmp, path


def test_run_layout_and_rows(two_seed_run):
    tmp, _ = two_seed_run
    res = tmp / "res"
    rows = read_metrics(res / "metrics.csv")
    # 2 seeds x 2 methods x 2 anchor modes x 1 validation time
    assert len(rows) == 8
    with open(res / "metrics.csv") as fh:
        assert next(csv.reader(fh)) == list(METRIC_COLUMNS)
    for s in (0, 1):
        d = res / f"seed_{s}"
        assert (d / "data.json").exists()
        assert len((d / "irr_history.jsonl").read_text().splitlines()) == 3
        assert len((d / "vanilla_history.jsonl").read_text().splitlines()) == 2
        assert (d / "irr_one-time_trajectories.csv").exists()
    assert json.loads((res / "config.json").read_text())["schema"] == SCHEMA


def test_run_is_deterministic(two_seed_run, tmp_path):
    tmp, path = two_seed_run
    assert main(["run", "--config", str(path), "--out", str(tmp_path / "again")]) == EXIT_OK
    assert (tmp / "res" / "metrics.csv").read_bytes() == (tmp_path / "again" / "metrics.csv").read_bytes()


def test_single_seed_override_and_workers(two_seed_run, tmp_path):
    tmp, path = two_seed_run
    assert main(["run", "--config", str(path), "--seed", "1", "--out", str(tmp_path / "one")]) == EXIT_OK
    rows = read_metrics(tmp_path / "one" / "metrics.csv")
    assert {r["seed"] for r in rows} == {1}
    want = [r for r in read_metrics(tmp / "res" / "metrics.csv") if r["seed"] == 1]
    assert rows == want
    cfg = ExperimentConfig.from_dict(json.loads(path.read_text()))
    par = run_experiment(cfg, tmp_path / "par", workers=2)
    assert (tmp_path / "par" / "metrics.csv").read_bytes() == (tmp / "res" / "metrics.csv").read_bytes()
    assert len(par) == 8


def test_report(two_seed_run, tmp_path, capsys):
    tmp, _ = two_seed_run
    res = tmp / "res"
    assert main(["report", str(res)]) == EXIT_OK
    out = capsys.readouterr().out
    assert "irr" in out and "vanilla" in out
    assert (res / "summary.csv").exists()
    svg = (res / "trajectories.svg").read_text()
    assert svg.startswith("<svg") and "polyline" in svg


def test_report_statistics():
    rows = [
        {"seed": s, "method": "irr", "anchor_mode": "all", "val_time": 1.0, "emd": e, "mmd_sq": 0.5}
        for s, e in ((0, 1.0), (1, 3.0))
    ]
    (rec,) = summarize(rows)
    assert rec["emd_mean"] == 2.0 and rec["emd_std"] == 1.0 and rec["n_seeds"] == 2
    (single,) = summarize(rows[:1])
    assert single["emd_std"] == 0.0


def test_report_rejects_missing_columns(tmp_path, capsys):
    (tmp_path / "metrics.csv").write_text("seed,method,emd\n0,irr,1.0\n")
    with pytest.raises(SchemaError):
        read_metrics(tmp_path / "metrics.csv")
    assert main(["report", str(tmp_path)]) == EXIT_CONFIG
    assert main(["report", str(tmp_path / "nowhere")]) == EXIT_CONFIG


def test_module_entry_point(tmp_path):
    proc = subprocess.run([sys.executable, "-m", "sbirr", "--help"], capture_output=True, text=True)
    assert proc.returncode == 0
    for cmd in ("generate", "run", "report"):
        assert cmd in proc.stdout
