import csv
import json

import pytest

from dgating import __version__
from dgating.cli import main


def read_csv(path):
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


def test_help_and_version(capsys):
    with pytest.raises(SystemExit) as info:
        main(["--help"])
    assert info.value.code == 0
    text = capsys.readouterr().out
    for cmd in ("toy", "path", "decay", "gradcheck", "gen-data"):
        assert cmd in text
    with pytest.raises(SystemExit):
        main(["--version"])
    assert __version__ in capsys.readouterr().out


def test_toy_outputs(tmp_path):
    out = tmp_path / "toy"
    args = ["toy", "--depths", "2,3,4", "--lambda", "0.5", "--steps", "200", "--lr", "0.01", "--out", str(out)]
    assert main(args) == 0
    rows = read_csv(out / "toy_trajectories.csv")
    assert set(rows[0]) == {"step", "method", "depth", "w1", "w2"}
    assert len(rows) == 2 * 3 * 201
    assert {(r["method"], r["depth"]) for r in rows} == {(m, d) for m in ("direct", "gated") for d in "234"}
    first = (out / "toy_trajectories.csv").read_bytes()
    assert b"\r" not in first

    assert main(args) == 2  # manifest exists
    assert main(args + ["--force"]) == 0
    assert (out / "toy_trajectories.csv").read_bytes() == first
    manifest = json.loads((out / "manifest.json").read_text())
    assert manifest["command"] == "toy" and manifest["config"]["lambda"] == 0.5


def test_missing_out_is_usage_error():
    with pytest.raises(SystemExit) as info:
        main(["toy"])
    assert info.value.code == 2


def test_bad_toy_config(tmp_path):
    assert main(["toy", "--steps", "0", "--out", str(tmp_path / "t")]) == 2
    bad = tmp_path / "bad.json"
    bad.write_text("[1, 2]")
    assert main(["toy", "--config", str(bad), "--out", str(tmp_path / "u")]) == 2


def test_path_single_record(tmp_path):
    out = tmp_path / "p"
    assert main(["path", "--methods", "fista", "--depths", "2", "--seeds", "1", "--grid", "0.5",
                 "--out", str(out)]) == 0
    manifest = json.loads((out / "manifest.json").read_text())
    rows = read_csv(out / f"seed_{manifest['seeds'][0]}" / "path.csv")
    assert len(rows) == 1 and rows[0]["method"] == "fista"
    agg = read_csv(out / "aggregate.csv")
    assert len(agg) == 1 and agg[0]["n_runs"] == "1"


def test_path_validation(tmp_path):
    assert main(["path", "--methods", "fista", "--depths", "3", "--out", str(tmp_path / "a")]) == 2
    assert main(["path", "--methods", "lasso", "--out", str(tmp_path / "b")]) == 2


def test_path_manifest_reproduces(tmp_path, monkeypatch):
    monkeypatch.delenv("DGATE_SEED", raising=False)
    cfg = tmp_path / "cfg.json"
    cfg.write_text(json.dumps({
        "dgp": {"n_train": 40, "n_test": 50, "n_groups": 6, "group_size": 2, "n_informative": 2},
        "methods": ["dgating", "fista", "oracle-ls"], "depths": [2], "n_seeds": 2,
        "grid": {"lo": 0.01, "hi": 1.0, "num": 3}, "train": {"iters": 100}}))
    a, b = tmp_path / "a", tmp_path / "b"
    assert main(["path", "--config", str(cfg), "--seed", "5", "--out", str(a), "--jobs", "2"]) == 0
    assert main(["path", "--config", str(a / "manifest.json"), "--out", str(b)]) == 0
    manifest = json.loads((a / "manifest.json").read_text())
    assert manifest["seeds"] == [5, 5 ^ 1]
    for name in manifest["files"]:
        assert (a / name).read_bytes() == (b / name).read_bytes()
    rows = read_csv(a / "seed_5" / "path.csv")
    assert len(rows) == 3 * 3


def test_seed_precedence(tmp_path, monkeypatch):
    monkeypatch.setenv("DGATE_SEED", "11")
    assert main(["gen-data", "--out", str(tmp_path / "env")]) == 0
    assert json.loads((tmp_path / "env" / "manifest.json").read_text())["seeds"] == [11]
    assert main(["gen-data", "--seed", "3", "--out", str(tmp_path / "flag")]) == 0
    assert json.loads((tmp_path / "flag" / "manifest.json").read_text())["seeds"] == [3]
    monkeypatch.setenv("DGATE_SEED", "abc")
    assert main(["gen-data", "--out", str(tmp_path / "bad")]) == 2


def test_gen_data(tmp_path, monkeypatch):
    monkeypatch.delenv("DGATE_SEED", raising=False)
    out = tmp_path / "g"
    assert main(["gen-data", "--out", str(out)]) == 0
    train = read_csv(out / "train.csv")
    assert len(train) == 200 and len(train[0]) == 201
    assert len(read_csv(out / "test.csv")) == 2000
    assert json.loads((out / "partition.json").read_text()) == {"sizes": [5] * 40}
    weights = read_csv(out / "true_weights.csv")
    assert sum(float(r["weight"]) != 0.0 for r in weights) == 35


def test_decay_flow_defaults(tmp_path):
    out = tmp_path / "d"
    assert main(["decay", "--out", str(out)]) == 0
    rows = read_csv(out / "slopes.csv")
    assert len(rows) == 9
    assert all(float(r["rel_err"]) < 0.01 and r["within_tol"] == "1" for r in rows)
    assert (out / "decay_3_0.1.csv").exists()


def test_decay_conserved_row(tmp_path):
    out = tmp_path / "d0"
    assert main(["decay", "--lambdas", "0", "--depths", "3", "--t-end", "2", "--out", str(out)]) == 0
    (row,) = read_csv(out / "slopes.csv")
    assert row["conserved"] == "1" and abs(float(row["fit_slope"])) < 1e-6


def test_decay_sgd_engine(tmp_path):
    out = tmp_path / "s"
    assert main(["decay", "--engine", "sgd", "--depths", "2", "--lambdas", "0.5", "--out", str(out)]) == 0
    (row,) = read_csv(out / "slopes.csv")
    assert row["engine"] == "sgd" and float(row["fit_slope"]) < 0


def test_gradcheck_exit_codes(capsys):
    assert main(["gradcheck"]) == 0
    assert "max relative error" in capsys.readouterr().out
    assert main(["gradcheck", "--inject-fault", "--points", "1"]) == 1
    err = capsys.readouterr().err
    assert "model=" in err and "D=" in err and "coordinate=" in err
    assert main(["gradcheck", "--eps", "1e-3", "--tol", "1e-1", "--points", "1"]) == 0
    coarse = float(capsys.readouterr().out.strip().splitlines()[-1].split()[3])
    assert coarse > 1e-5


def test_gradcheck_writes_csv(tmp_path):
    out = tmp_path / "gc"
    assert main(["gradcheck", "--points", "1", "--out", str(out)]) == 0
    assert len(read_csv(out / "gradcheck.csv")) == 15
