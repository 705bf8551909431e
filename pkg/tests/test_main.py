import csv
import json

import pytest

import main


def _manifest(out):
    return json.loads((out / "manifest.json").read_text())


def _rows(path):
    with open(path, newline="") as f:
        return list(csv.DictReader(f))


@pytest.mark.parametrize(
    "text, integer, expected",
    [
        ("1,2.5,3", False, [1.0, 2.5, 3.0]),
        ("1e2:1e4:1", False, [100.0, 1000.0, 10000.0]),
        ("10:1000:2", True, [10.0, 32.0, 100.0, 316.0, 1000.0]),
    ],
)
def test_parse_grid(text, integer, expected):
    grid = main.parse_grid(text, integer=integer)
    assert grid == pytest.approx(expected)


@pytest.mark.parametrize("text", ["", "a,b", "10:1", "0:10", "1:2:3:4"])
def test_parse_grid_rejects(text):
    with pytest.raises(main.core.DomainError):
        main.parse_grid(text)


def test_theory(tmp_path):
    out = tmp_path / "theory"
    status = main.main(["theory", "--output", str(out), "--n-grid", "100,1e4,1e6"])
    assert status == 0
    rows = _rows(out / "theory.csv")
    p = [float(r["optimal_p"]) for r in rows]
    assert [int(r["n"]) for r in rows] == [100, 10_000, 1_000_000]
    assert p[0] > p[1] > p[2] > 0.5
    manifest = _manifest(out)
    assert list(manifest["outputs"]) == ["theory.csv"]
    assert manifest["config"]["p_tr"] == 0.9
    assert manifest["program"] == main.config.PROGRAM


def test_theory_grids(tmp_path):
    out = tmp_path / "theory"
    argv = [
        "theory",
        "--output",
        str(out),
        "--n-grid",
        "100,1e4",
        "--d-grid",
        "10,100",
        "--p-tr-grid",
        "0.7,0.9",
    ]
    assert main.main(argv) == 0
    rows = _rows(out / "theory.csv")
    keys = [(int(r["d"]), float(r["p_train"]), int(r["n"])) for r in rows]
    assert keys == [
        (d, p_tr, n) for d in (10, 100) for p_tr in (0.7, 0.9) for n in (100, 10_000)
    ]
    by_key = {k: float(r["optimal_p"]) for k, r in zip(keys, rows)}
    # More parameters per observation pull p toward the training share.
    assert by_key[(100, 0.9, 100)] > by_key[(10, 0.9, 100)]
    assert _manifest(out)["config"]["d_grid"] == "10,100"


def test_missing_seed_is_a_validation_error(tmp_path, capsys):
    out = tmp_path / "sim"
    status = main.main(["simulate", "--output", str(out)])
    assert status == 1
    err = capsys.readouterr().err
    assert err.startswith("error[validation]: DomainError: --seed is required")
    manifest = _manifest(out)
    assert manifest["error"] == "DomainError: --seed is required"
    assert manifest["outputs"] == {}


def test_failed_run_keeps_its_log(tmp_path, monkeypatch):
    log_file = tmp_path / "tmp.log"
    log_file.write_text("warning\n")
    monkeypatch.setattr(main.config, "TMP_LOG_FILEPATH", log_file)
    monkeypatch.setattr(main.log_config, "shutdown", lambda: None)
    out = tmp_path / "sim"
    assert main.main(["simulate", "--output", str(out)]) == 1
    assert (out / "run.log").read_text() == "warning\n"
    assert not log_file.exists()


@pytest.mark.parametrize(
    "name, value", [("method", "bogus"), ("penalty", "l2"), ("method", 3)]
)
def test_invalid_choice_in_config_file(tmp_path, capsys, name, value):
    data = tmp_path / "data.csv"
    data.write_text("y,g,x0\n0,1,0.5\n1,2,-0.5\n")
    run_config = tmp_path / "run.json"
    run_config.write_text(json.dumps({"method": "gdro", "seed": 1, name: value}))
    argv = [
        "optimize",
        "--output",
        str(tmp_path / "opt"),
        "--config",
        str(run_config),
        "--data",
        str(data),
    ]
    assert main.main(argv) == 1
    err = capsys.readouterr().err
    assert err.startswith(f"error[validation]: DomainError: invalid value for {name}")


def test_usage_error(capsys):
    assert main.main(["frobnicate"]) == 1
    assert capsys.readouterr().err.startswith("error[validation]:")


def test_invalid_dgp(tmp_path, capsys):
    argv = ["theory", "--output", str(tmp_path / "t"), "--p-tr", "1.5"]
    assert main.main(argv) == 1
    assert "DomainError" in capsys.readouterr().err


def test_missing_data_file(tmp_path, capsys):
    argv = [
        "optimize",
        "--output",
        str(tmp_path / "opt"),
        "--method",
        "gdro",
        "--data",
        str(tmp_path / "missing.csv"),
        "--seed",
        "0",
    ]
    assert main.main(argv) == 1
    assert "FileNotFoundError" in capsys.readouterr().err


def test_simulate_is_reproducible(tmp_path):
    digests = []
    for name in ("a", "b"):
        out = tmp_path / name
        argv = [
            "simulate",
            "--output",
            str(out),
            "--d",
            "3",
            "--n",
            "200",
            "--reps",
            "20",
            "--p-grid",
            "0.5,0.9",
            "--seed",
            "3",
        ]
        assert main.main(argv) == 0
        digests.append(_manifest(out)["outputs"]["simulation.csv"])
        assert len(_rows(out / "simulation.csv")) == 2
    assert digests[0] == digests[1]
    assert _manifest(tmp_path / "a")["seeds"] == [3]


@pytest.fixture
def generated(tmp_path):
    out = tmp_path / "data"
    argv = [
        "gen-data",
        "--output",
        str(out),
        "--n",
        "600",
        "--d",
        "4",
        "--minority-fraction",
        "0.05",
        "--test-size",
        "100",
        "--seed",
        "2",
    ]
    assert main.main(argv) == 0
    return out


def test_gen_data(generated):
    assert set(_manifest(generated)["outputs"]) == {
        "train.csv",
        "shift.json",
        "test.csv",
    }
    assert len(_rows(generated / "train.csv")) == 600
    assert len(_rows(generated / "test.csv")) == 100


def test_optimize_pipeline(tmp_path, generated):
    run_config = tmp_path / "run.json"
    run_config.write_text('{"learning-rate": 0.2, "steps": 5}')
    out = tmp_path / "opt"
    argv = [
        "optimize",
        "--output",
        str(out),
        "--config",
        str(run_config),
        "--method",
        "gw-erm",
        "--data",
        str(generated / "train.csv"),
        "--shift",
        str(generated / "shift.json"),
        "--steps",
        "2",
        "--seed",
        "2",
    ]
    assert main.main(argv) == 0
    weights = json.loads((out / "weights.json").read_text())
    assert weights["method"] == "gw-erm"
    assert sum(weights["weights"]) == pytest.approx(1.0)
    trace = (out / "trace.jsonl").read_text().splitlines()
    assert 1 <= len(trace) <= 3
    manifest = _manifest(out)
    assert manifest["config"]["steps"] == 2
    assert manifest["config"]["learning_rate"] == 0.2
    assert len(manifest["inputs"]) == 3


def test_optimize_gw_erm_needs_shift(tmp_path, generated, capsys):
    argv = [
        "optimize",
        "--output",
        str(tmp_path / "opt"),
        "--method",
        "gw-erm",
        "--data",
        str(generated / "train.csv"),
        "--seed",
        "2",
    ]
    assert main.main(argv) == 1
    assert "--shift is required" in capsys.readouterr().err


def test_compare(tmp_path):
    out = tmp_path / "cmp"
    argv = [
        "compare",
        "--output",
        str(out),
        "--method",
        "gw-erm",
        "--n",
        "400",
        "--d",
        "4",
        "--minority-fraction",
        "0.05",
        "--test-size",
        "200",
        "--seed",
        "0",
        "--seeds",
        "2",
        "--steps",
        "0",
        "--workers",
        "1",
        "--excel",
    ]
    assert main.main(argv) == 0
    (row,) = _rows(out / "comparison.csv")
    assert row["method"] == "gw-erm" and row["seeds"] == "2"
    assert float(row["worst_group_difference_pct"]) == 0.0
    assert row["worst_group_p_value"] == "nan"
    assert len(_rows(out / "seeds.csv")) == 2
    assert set(_manifest(out)["outputs"]) == {
        "comparison.csv",
        "seeds.csv",
        "comparison.xlsx",
    }
    assert _manifest(out)["seeds"] == [0, 1]
