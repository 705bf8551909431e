import json

import numpy as np
import pytest

import bilevel
import core
import datafile
from conftest import make_logistic_data
from datafile import DatasetSchema, RunManifest
from synthetic import generate_spurious
from weights import ShiftSpec


def _write(path, text):
    path.write_text(text, encoding="utf8")
    return path


@pytest.fixture
def spurious_result(small_spurious, fast_config):
    data, shift = generate_spurious(small_spurious)
    return bilevel.optimize_gw_erm(data, shift, data.n // 2, fast_config)


def test_csv_round_trip(tmp_path):
    data = make_logistic_data(n=30, d=3)
    path = datafile.write_csv(tmp_path / "train.csv", data)
    loaded = datafile.load_csv(path, DatasetSchema(d=3, n_groups=4))
    np.testing.assert_array_equal(loaded.features, data.features)
    np.testing.assert_array_equal(loaded.targets, data.targets)
    np.testing.assert_array_equal(loaded.groups, data.groups)
    assert path.read_text().splitlines()[0] == "y,g,x0,x1,x2"


def test_load_csv_reports_line_of_bad_label(tmp_path):
    path = _write(
        tmp_path / "bad.csv",
        "y,g,x0\n0,1,0.5\n1,2,0.1\n0,1,-1\n2,1,0.3\n1,1,0.0\n",
    )
    with pytest.raises(core.DataValueError) as info:
        datafile.load_csv(path)
    assert info.value.line == 5
    assert "line 5" in str(info.value)


@pytest.mark.parametrize(
    "text, error",
    [
        ("", core.SchemaError),
        ("g,y,x0\n1,0,0.5\n", core.SchemaError),
        ("y,g,x1\n0,1,0.5\n", core.SchemaError),
        ("y,g\n0,1\n", core.SchemaError),
        ("y,g,x0\n", core.SizeError),
        ("y,g,x0\n0,1\n", core.ParseError),
        ("y,g,x0\n0,1,abc\n", core.ParseError),
        ("y,g,x0\n0,one,0.5\n", core.ParseError),
        ("y,g,x0\n0,0,0.5\n", core.DataValueError),
        ("y,g,x0\n0,1,inf\n", core.DataValueError),
    ],
)
def test_load_csv_errors(tmp_path, text, error):
    with pytest.raises(error):
        datafile.load_csv(_write(tmp_path / "data.csv", text))


def test_load_csv_schema(tmp_path):
    path = _write(tmp_path / "data.csv", "y,g,x0,x1\n0,3,0.5,1\n1,1,0.5,2\n")
    with pytest.raises(core.SchemaError):
        datafile.load_csv(path, DatasetSchema(d=3))
    with pytest.raises(core.DataValueError):
        datafile.load_csv(path, DatasetSchema(n_groups=2))
    data = datafile.load_csv(path, DatasetSchema(n_groups=4))
    assert data.G == 4


def test_shift_file(tmp_path):
    shift = ShiftSpec([0.7, 0.3], [0.5, 0.5])
    path = datafile.write_shift(tmp_path / "shift.json", shift)
    loaded = datafile.read_shift(path)
    np.testing.assert_array_equal(loaded.p_train, shift.p_train)
    np.testing.assert_array_equal(loaded.p_test, shift.p_test)


def test_shift_file_errors(tmp_path):
    with pytest.raises(core.SchemaError):
        datafile.read_shift(_write(tmp_path / "a.json", '{"p_train": [1.0]}'))
    with pytest.raises(core.ParseError):
        datafile.read_shift(_write(tmp_path / "b.json", "{p_train"))
    with pytest.raises(core.DomainError):
        datafile.read_shift(
            _write(tmp_path / "c.json", '{"p_train": [0.5, 0.4], "p_test": [0.5, 0.5]}')
        )


def test_run_config_keys(tmp_path):
    path = _write(tmp_path / "run.json", '{"Learning-Rate": 0.2, "seed": 3}')
    assert datafile.read_run_config(path) == {"learning_rate": 0.2, "seed": 3}
    with pytest.raises(core.SchemaError):
        datafile.read_run_config(_write(tmp_path / "list.json", "[1, 2]"))


def test_write_table(tmp_path):
    path = datafile.write_table(
        tmp_path / "t.csv", ["n", "p"], [[10, 0.1], [20, np.float64(1 / 3)]]
    )
    lines = path.read_text().splitlines()
    assert lines == ["n,p", "10,0.1", f"20,{1 / 3!r}"]


def test_manifest_verify(tmp_path):
    out = datafile.write_shift(tmp_path / "shift.json", ShiftSpec([1.0], [1.0]))
    manifest = RunManifest("gen-data --seed 1", {"seed": 1}, [1], commit="abc")
    manifest.add_output(out)
    written = manifest.write(tmp_path / "manifest.json")
    content = json.loads(written.read_text())
    assert content["outputs"] == {"shift.json": manifest.outputs["shift.json"]}
    assert content["commit"] == "abc" and content["seeds"] == [1]
    assert manifest.verify(tmp_path) == []
    out.write_text("tampered")
    assert manifest.verify(tmp_path) == ["shift.json"]


def test_trace_lines(tmp_path, spurious_result):
    path = datafile.write_trace(tmp_path / "trace.jsonl", spurious_result.trace)
    records = datafile.read_trace(path)
    assert [r["step"] for r in records] == list(range(len(spurious_result.trace)))
    assert records[-1]["hypergradient"] is None
    assert records[0]["weights"] == spurious_result.trace[0].weights.tolist()


def test_weights_file(tmp_path, spurious_result):
    path = datafile.write_weights(tmp_path / "weights.json", spurious_result)
    content = json.loads(path.read_text())
    assert content["method"] == "gw-erm" and content["kind"] == "p"
    assert content["weights"] == spurious_result.weights.p.tolist()
    assert content["selected_step"] == spurious_result.selected_step

