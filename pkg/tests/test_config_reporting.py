"""Config schema validation and the versioned CSV / summary contract."""

import numpy as np
import pytest

import anchorflow as af
from anchorflow.config import ConfigError, load_config
from anchorflow.reporting import (SchemaError, read_csv, read_summary,
                                  write_csv, write_summary, write_trajectory)


def test_defaults_resolve_without_file():
    cfg = load_config("props", None, ())
    assert cfg.get("props", "iterations") == 100
    assert cfg.get("run", "seed") == 0


def test_overrides_and_cli_precedence():
    cfg = load_config("train", None,
                      ("dataset.kind=checkerboard", "training.steps=5"),
                      seed=42, out="somewhere")
    assert cfg.get("dataset", "kind") == "checkerboard"
    assert cfg.get("training", "steps") == 5
    assert cfg.get("run", "seed") == 42
    assert cfg.get("run", "out") == "somewhere"


def test_unknown_key_and_section_rejected_by_name():
    with pytest.raises(ConfigError, match="training.warmup"):
        load_config("train", None, ("dataset.kind=rings", "training.warmup=10"))
    with pytest.raises(ConfigError, match=r"\[plotting\]"):
        load_config("train", None, ("dataset.kind=rings", "plotting.dpi=300"))


def test_missing_required_key_named():
    with pytest.raises(ConfigError, match="dataset.kind"):
        load_config("train", None, ())
    with pytest.raises(ConfigError, match="guide.flow_checkpoint"):
        load_config("guide", None, ())


def test_bad_value_and_bad_override_format():
    with pytest.raises(ConfigError, match="training.steps"):
        load_config("train", None, ("dataset.kind=rings", "training.steps=ten"))
    with pytest.raises(ConfigError):
        load_config("train", None, ("no-dots-or-equals",))


def test_config_file_round_trip(tmp_path):
    cfg = load_config("train", None, ("dataset.kind=checkerboard",
                                      "model.hidden=8,8"))
    path = tmp_path / "resolved.ini"
    cfg.write(path)
    again = load_config("train", path, ())
    assert again.values == cfg.values


def test_missing_config_file():
    with pytest.raises(ConfigError):
        load_config("train", "/nonexistent/path.ini", ())


def test_csv_schema_line_and_round_trip(tmp_path):
    path = tmp_path / "table.csv"
    write_csv(path, "sweep", ["a", "b"], [[1, 0.5], [2, 0.25]])
    first = path.read_text().splitlines()[0]
    assert first == "# schema=sweep.v1"
    tag, header, rows = read_csv(path, expected_schema="sweep")
    assert header == ["a", "b"]
    assert rows == [["1", "0.5"], ["2", "0.25"]]


def test_csv_schema_mismatch(tmp_path):
    path = tmp_path / "table.csv"
    write_csv(path, "sweep", ["a"], [[1]])
    with pytest.raises(SchemaError):
        read_csv(path, expected_schema="props")
    bare = tmp_path / "bare.csv"
    bare.write_text("a,b\n1,2\n")
    with pytest.raises(SchemaError):
        read_csv(bare)


def test_csv_float_formatting_is_repr(tmp_path):
    path = tmp_path / "floats.csv"
    value = 1.0 / 3.0
    write_csv(path, "sweep", ["x"], [[value]])
    assert repr(value) in path.read_text()


def test_summary_round_trip(tmp_path):
    path = tmp_path / "summary.txt"
    write_summary(path, {"method": "anchored", "s": 1.0, "converged": True})
    entries = read_summary(path)
    assert entries == {"method": "anchored", "s": "1.0", "converged": "True"}
    bad = tmp_path / "bad.txt"
    bad.write_text("method=anchored\n")
    with pytest.raises(SchemaError):
        read_summary(bad)


def test_trajectory_csv_marks_boundaries(tmp_path):
    field = af.ConstantVelocityField(np.array([1.0, 0.0]))
    traj = af.piecewise_sample(field, np.zeros(2), af.TimeWindows.uniform(2))
    path = tmp_path / "traj.csv"
    write_trajectory(path, traj)
    _, header, rows = read_csv(path, expected_schema="trajectory")
    assert header == ["t", "z0", "z1", "segment_flag"]
    flags = [r[-1] for r in rows]
    assert flags == ["0", "1", "1"]
