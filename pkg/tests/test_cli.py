"""End-to-end command surface: artifacts, exit codes, and determinism."""

import numpy as np
import pytest
from click.testing import CliRunner

import anchorflow as af
from anchorflow import checkpoint as ckpt
from anchorflow.cli import main
from anchorflow.reporting import read_csv, read_summary


@pytest.fixture(scope="session")
def workspace(tmp_path_factory):
    """Small trained checkpoints shared by the CLI tests."""
    root = tmp_path_factory.mktemp("cli-ws")
    ds = af.SyntheticDataset(kind="labeled-clusters", dim=2, seed=0, n_classes=3)
    flow = af.train_flow(ds, af.TrainingConfig(batch_size=64, steps=400,
                                               learning_rate=0.02, seed=0,
                                               hidden=(32, 32)))
    ckpt.save_flow(root / "flow.aflw", flow, ds, seed=0)
    clf = af.train_clean_classifier(ds, af.TrainingConfig(steps=400,
                                                          learning_rate=0.05,
                                                          seed=0))
    ckpt.save_classifier(root / "clf.aflw", clf, ds, seed=0)
    nobj = af.train_noise_aware_classifier(
        ds, config=af.TrainingConfig(steps=400, learning_rate=0.05, seed=0))
    ckpt.save_noise_classifier(root / "nclf.aflw", nobj, ds, seed=0)
    return root


@pytest.fixture
def runner():
    return CliRunner()


def _guide_args(workspace, out, extra=()):
    return ["guide", "--out", str(out), "--seed", "5",
            "--set", f"guide.flow_checkpoint={workspace / 'flow.aflw'}",
            "--set", "guide.iterations=10", *extra]


def test_train_writes_artifacts_and_is_deterministic(runner, tmp_path):
    args = ["train", "--seed", "3",
            "--set", "dataset.kind=gaussian-mixture",
            "--set", "training.steps=40",
            "--set", "model.hidden=8,8"]
    for out in ("a", "b"):
        result = runner.invoke(main, args + ["--out", str(tmp_path / out)])
        assert result.exit_code == 0, result.output
    assert (tmp_path / "a" / "resolved_config.ini").exists()
    # the resolved config embeds the output path, so only the artifacts are
    # compared byte for byte
    for name in ("checkpoint.aflw", "loss_curve.csv"):
        assert ((tmp_path / "a" / name).read_bytes()
                == (tmp_path / "b" / name).read_bytes())
    field, _ = ckpt.load_flow(tmp_path / "a" / "checkpoint.aflw")
    assert field.dim == 2


def test_train_classifier_targets(runner, tmp_path):
    for target, kind in (("clean-classifier", "clean-classifier"),
                         ("noise-aware-classifier", "noise-aware-classifier")):
        out = tmp_path / target
        result = runner.invoke(main, [
            "train", "--out", str(out), "--seed", "0",
            "--set", "dataset.kind=labeled-clusters",
            "--set", f"train.target={target}",
            "--set", "training.steps=40"])
        assert result.exit_code == 0, result.output
        loaded = ckpt.load_checkpoint(out / "checkpoint.aflw")
        assert loaded.kind == kind


def test_train_reflow_target(runner, tmp_path, workspace):
    result = runner.invoke(main, [
        "train", "--out", str(tmp_path / "rf"), "--seed", "0",
        "--set", "dataset.kind=labeled-clusters",
        "--set", "train.target=reflow",
        "--set", f"train.flow_checkpoint={workspace / 'flow.aflw'}",
        "--set", "training.steps=40",
        "--set", "model.hidden=32,32"])
    assert result.exit_code == 0, result.output
    field, _ = ckpt.load_flow(tmp_path / "rf" / "checkpoint.aflw")
    assert field.frozen


def test_guide_anchored_bundle(runner, tmp_path, workspace):
    out = tmp_path / "run"
    result = runner.invoke(main, _guide_args(workspace, out))
    assert result.exit_code == 0, result.output
    for name in ("trajectory.csv", "reference_trajectory.csv",
                 "solver_series.csv", "summary.txt", "resolved_config.ini",
                 "residuals.svg", "trajectories.svg", "endpoints.svg"):
        assert (out / name).exists(), name
    entries = read_summary(out / "summary.txt")
    assert entries["method"] == "anchored"
    _, _, rows = read_csv(out / "solver_series.csv", "solver_series")
    assert len(rows) == 10


def test_guide_is_deterministic(runner, tmp_path, workspace):
    outs = [tmp_path / "r1", tmp_path / "r2"]
    for out in outs:
        assert runner.invoke(main, _guide_args(workspace, out)).exit_code == 0
    for name in ("trajectory.csv", "solver_series.csv", "summary.txt"):
        assert (outs[0] / name).read_bytes() == (outs[1] / name).read_bytes()


def test_guide_s_zero_matches_reference(runner, tmp_path, workspace):
    out = tmp_path / "s0"
    result = runner.invoke(main, _guide_args(workspace, out,
                                             ("--set", "guide.s=0")))
    assert result.exit_code == 0, result.output
    assert ((out / "trajectory.csv").read_bytes()
            == (out / "reference_trajectory.csv").read_bytes())


def test_guide_all_methods_run(runner, tmp_path, workspace):
    methods = {
        "unanchored": (),
        "straight-anchored": (),
        "noise-gd": (),
        "oracle-ode": ("--set", "objective.kind=noise-classifier",
                       "--set", f"objective.checkpoint={workspace / 'nclf.aflw'}",
                       "--set", "guide.oracle_steps=50"),
    }
    for method, extra in methods.items():
        out = tmp_path / method
        result = runner.invoke(main, _guide_args(
            workspace, out, ("--set", f"guide.method={method}", *extra)))
        assert result.exit_code == 0, f"{method}: {result.output}"
        assert read_summary(out / "summary.txt")["method"] == method


def test_guide_classifier_and_similarity_objectives(runner, tmp_path, workspace):
    combos = {
        "clf": ("--set", "objective.kind=classifier",
                "--set", f"objective.checkpoint={workspace / 'clf.aflw'}",
                "--set", "objective.target_class=1"),
        "sim": ("--set", "objective.kind=similarity",
                "--set", f"objective.encoder_checkpoint={workspace / 'clf.aflw'}",
                "--set", "objective.reference=2.0,0.5"),
        "l1": ("--set", "objective.l1_coeff=10", "--set",
               "objective.l1_reference=0,0"),
    }
    for name, extra in combos.items():
        result = runner.invoke(main, _guide_args(workspace, tmp_path / name, extra))
        assert result.exit_code == 0, f"{name}: {result.output}"


def test_guide_oracle_requires_noise_classifier(runner, tmp_path, workspace):
    result = runner.invoke(main, _guide_args(
        workspace, tmp_path / "bad", ("--set", "guide.method=oracle-ode")))
    assert result.exit_code == 2


def test_guide_divergence_exit_code(runner, tmp_path, workspace):
    out = tmp_path / "div"
    result = runner.invoke(main, _guide_args(workspace, out, (
        "--set", "guide.method=unanchored",
        "--set", "guide.s=50",
        "--set", "guide.normalize_gradient=false",
        "--set", "guide.iterations=30")))
    assert result.exit_code == 3
    assert read_summary(out / "summary.txt")["divergence"] == "True"


def test_missing_checkpoint_is_io_error(runner, tmp_path):
    result = runner.invoke(main, [
        "guide", "--out", str(tmp_path / "x"),
        "--set", "guide.flow_checkpoint=/nonexistent.aflw"])
    assert result.exit_code == 4


def test_unknown_config_key_exit_code(runner, tmp_path, workspace):
    result = runner.invoke(main, _guide_args(
        workspace, tmp_path / "x", ("--set", "guide.turbo=yes")))
    assert result.exit_code == 2
    assert "turbo" in result.output


def test_ablate_parallel_matches_serial(runner, tmp_path, workspace):
    base = ["ablate", "--seed", "0",
            "--set", f"ablate.flow_checkpoint={workspace / 'flow.aflw'}",
            "--set", "ablate.s_grid=0.5,1.0",
            "--set", "ablate.n_grid=5,10",
            "--set", "ablate.seeds=2"]
    serial = runner.invoke(main, base + ["--out", str(tmp_path / "serial")])
    assert serial.exit_code == 0, serial.output
    parallel = runner.invoke(main, base + ["--out", str(tmp_path / "par"),
                                           "--set", "ablate.workers=2"])
    assert parallel.exit_code == 0, parallel.output
    assert ((tmp_path / "serial" / "sweep.csv").read_bytes()
            == (tmp_path / "par" / "sweep.csv").read_bytes())
    _, _, rows = read_csv(tmp_path / "serial" / "sweep.csv", "sweep")
    assert len(rows) == 8


def test_props_verdicts(runner, tmp_path):
    result = runner.invoke(main, ["props", "--out", str(tmp_path / "props")])
    assert result.exit_code == 0, result.output
    _, header, rows = read_csv(tmp_path / "props" / "props.csv", "props")
    divergence = [r for r in rows if r[0] == "divergence"]
    assert divergence and all(r[2] == "1" for r in divergence)
    contraction = [r for r in rows if r[0] == "contraction"]
    for r in contraction:
        s, measured = float(r[1]), float(r[3])
        assert measured == pytest.approx(s, rel=0.1)
        assert r[2] == "0"


def test_report_merges_runs(runner, tmp_path, workspace):
    runs = []
    for method in ("anchored", "straight-anchored"):
        out = tmp_path / method
        result = runner.invoke(main, _guide_args(
            workspace, out, ("--set", f"guide.method={method}")))
        assert result.exit_code == 0
        runs.append(str(out))
    out = tmp_path / "merged"
    result = runner.invoke(main, ["report", *runs, "--out", str(out)])
    assert result.exit_code == 0, result.output
    _, header, rows = read_csv(out / "comparison.csv", "comparison")
    assert header[0] == "method"
    assert sorted(r[0] for r in rows) == ["anchored", "straight-anchored"]
    assert (out / "comparison.svg").exists()


def test_report_rejects_bad_summary(runner, tmp_path):
    bad = tmp_path / "badrun"
    bad.mkdir()
    (bad / "summary.txt").write_text("# schema=summary.v999\nmethod=x\n")
    result = runner.invoke(main, ["report", str(bad),
                                  "--out", str(tmp_path / "merged")])
    assert result.exit_code == 2
    empty = runner.invoke(main, ["report", "--out", str(tmp_path / "m2")])
    assert empty.exit_code == 2
