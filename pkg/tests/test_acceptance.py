"""Acceptance suite: one test per criterion, each printing a PASS/FAIL line.

Regression constants marked PINNED were recorded at the first green build and
are frozen with a 10% band; they guard against silent numerical drift."""

import numpy as np
import pytest
from click.testing import CliRunner

import anchorflow as af
from anchorflow import checkpoint as ckpt
from anchorflow.autodiff import central_difference
from anchorflow.cli import main
from anchorflow.flow import flow_matching_loss, flow_matching_loss_grads
from anchorflow.objectives import FeatureEncoder
from anchorflow.sampler import endpoint_vjp

# PINNED at first green build (checkerboard flow fixture, 32 probe noises)
PINNED_ENDPOINT_GAP = 1.4949606073492139
# PINNED at first green build (64 seeds, labeled-clusters fixture)
PINNED_CLASS_AGREEMENT = 62
PINNED_OBJECTIVE_IMPROVEMENT = 64


def _verdict(num: int, description: str, ok: bool) -> None:
    print(f"[{'PASS' if ok else 'FAIL'}] criterion {num}: {description}")
    assert ok, f"criterion {num}: {description}"


def test_criterion_1_gradient_correctness(tiny_field, clean_classifier,
                                          noise_classifier):
    rng = np.random.default_rng(100)
    tol = 1e-5
    ok = True

    for _ in range(20):  # flow-matching loss wrt parameters
        z0b = rng.standard_normal((4, 2))
        z1b = rng.standard_normal((4, 2))
        tb = rng.uniform(0.0, 1.0, 4)
        _, grads = flow_matching_loss_grads(tiny_field, z0b, z1b, tb)
        name = rng.choice(list(grads))
        arr = tiny_field.mlp.params[name]
        idx = tuple(int(rng.integers(0, s)) for s in arr.shape)

        def probe(v, idx=idx, arr=arr):
            old = arr[idx]
            arr[idx] = float(v)
            out = flow_matching_loss(tiny_field, z0b, z1b, tb)
            arr[idx] = old
            return out

        fd = float(central_difference(probe, np.array(arr[idx])))
        ok &= abs(fd - grads[name][idx]) <= tol * max(1.0, abs(fd))

    objectives = [clean_classifier.objective_for(1),
                  af.feature_similarity_objective(
                      FeatureEncoder(clean_classifier.mlp),
                      np.array([1.5, -0.5]))]
    for obj in objectives:
        for _ in range(20):
            z = rng.standard_normal(2)
            fd = central_difference(lambda p: obj.value(p), z)
            ok &= np.max(np.abs(fd - obj.gradient(z))) <= tol * max(1.0, np.max(np.abs(fd)))
    nobj = noise_classifier.for_class(0)
    for _ in range(20):
        z = rng.standard_normal(2)
        t = float(rng.uniform(0.1, 1.0))
        fd = central_difference(lambda p: nobj.value(p, t), z)
        ok &= np.max(np.abs(fd - nobj.gradient(z, t))) <= tol * max(1.0, np.max(np.abs(fd)))

    windows = af.TimeWindows.uniform(4)
    for _ in range(20):  # endpoint VJP, jointly differentiated
        z0 = rng.standard_normal(2)
        u = rng.standard_normal(2)
        g = endpoint_vjp(tiny_field, z0, windows, u, straight_through=False)
        fd = central_difference(
            lambda z: float(u @ af.piecewise_sample(tiny_field, z, windows).endpoint),
            z0)
        ok &= np.max(np.abs(fd - g)) <= tol * max(1.0, np.max(np.abs(fd)))

    _verdict(1, "gradients match central differences within 1e-5", ok)


def test_criterion_2_straight_flow_exactness():
    rng = np.random.default_rng(101)
    c = np.array([0.8, -1.1])
    field = af.ConstantVelocityField(c)
    ok = True
    for _ in range(5):
        z0 = rng.standard_normal(2)
        for n in (1, 13, 250):
            traj = af.euler_sample(field, z0, n)
            for t, state in zip(traj.times, traj.states):
                ok &= bool(np.allclose(state, z0 + c * t, atol=1e-13))
        for k in (1, 3, 4, 7):
            traj = af.piecewise_sample(field, z0, af.TimeWindows.uniform(k))
            ok &= bool(np.allclose(traj.endpoint, z0 + c, atol=1e-13))
        ok &= af.straightness_deviation(af.euler_sample(field, z0, 40)) == 0.0
        u = rng.standard_normal(2)
        for k in (1, 4):
            g = endpoint_vjp(field, z0, af.TimeWindows.uniform(k), u)
            ok &= bool(np.allclose(g, u, atol=1e-13))
    _verdict(2, "constant fields are exactly straight and VJP is identity", ok)


def test_criterion_3_closed_form_fixed_point():
    field = af.ConstantVelocityField(np.zeros(2))
    obj = af.gaussian_objective(np.array([1.0, 1.0]), 1.0)
    base = dict(normalize_gradient=False, return_policy="last", n_iterations=120)
    report = af.anchored_fixed_point_straight(field, obj, np.zeros(2),
                                              af.GuidanceConfig(s=1.0, **base))
    ok = bool(np.allclose(report.endpoint, [0.5, 0.5], atol=1e-8))
    ok &= report.converged
    for s in (0.1, 0.25, 0.5, 0.9):
        rep = af.anchored_fixed_point_straight(field, obj, np.zeros(2),
                                               af.GuidanceConfig(s=s, **base))
        ok &= abs(rep.measured_rate - s) <= 0.1 * s
    _verdict(3, "closed-form anchored fixed point and linear rates", ok)


def test_criterion_4_divergence_vs_contraction():
    field, obj = af.prop1_construction(2.0)
    ok = True
    for s in (0.01, 0.1, 0.5, 1.0):
        report = af.unanchored_fixed_point(
            field, obj, np.array([1.0]),
            af.GuidanceConfig(s=s, n_iterations=20, normalize_gradient=False,
                              return_policy="last"))
        ok &= report.divergence_flag
    constant = af.ConstantVelocityField(np.array([0.0]))
    l1, l2, s_max = af.contraction_estimate(constant, obj,
                                            (np.array([-1.0]), np.array([1.0])), 8)
    anchored = af.anchored_fixed_point_straight(
        constant, obj, np.array([1.0]),
        af.GuidanceConfig(s=0.8 * s_max, n_iterations=100,
                          normalize_gradient=False, return_policy="last"))
    ok &= anchored.converged and not anchored.divergence_flag
    _verdict(4, "expansive pair diverges unanchored, converges anchored below s_max", ok)


def test_criterion_5_flow_training_quality(checkerboard_flow):
    loss0 = checkerboard_flow.training_loss[0]
    lossf = float(np.mean(checkerboard_flow.training_loss[-200:]))
    ok = lossf < 0.5 * loss0
    rng = np.random.default_rng(1)
    gaps = [float(np.linalg.norm(
        af.piecewise_sample(checkerboard_flow, z0, af.TimeWindows.uniform(4)).endpoint
        - af.euler_sample(checkerboard_flow, z0, 1000).endpoint))
        for z0 in rng.standard_normal((32, 2))]
    gap = float(np.mean(gaps))
    ok &= abs(gap - PINNED_ENDPOINT_GAP) <= 0.1 * PINNED_ENDPOINT_GAP
    _verdict(5, f"loss ratio {lossf / loss0:.3f} < 0.5 and endpoint gap "
                f"{gap:.4f} within 10% of pinned", ok)


def test_criterion_6_reflow_straightens(checkerboard_flow):
    rng = np.random.default_rng(2)
    z0s = rng.standard_normal((256, 2))
    before = float(np.mean([af.straightness_deviation(
        af.euler_sample(checkerboard_flow, z, 100)) for z in z0s]))
    config = af.TrainingConfig(batch_size=256, steps=4000, learning_rate=0.005,
                               seed=1, hidden=(128, 128, 128))
    reflowed = af.reflow(checkerboard_flow, config)
    after = float(np.mean([af.straightness_deviation(
        af.euler_sample(reflowed, z, 100)) for z in z0s]))
    _verdict(6, f"mean straightness {before:.4f} -> {after:.4f} strictly decreases",
             after < before)


def test_criterion_7_oracle_agreement(clusters_flow, clean_classifier,
                                      noise_classifier):
    cfg = af.GuidanceConfig(s=1.0, n_iterations=100, windows=4)
    agree = improve = 0
    for seed in range(64):
        obj = noise_classifier.for_class(seed % 3)
        z0 = np.random.default_rng(seed).standard_normal(2)
        anchored = af.anchored_piecewise_solve(clusters_flow, obj, z0, cfg)
        oracle = af.guided_ode_sample(clusters_flow, obj, z0, 500, 1.0)
        unguided = af.piecewise_sample(clusters_flow, z0, af.TimeWindows.uniform(4))
        agree += int(clean_classifier.predict(anchored.endpoint)[0]
                     == clean_classifier.predict(oracle.endpoint)[0])
        improve += int(obj.value(anchored.endpoint) > obj.value(unguided.endpoint))
    ok = agree >= int(0.8 * 64) and improve >= int(np.ceil(0.9 * 64))
    # regression band around the pinned first-green values
    ok &= agree >= PINNED_CLASS_AGREEMENT - 3
    ok &= improve >= PINNED_OBJECTIVE_IMPROVEMENT - 3
    _verdict(7, f"class agreement {agree}/64 >= 80%, objective improvement "
                f"{improve}/64 >= 90%", ok)


def test_criterion_8_ablation_ordering(clusters_flow, noise_classifier):
    cfg = af.GuidanceConfig(s=1.0, n_iterations=100, windows=4)
    anchored, unanchored, noise_gd = [], [], []
    for seed in range(64):
        obj = noise_classifier.for_class(seed % 3)
        z0 = np.random.default_rng(seed).standard_normal(2)
        anchored.append(af.anchored_piecewise_solve(clusters_flow, obj, z0,
                                                    cfg).final_objective)
        unanchored.append(af.unanchored_fixed_point(clusters_flow, obj, z0,
                                                    cfg).final_objective)
        noise_gd.append(af.noise_gradient_descent(
            clusters_flow, obj, z0, lr=0.4, momentum=0.9, l2_coeff=1.0,
            n_iterations=100, windows=af.TimeWindows.uniform(4)).final_objective)
    anchored, unanchored, noise_gd = map(np.asarray, (anchored, unanchored, noise_gd))
    ok = anchored.mean() > unanchored.mean()
    ok &= anchored.var() < noise_gd.var()
    _verdict(8, f"anchored mean {anchored.mean():.3f} > unanchored "
                f"{unanchored.mean():.3f}; anchored var {anchored.var():.2e} < "
                f"noise-gd var {noise_gd.var():.2e}", ok)


def test_criterion_9_determinism_and_persistence(tmp_path):
    runner = CliRunner()
    train_args = ["train", "--seed", "11",
                  "--set", "dataset.kind=labeled-clusters",
                  "--set", "training.steps=60",
                  "--set", "model.hidden=16,16"]
    for out in ("t1", "t2"):
        result = runner.invoke(main, train_args + ["--out", str(tmp_path / out)])
        assert result.exit_code == 0, result.output
    ok = ((tmp_path / "t1" / "checkpoint.aflw").read_bytes()
          == (tmp_path / "t2" / "checkpoint.aflw").read_bytes())
    ok &= ((tmp_path / "t1" / "loss_curve.csv").read_bytes()
           == (tmp_path / "t2" / "loss_curve.csv").read_bytes())

    guide_args = ["guide", "--seed", "4",
                  "--set", f"guide.flow_checkpoint={tmp_path / 't1' / 'checkpoint.aflw'}",
                  "--set", "guide.iterations=15"]
    for out in ("g1", "g2"):
        result = runner.invoke(main, guide_args + ["--out", str(tmp_path / out)])
        assert result.exit_code == 0, result.output
    for name in ("trajectory.csv", "reference_trajectory.csv",
                 "solver_series.csv", "summary.txt"):
        ok &= ((tmp_path / "g1" / name).read_bytes()
               == (tmp_path / "g2" / name).read_bytes())

    field, ds = ckpt.load_flow(tmp_path / "t1" / "checkpoint.aflw")
    ckpt.save_flow(tmp_path / "again.aflw", field, ds, seed=11)
    ok &= ((tmp_path / "again.aflw").read_bytes()
           == (tmp_path / "t1" / "checkpoint.aflw").read_bytes())
    _verdict(9, "byte-identical CSVs and bit-exact checkpoint round trip", ok)


def test_criterion_10_s_zero_identity(tiny_field):
    rng = np.random.default_rng(103)
    obj = af.gaussian_objective(np.array([2.0, 2.0]), 1.0)
    ok = True
    for _ in range(5):
        z0 = rng.standard_normal(2)
        windows = af.TimeWindows.uniform(4)
        reference = af.piecewise_sample(tiny_field, z0, windows)
        piecewise = af.anchored_piecewise_solve(
            tiny_field, obj, z0, af.GuidanceConfig(s=0.0, n_iterations=8, windows=4))
        ok &= bool(np.array_equal(piecewise.endpoint, reference.endpoint))
        boundary = [s for _, s in reference.segment_endpoints]
        ok &= all(np.array_equal(a, b) for a, b in
                  zip(piecewise.final_trajectory.states[1:], boundary))
        single = af.piecewise_sample(tiny_field, z0, af.TimeWindows.uniform(1))
        straight = af.anchored_fixed_point_straight(
            tiny_field, obj, z0, af.GuidanceConfig(s=0.0, n_iterations=8, windows=1))
        ok &= bool(np.array_equal(straight.endpoint, single.endpoint))
    _verdict(10, "s=0 reproduces the unguided reference exactly", ok)
