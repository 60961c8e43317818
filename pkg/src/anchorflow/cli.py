"""Command-line surface: train, guide, ablate, props, report.

Every command resolves its configuration (file + ``--set`` overrides), writes
the resolved config next to its outputs, and emits versioned CSV tables with
SVG figures. Exit codes: 0 success, 2 config error, 3 solver divergence,
4 I/O error.
"""

from __future__ import annotations

import functools
import os
import sys
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

import click
import numpy as np

from . import checkpoint as ckpt
from .config import ConfigError, RunConfig, load_config
from .flow import (SyntheticDataset, TrainingConfig, TrainingDiverged,
                   reflow, train_flow)
from .guidance import (GuidanceConfig, SolverReport, anchored_fixed_point_straight,
                       anchored_piecewise_solve, contraction_estimate,
                       guided_ode_sample, noise_gradient_descent,
                       unanchored_fixed_point)
from .objectives import (NoiseAwareObjective, composite_objective,
                         feature_similarity_objective, FeatureEncoder,
                         gaussian_objective, prop1_construction,
                         train_clean_classifier, train_noise_aware_classifier)
from .flow import ConstantVelocityField
from .reporting import (SchemaError, plot_comparison, plot_endpoints,
                        plot_series, plot_sweep, plot_trajectories,
                        read_summary, write_csv, write_solver_series,
                        write_summary, write_trajectory)
from .sampler import TimeWindows, piecewise_sample

OUT_ROOT_ENV = "ANCHORFLOW_OUT_ROOT"

EXIT_CONFIG = 2
EXIT_DIVERGENCE = 3
EXIT_IO = 4


class SolverDivergence(Exception):
    pass


def _parse_vector(raw: str, what: str) -> np.ndarray:
    try:
        values = [float(x) for x in raw.split(",") if x.strip() != ""]
    except ValueError:
        raise ConfigError(f"{what} must be a comma-separated vector: {raw!r}")
    if not values:
        raise ConfigError(f"{what} is empty")
    return np.asarray(values)


def _resolve_out(cfg: RunConfig, command: str) -> Path:
    out = cfg.get("run", "out")
    if not out:
        root = os.environ.get(OUT_ROOT_ENV, "runs")
        out = str(Path(root) / f"{command}-seed{cfg.get('run', 'seed')}")
    path = Path(out)
    path.mkdir(parents=True, exist_ok=True)
    return path


def _dataset_from_config(cfg: RunConfig) -> SyntheticDataset:
    section = cfg["dataset"]
    means = None
    if section["means"]:
        flat = _parse_vector(section["means"], "dataset.means")
        means = flat.reshape(-1, section["dim"]).tolist()
    try:
        return SyntheticDataset(kind=section["kind"], dim=section["dim"],
                                seed=cfg.get("run", "seed"),
                                n_classes=section["n_classes"],
                                spread=section["spread"], means=means)
    except ValueError as exc:
        raise ConfigError(str(exc))


def build_objective(section: dict, target_class_override=None):
    """Construct a guidance objective from an [objective] config section."""
    kind = section["kind"]
    target_class = (target_class_override if target_class_override is not None
                    else section["target_class"])
    if kind == "gaussian":
        obj = gaussian_objective(_parse_vector(section["mean"], "objective.mean"),
                                 section["scale"])
    elif kind == "classifier":
        if not section["checkpoint"]:
            raise ConfigError("objective.checkpoint is required for kind=classifier")
        obj = ckpt.load_classifier(section["checkpoint"]).objective_for(target_class)
    elif kind == "noise-classifier":
        if not section["checkpoint"]:
            raise ConfigError("objective.checkpoint is required for kind=noise-classifier")
        obj = ckpt.load_noise_classifier(section["checkpoint"], target_class)
    elif kind == "similarity":
        if section["encoder_checkpoint"]:
            family = ckpt.load_classifier(section["encoder_checkpoint"])
            encoder = FeatureEncoder(family.mlp)
        else:
            encoder = FeatureEncoder()
        if not section["reference"]:
            raise ConfigError("objective.reference is required for kind=similarity")
        obj = feature_similarity_objective(
            encoder, _parse_vector(section["reference"], "objective.reference"))
    else:
        raise ConfigError(f"unknown objective kind '{kind}'")
    if section["l1_coeff"] > 0:
        if not section["l1_reference"]:
            raise ConfigError("objective.l1_reference is required when l1_coeff > 0")
        obj = composite_objective(
            obj, _parse_vector(section["l1_reference"], "objective.l1_reference"),
            section["l1_coeff"])
    return obj


# ---------------------------------------------------------------------------
# command bodies


def cmd_train(cfg: RunConfig) -> Path:
    out = _resolve_out(cfg, "train")
    cfg.write(out / "resolved_config.ini")
    seed = cfg.get("run", "seed")
    target = cfg.get("train", "target")
    dataset = _dataset_from_config(cfg)
    training = TrainingConfig(
        batch_size=cfg.get("training", "batch_size"),
        steps=cfg.get("training", "steps"),
        learning_rate=cfg.get("training", "learning_rate"),
        lr_decay=cfg.get("training", "lr_decay"),
        momentum=cfg.get("training", "momentum"),
        optimizer=cfg.get("training", "optimizer"),
        seed=seed,
        hidden=tuple(cfg.get("model", "hidden")),
        time_width=cfg.get("model", "time_width"),
    )
    if target == "flow":
        field = train_flow(dataset, training)
        ckpt.save_flow(out / "checkpoint.aflw", field, dataset, seed)
        losses = field.training_loss
    elif target == "reflow":
        base_path = cfg.get("train", "flow_checkpoint")
        if not base_path:
            raise ConfigError("missing required config key: train.flow_checkpoint")
        base, _ = ckpt.load_flow(base_path)
        field = reflow(base, training)
        ckpt.save_flow(out / "checkpoint.aflw", field, dataset, seed)
        losses = field.training_loss
    elif target == "clean-classifier":
        family = train_clean_classifier(dataset, training)
        ckpt.save_classifier(out / "checkpoint.aflw", family, dataset, seed)
        losses = []
    elif target == "noise-aware-classifier":
        objective = train_noise_aware_classifier(dataset, config=training,
                                                 time_width=cfg.get("model", "time_width"))
        ckpt.save_noise_classifier(out / "checkpoint.aflw", objective, dataset, seed)
        losses = []
    else:
        raise ConfigError(f"unknown train target '{target}'")
    write_csv(out / "loss_curve.csv", "loss_curve", ["step", "loss"],
              [[i, v] for i, v in enumerate(losses)])
    if losses:
        plot_series({"training loss": losses}, out / "loss_curve.svg", "loss")
    return out


def _guidance_config(section: dict) -> GuidanceConfig:
    try:
        return GuidanceConfig(
            s=section["s"], n_iterations=section["iterations"],
            windows=section["windows"], residual_tolerance=section["tolerance"],
            normalize_gradient=section["normalize_gradient"],
            return_policy=section["return_policy"],
        )
    except ValueError as exc:
        raise ConfigError(str(exc))


def cmd_guide(cfg: RunConfig) -> tuple[Path, SolverReport]:
    out = _resolve_out(cfg, "guide")
    cfg.write(out / "resolved_config.ini")
    section = cfg["guide"]
    method = section["method"]
    field, _ = ckpt.load_flow(section["flow_checkpoint"])
    objective = build_objective(cfg["objective"])
    gcfg = _guidance_config(section)
    seed = cfg.get("run", "seed")
    rng = np.random.default_rng(seed)
    z0 = rng.standard_normal(field.dim)
    windows = gcfg.time_windows()
    reference = piecewise_sample(field, z0, windows)

    if method == "anchored":
        report = anchored_piecewise_solve(field, objective, z0, gcfg)
    elif method == "unanchored":
        report = unanchored_fixed_point(field, objective, z0, gcfg)
    elif method == "straight-anchored":
        report = anchored_fixed_point_straight(field, objective, z0, gcfg)
    elif method == "noise-gd":
        report = noise_gradient_descent(field, objective, z0,
                                        lr=section["lr"],
                                        momentum=section["momentum"],
                                        l2_coeff=section["l2_coeff"],
                                        n_iterations=section["iterations"],
                                        windows=windows)
    elif method == "oracle-ode":
        if not isinstance(objective, NoiseAwareObjective):
            raise ConfigError(
                "method=oracle-ode requires objective.kind=noise-classifier")
        traj = guided_ode_sample(field, objective, z0,
                                 section["oracle_steps"], gcfg.s)
        report = SolverReport(method="oracle-ode", residual_series=[],
                              objective_series=[objective.value(traj.endpoint)],
                              converged=True, iterations_used=section["oracle_steps"],
                              divergence_flag=False, final_trajectory=traj)
    else:
        raise ConfigError(f"unknown guide method '{method}'")

    write_trajectory(out / "reference_trajectory.csv", reference)
    write_trajectory(out / "trajectory.csv", report.final_trajectory)
    write_solver_series(out / "solver_series.csv", report)
    write_summary(out / "summary.txt", {
        "method": method,
        "seed": seed,
        "s": gcfg.s,
        "iterations": report.iterations_used,
        "windows": gcfg.windows,
        "converged": report.converged,
        "divergence": report.divergence_flag,
        "final_objective": report.final_objective,
        "anchoring_distance": (report.anchoring_distance
                               if report.anchoring_distance is not None else ""),
    })
    if report.residual_series:
        plot_series({"residual": report.residual_series},
                    out / "residuals.svg", "endpoint residual", logy=True)
        plot_series({"objective": report.objective_series},
                    out / "objective.svg", "objective")
    if field.dim >= 2:
        plot_trajectories([reference, report.final_trajectory],
                          out / "trajectories.svg", labels=["reference", "guided"])
        plot_endpoints([(reference.endpoint, report.endpoint)], out / "endpoints.svg")
    if report.divergence_flag:
        raise SolverDivergence(f"{method} solver diverged")
    return out, report


@functools.lru_cache(maxsize=4)
def _cached_flow(path: str):
    return ckpt.load_flow(path)[0]


def _ablate_cell(args):
    flow_path, objective_items, s, n, seed, windows, normalize = args
    field = _cached_flow(flow_path)
    objective = build_objective(dict(objective_items))
    gcfg = GuidanceConfig(s=s, n_iterations=n, windows=windows,
                          normalize_gradient=normalize)
    z0 = np.random.default_rng(seed).standard_normal(field.dim)
    report = anchored_piecewise_solve(field, objective, z0, gcfg)
    return [s, n, seed, report.final_objective,
            int(report.converged), int(report.divergence_flag)]


def cmd_ablate(cfg: RunConfig) -> Path:
    out = _resolve_out(cfg, "ablate")
    cfg.write(out / "resolved_config.ini")
    section = cfg["ablate"]
    s_grid, n_grid = section["s_grid"], section["n_grid"]
    if not s_grid or not n_grid:
        raise ConfigError("ablate grids must be nonempty")
    base_seed = cfg.get("run", "seed")
    objective_items = tuple(sorted(cfg["objective"].items()))
    tasks = [(section["flow_checkpoint"], objective_items, s, n,
              base_seed + i, section["windows"], section["normalize_gradient"])
             for s in s_grid for n in n_grid for i in range(section["seeds"])]
    workers = section["workers"]
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            rows = list(pool.map(_ablate_cell, tasks))
    else:
        rows = [_ablate_cell(t) for t in tasks]
    rows.sort(key=lambda r: (r[0], r[1], r[2]))
    write_csv(out / "sweep.csv", "sweep",
              ["s", "iterations", "seed", "final_objective", "converged", "diverged"],
              rows)
    plot_sweep([(r[0], r[1], r[3]) for r in rows], out / "sweep.svg")
    return out


def cmd_props(cfg: RunConfig) -> Path:
    out = _resolve_out(cfg, "props")
    cfg.write(out / "resolved_config.ini")
    section = cfg["props"]
    if not section["s_grid"] or not section["rate_grid"]:
        raise ConfigError("props grids must be nonempty")
    rows = []
    # divergence of the unanchored iteration on the expansive construction
    div_field, div_objective = prop1_construction(section["lipschitz"])
    for s in section["s_grid"]:
        gcfg = GuidanceConfig(s=s, n_iterations=section["iterations"],
                              normalize_gradient=False, windows=1,
                              return_policy="last")
        report = unanchored_fixed_point(div_field, div_objective,
                                        np.array([1.0]), gcfg)
        rows.append(["divergence", s, int(report.divergence_flag), "", ""])
    # contraction rates of the anchored iteration on the closed-form case
    field = ConstantVelocityField(np.zeros(2))
    objective = gaussian_objective(np.array([1.0, 1.0]), 1.0)
    l1, l2, s_max = contraction_estimate(field, objective,
                                         (np.array([-1.0, -1.0]),
                                          np.array([1.0, 1.0])), 16)
    for s in section["rate_grid"]:
        gcfg = GuidanceConfig(s=s, n_iterations=section["iterations"],
                              normalize_gradient=False, windows=1,
                              return_policy="last")
        report = anchored_fixed_point_straight(field, objective,
                                               np.zeros(2), gcfg)
        rows.append(["contraction", s, int(report.divergence_flag),
                     report.measured_rate if report.measured_rate is not None else "",
                     s_max])
    write_csv(out / "props.csv", "props",
              ["check", "s", "diverged", "measured_rate", "s_max"], rows)
    rates = [(r[1], r[3]) for r in rows if r[0] == "contraction" and r[3] != ""]
    if rates:
        import matplotlib.pyplot as plt
        fig, ax = plt.subplots(figsize=(4.5, 3.5))
        ax.plot([r[0] for r in rates], [r[1] for r in rates], marker="o",
                label="measured")
        ax.plot([r[0] for r in rates], [r[0] for r in rates], ls="--",
                label="predicted")
        ax.set_xlabel("guidance scale")
        ax.set_ylabel("contraction rate")
        ax.legend(fontsize=8)
        fig.tight_layout()
        fig.savefig(out / "rates.svg", metadata={"Date": None})
        plt.close(fig)
    return out


def cmd_report(run_dirs, cfg: RunConfig) -> Path:
    if not run_dirs:
        raise ConfigError("report needs at least one run directory")
    out = _resolve_out(cfg, "report")
    groups: dict[str, list[dict]] = {}
    for run_dir in run_dirs:
        summary_path = Path(run_dir) / "summary.txt"
        if not summary_path.exists():
            raise ConfigError(f"no summary record in {run_dir}")
        entries = read_summary(summary_path)
        groups.setdefault(entries["method"], []).append(entries)
    rows = []
    for method in sorted(groups):
        entries = groups[method]
        objectives = [float(e["final_objective"]) for e in entries]
        converged = [e["converged"] == "True" for e in entries]
        anchors = [float(e["anchoring_distance"]) for e in entries
                   if e.get("anchoring_distance")]
        rows.append([method,
                     float(np.mean(objectives)),
                     float(np.mean(converged)),
                     float(np.mean(anchors)) if anchors else ""])
    write_csv(out / "comparison.csv", "comparison",
              ["method", "mean_final_objective", "convergence_fraction",
               "mean_anchoring_distance"], rows)
    plot_comparison([(r[0], r[1]) for r in rows], out / "comparison.svg")
    return out


# ---------------------------------------------------------------------------
# click wiring


def _common_options(fn):
    fn = click.option("--config", "config_path", type=click.Path(), default=None,
                      help="INI config file")(fn)
    fn = click.option("--seed", type=int, default=None, help="global seed override")(fn)
    fn = click.option("--out", type=click.Path(), default=None,
                      help="output directory")(fn)
    fn = click.option("--set", "overrides", multiple=True, metavar="SECTION.KEY=VALUE",
                      help="config override, repeatable")(fn)
    return fn


def _dispatch(command, body, config_path, seed, out, overrides, extra_args=()):
    try:
        cfg = load_config(command, config_path, overrides, seed=seed, out=out)
        body(*extra_args, cfg) if extra_args else body(cfg)
    except (ConfigError, SchemaError) as exc:
        click.echo(f"config error: {exc}", err=True)
        sys.exit(EXIT_CONFIG)
    except SolverDivergence as exc:
        click.echo(f"solver divergence: {exc}", err=True)
        sys.exit(EXIT_DIVERGENCE)
    except TrainingDiverged as exc:
        click.echo(f"training divergence: {exc}", err=True)
        sys.exit(EXIT_DIVERGENCE)
    except (OSError, ckpt.CheckpointError) as exc:
        click.echo(f"i/o error: {exc}", err=True)
        sys.exit(EXIT_IO)


@click.group()
def main():
    """Rectified-flow training, sampling, and anchored guidance solvers."""


@main.command()
@_common_options
def train(config_path, seed, out, overrides):
    """Train a flow, a classifier, or run one reflow round."""
    _dispatch("train", cmd_train, config_path, seed, out, overrides)


@main.command()
@_common_options
def guide(config_path, seed, out, overrides):
    """Run one guidance solver and write its report bundle."""
    _dispatch("guide", lambda cfg: cmd_guide(cfg), config_path, seed, out, overrides)


@main.command()
@_common_options
def ablate(config_path, seed, out, overrides):
    """Sweep guidance scale and iteration count over seeds."""
    _dispatch("ablate", cmd_ablate, config_path, seed, out, overrides)


@main.command()
@_common_options
def props(config_path, seed, out, overrides):
    """Run the divergence grid and contraction-rate fits."""
    _dispatch("props", cmd_props, config_path, seed, out, overrides)


@main.command()
@click.argument("run_dirs", nargs=-1, type=click.Path())
@_common_options
def report(run_dirs, config_path, seed, out, overrides):
    """Merge solver runs into a comparison table and plot."""
    _dispatch("report", cmd_report, config_path, seed, out, overrides,
              extra_args=(run_dirs,))


if __name__ == "__main__":
    main()
