"""CSV tables, summary records, and matplotlib figure rendering.

CSV is the contract: every file starts with a ``# schema=<name>.v<version>``
header line and is written with ``repr`` float formatting so identical runs
produce byte-identical files. Figures are static SVG conveniences rendered
next to the tables.
"""

from __future__ import annotations

import csv
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt

matplotlib.rcParams["svg.hashsalt"] = "anchorflow"

SCHEMA_VERSIONS = {
    "trajectory": 1,
    "loss_curve": 1,
    "solver_series": 1,
    "sweep": 1,
    "props": 1,
    "summary": 1,
    "comparison": 1,
}


class SchemaError(Exception):
    pass


def _fmt(value) -> str:
    if isinstance(value, float):
        return repr(value)
    return str(value)


def write_csv(path, schema: str, header: list[str], rows) -> None:
    version = SCHEMA_VERSIONS[schema]
    with open(path, "w", newline="") as fh:
        fh.write(f"# schema={schema}.v{version}\n")
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(header)
        for row in rows:
            writer.writerow([_fmt(v) for v in row])


def read_csv(path, expected_schema: str | None = None):
    """Returns (schema tag, header, rows-as-strings); checks the schema tag."""
    with open(path, newline="") as fh:
        first = fh.readline().strip()
        if not first.startswith("# schema="):
            raise SchemaError(f"{path}: missing schema header line")
        tag = first[len("# schema="):]
        if expected_schema is not None:
            expected = f"{expected_schema}.v{SCHEMA_VERSIONS[expected_schema]}"
            if tag != expected:
                raise SchemaError(f"{path}: schema {tag} does not match {expected}")
        reader = csv.reader(fh)
        header = next(reader)
        rows = [row for row in reader if row]
    return tag, header, rows


def trajectory_rows(traj):
    boundary_times = (set(t for t, _ in traj.segment_endpoints)
                      if traj.segment_endpoints else set())
    for t, state in zip(traj.times, traj.states):
        yield [t, *state.tolist(), 1 if t in boundary_times else 0]


def write_trajectory(path, traj) -> None:
    dim = traj.dim
    header = ["t", *[f"z{i}" for i in range(dim)], "segment_flag"]
    write_csv(path, "trajectory", header, trajectory_rows(traj))


def write_solver_series(path, report) -> None:
    rows = [[i, r, o] for i, (r, o) in
            enumerate(zip(report.residual_series, report.objective_series))]
    write_csv(path, "solver_series", ["iteration", "residual", "objective"], rows)


def write_summary(path, entries: dict) -> None:
    """One key=value record per line; first line carries the schema tag."""
    with open(path, "w") as fh:
        fh.write(f"# schema=summary.v{SCHEMA_VERSIONS['summary']}\n")
        for key, value in entries.items():
            fh.write(f"{key}={_fmt(value)}\n")


def read_summary(path) -> dict:
    entries = {}
    with open(path) as fh:
        first = fh.readline().strip()
        expected = f"# schema=summary.v{SCHEMA_VERSIONS['summary']}"
        if first != expected:
            raise SchemaError(f"{path}: summary schema mismatch ({first!r})")
        for line in fh:
            line = line.strip()
            if not line:
                continue
            key, _, value = line.partition("=")
            entries[key] = value
    return entries


# ---------------------------------------------------------------------------
# figures


def _save(fig, path) -> None:
    fig.savefig(path, metadata={"Date": None})
    plt.close(fig)


def plot_series(series: dict[str, list], path, ylabel: str, logy: bool = False) -> None:
    fig, ax = plt.subplots(figsize=(5, 3.5))
    for label, values in series.items():
        ax.plot(range(len(values)), values, label=label)
    if logy:
        ax.set_yscale("log")
    ax.set_xlabel("iteration")
    ax.set_ylabel(ylabel)
    if len(series) > 1:
        ax.legend(fontsize=8)
    fig.tight_layout()
    _save(fig, path)


def plot_endpoints(pairs: list[tuple], path) -> None:
    """Scatter of guided vs reference endpoints (first two coordinates)."""
    fig, ax = plt.subplots(figsize=(4.5, 4.5))
    refs = [r for r, _ in pairs]
    guided = [g for _, g in pairs]
    ax.scatter([r[0] for r in refs], [r[1] for r in refs],
               s=14, label="reference", alpha=0.7)
    ax.scatter([g[0] for g in guided], [g[1] for g in guided],
               s=14, label="guided", alpha=0.7)
    for r, g in pairs:
        ax.plot([r[0], g[0]], [r[1], g[1]], color="gray", lw=0.5, alpha=0.5)
    ax.set_aspect("equal")
    ax.legend(fontsize=8)
    fig.tight_layout()
    _save(fig, path)


def plot_trajectories(trajectories: list, path, labels=None) -> None:
    fig, ax = plt.subplots(figsize=(4.5, 4.5))
    for i, traj in enumerate(trajectories):
        xs = [s[0] for s in traj.states]
        ys = [s[1] for s in traj.states]
        label = labels[i] if labels else None
        ax.plot(xs, ys, marker="o", ms=3, label=label)
    if labels:
        ax.legend(fontsize=8)
    ax.set_aspect("equal")
    fig.tight_layout()
    _save(fig, path)


def plot_sweep(rows, path) -> None:
    """Objective-vs-iterations curves, one line per guidance scale."""
    by_scale: dict[float, dict[int, list]] = {}
    for s, n, obj in rows:
        by_scale.setdefault(s, {}).setdefault(n, []).append(obj)
    fig, ax = plt.subplots(figsize=(5, 3.5))
    for s in sorted(by_scale):
        ns = sorted(by_scale[s])
        means = [sum(by_scale[s][n]) / len(by_scale[s][n]) for n in ns]
        ax.plot(ns, means, marker="o", label=f"s={s:g}")
    ax.set_xlabel("iterations")
    ax.set_ylabel("mean final objective")
    ax.legend(fontsize=8)
    fig.tight_layout()
    _save(fig, path)


def plot_comparison(rows, path) -> None:
    """Bar chart of mean final objective per method."""
    fig, ax = plt.subplots(figsize=(5, 3.5))
    methods = [r[0] for r in rows]
    means = [r[1] for r in rows]
    ax.bar(methods, means)
    ax.set_ylabel("mean final objective")
    fig.tight_layout()
    _save(fig, path)
