"""ODE samplers, trajectory geometry, and endpoint vector-Jacobian products."""

from __future__ import annotations

from dataclasses import dataclass, field as dc_field

import numpy as np

from .autodiff import ComputeTape, NonFiniteValue, as_f64, vjp
from .flow import VelocityField


@dataclass(frozen=True)
class TimeWindows:
    """Strictly increasing boundaries t_0 = 0 < ... < t_K = 1."""

    boundaries: tuple

    def __post_init__(self):
        b = np.asarray(self.boundaries, dtype=np.float64)
        if b.ndim != 1 or len(b) < 2:
            raise ValueError("windows need at least boundaries 0 and 1")
        if b[0] != 0.0 or b[-1] != 1.0:
            raise ValueError("window boundaries must start at 0 and end at 1")
        if np.any(np.diff(b) <= 0):
            raise ValueError("window boundaries must be strictly increasing")
        object.__setattr__(self, "boundaries", tuple(float(x) for x in b))

    @classmethod
    def uniform(cls, k: int) -> "TimeWindows":
        if k < 1:
            raise ValueError("window count must be at least 1")
        return cls(tuple(np.linspace(0.0, 1.0, k + 1)))

    @property
    def count(self) -> int:
        return len(self.boundaries) - 1


@dataclass
class Trajectory:
    """Ordered (time, state) pairs from t=0 to t=1, all states finite."""

    times: list
    states: list
    segment_endpoints: list | None = None  # (t_k, extrapolated state) per window
    field_version: int = 0

    def __post_init__(self):
        if len(self.times) != len(self.states) or len(self.times) < 2:
            raise ValueError("trajectory needs aligned times and states, at least two")
        t = np.asarray(self.times, dtype=np.float64)
        if t[0] != 0.0 or t[-1] != 1.0 or np.any(np.diff(t) <= 0):
            raise ValueError("trajectory times must increase strictly from 0 to 1")
        self.states = [as_f64(s) for s in self.states]
        for s in self.states:
            if not np.all(np.isfinite(s)):
                raise NonFiniteValue("trajectory contains a non-finite state")

    @property
    def endpoint(self) -> np.ndarray:
        return self.states[-1]

    @property
    def dim(self) -> int:
        return self.states[0].shape[-1]


def euler_sample(field: VelocityField, z0, n_steps: int) -> Trajectory:
    """Fixed-step Euler integration of dz = v(z, t) dt over [0, 1]."""
    if n_steps < 1:
        raise ValueError("n_steps must be at least 1")
    z = as_f64(z0)
    dt = 1.0 / n_steps
    times, states = [0.0], [z]
    for i in range(n_steps):
        t = i * dt
        z = z + field.velocity(z, t) * dt
        if not np.all(np.isfinite(z)):
            raise NonFiniteValue(f"Euler state became non-finite at step {i + 1}")
        times.append((i + 1) * dt)
        states.append(z)
    times[-1] = 1.0
    return Trajectory(times, states, field_version=field.version)


def piecewise_sample(field: VelocityField, z0, windows: TimeWindows,
                     substeps_per_window: int = 1) -> Trajectory:
    """Per-window Euler with the entry velocity held when substeps == 1.

    Each window records an extrapolated segment endpoint: the velocity of the
    last substep carried to the window end (identical to the exit state under
    this discretization, but bookkept separately because the guidance solver
    re-extrapolates windows from detached starting points).
    """
    if substeps_per_window < 1:
        raise ValueError("substeps_per_window must be at least 1")
    z = as_f64(z0)
    times, states = [0.0], [z]
    endpoints = []
    bounds = windows.boundaries
    for k in range(windows.count):
        t_lo, t_hi = bounds[k], bounds[k + 1]
        dt = (t_hi - t_lo) / substeps_per_window
        for j in range(substeps_per_window):
            t = t_lo + j * dt
            z = z + field.velocity(z, t) * dt
            if not np.all(np.isfinite(z)):
                raise NonFiniteValue("piecewise state became non-finite")
            times.append(t_lo + (j + 1) * dt)
            states.append(z)
        endpoints.append((t_hi, z))
        times[-1] = t_hi
    times[-1] = 1.0
    return Trajectory(times, states, segment_endpoints=endpoints,
                      field_version=field.version)


def straightness_deviation(traj: Trajectory) -> float:
    """Mean distance of interior states to the z0->z1 chord, over chord length.

    Exactly zero for colinear trajectories: perpendicular components at
    floating-point noise level relative to the chord are clamped to 0, so the
    projection arithmetic cannot leave an epsilon-sized residue. Also zero, by
    convention, for degenerate chords.
    """
    if len(traj.states) < 3:
        raise ValueError("straightness needs at least 3 states")
    z0, z1 = traj.states[0], traj.states[-1]
    chord = z1 - z0
    length = float(np.linalg.norm(chord))
    if length < 1e-12:
        return 0.0
    direction = chord / length
    dists = []
    for s in traj.states[1:-1]:
        offset = s - z0
        along = float(np.dot(offset, direction))
        perp = float(np.linalg.norm(offset - along * direction))
        if perp <= 1e-12 * (length + float(np.linalg.norm(offset))):
            perp = 0.0
        dists.append(perp)
    return float(np.mean(dists)) / length


def _tape_window_step(tape, field, z_node, t_lo, t_hi, substeps):
    """Advance one window on the tape; returns the window-exit node."""
    dt = (t_hi - t_lo) / substeps
    z = z_node
    for j in range(substeps):
        t = t_lo + j * dt
        v = field.velocity_node(tape, z, t)
        z = tape.add(z, tape.scale(v, dt))
    return z


def endpoint_vjp(field: VelocityField, z0, windows: TimeWindows, cotangent,
                 straight_through: bool = False, substeps_per_window: int = 1) -> np.ndarray:
    """Cotangent pulled back from the extrapolated endpoint z1^e to z0.

    With ``straight_through`` the Jacobian across each segment boundary is
    taken as identity: windows are differentiated separately from their
    numerical entry states and the cotangent is chained across them.
    """
    z0 = as_f64(z0)
    u = as_f64(cotangent)
    if u.shape != z0.shape:
        raise ValueError(f"cotangent shape {u.shape} does not match state shape {z0.shape}")
    bounds = windows.boundaries
    if not straight_through:
        tape = ComputeTape()
        z = tape.input(z0)
        for k in range(windows.count):
            z = _tape_window_step(tape, field, z, bounds[k], bounds[k + 1],
                                  substeps_per_window)
        tape.seal(z)
        (grad,), _ = vjp(tape, u)
        return grad
    traj = piecewise_sample(field, z0, windows, substeps_per_window)
    entries = [z0] + [state for _, state in traj.segment_endpoints[:-1]]
    return chain_window_vjps(field, entries, windows, u, substeps_per_window)[0]


def window_entry_vjp(field: VelocityField, entry, t_lo: float, t_hi: float,
                     cotangent, substeps: int = 1) -> np.ndarray:
    """Pull a cotangent at the window-exit state back to the window entry."""
    tape = ComputeTape()
    z = tape.input(as_f64(entry))
    z = _tape_window_step(tape, field, z, t_lo, t_hi, substeps)
    tape.seal(z)
    (grad,), _ = vjp(tape, as_f64(cotangent))
    return grad


def chain_window_vjps(field: VelocityField, entries, windows: TimeWindows,
                      cotangent, substeps: int = 1) -> list[np.ndarray]:
    """Boundary cotangents u_k = [d z1^e / d z_{t_k}]^T u, straight-through.

    ``entries[k]`` is the entry state of window k+1; returns cotangents at
    boundaries t_0 .. t_{K-1} plus the endpoint cotangent last, i.e. a list of
    K+1 vectors indexed by boundary.
    """
    bounds = windows.boundaries
    k = windows.count
    if len(entries) != k:
        raise ValueError(f"expected {k} window entry states, got {len(entries)}")
    cots = [None] * (k + 1)
    cots[k] = as_f64(cotangent)
    for j in range(k, 0, -1):
        cots[j - 1] = window_entry_vjp(field, entries[j - 1], bounds[j - 1],
                                       bounds[j], cots[j], substeps)
    return cots


def vjp_to_endpoint(field: VelocityField, z, t_start: float, n_steps: int,
                    cotangent) -> np.ndarray:
    """Cotangent pulled back from z1 to an intermediate state z at time t_start."""
    if not 0.0 <= t_start < 1.0:
        raise ValueError("t_start must lie in [0, 1)")
    tape = ComputeTape()
    zn = tape.input(as_f64(z))
    dt = (1.0 - t_start) / n_steps
    for i in range(n_steps):
        v = field.velocity_node(tape, zn, t_start + i * dt)
        zn = tape.add(zn, tape.scale(v, dt))
    tape.seal(zn)
    (grad,), _ = vjp(tape, as_f64(cotangent))
    return grad
