"""Guidance solvers: vanilla guided ODE, unanchored and anchored fixed points,
the piecewise anchored algorithm, and the gradient-descent-on-noise baseline.

Every solver returns a :class:`SolverReport` with per-iteration residuals
(the l2 change of the endpoint), objective values, a convergence verdict, and
a divergence flag. Divergence means a non-finite iterate or residual growth
over 10 consecutive iterations.
"""

from __future__ import annotations

from dataclasses import dataclass, field as dc_field

import numpy as np

from .autodiff import NonFiniteValue, as_f64
from .flow import VelocityField
from .objectives import GuidanceObjective, NoiseAwareObjective
from .sampler import (TimeWindows, Trajectory, chain_window_vjps,
                      endpoint_vjp, piecewise_sample)

_DIVERGENCE_STREAK = 10


@dataclass
class GuidanceConfig:
    s: float = 1.0
    n_iterations: int = 100
    windows: int = 4
    residual_tolerance: float = 1e-4
    normalize_gradient: bool = True
    return_policy: str = "best-objective"  # or "last"
    stop_at_tolerance: bool = False
    substeps_per_window: int = 1
    straight_through: bool = True

    def __post_init__(self):
        if self.s < 0:
            raise ValueError("guidance scale must be nonnegative")
        if self.n_iterations < 1 or self.windows < 1:
            raise ValueError("iteration and window counts must be at least 1")
        if self.residual_tolerance <= 0:
            raise ValueError("residual tolerance must be positive")
        if self.return_policy not in ("last", "best-objective"):
            raise ValueError(f"unknown return policy '{self.return_policy}'")

    def time_windows(self) -> TimeWindows:
        return TimeWindows.uniform(self.windows)


@dataclass
class SolverReport:
    method: str
    residual_series: list
    objective_series: list
    converged: bool
    iterations_used: int
    divergence_flag: bool
    final_trajectory: Trajectory | None
    anchoring_distance: float | None = None
    measured_rate: float | None = None

    @property
    def final_objective(self) -> float:
        return self.objective_series[-1] if self.objective_series else float("nan")

    @property
    def endpoint(self) -> np.ndarray:
        return self.final_trajectory.endpoint


@dataclass
class PiecewiseState:
    """Reference and target trajectories of the piecewise solver at iteration i.

    Arrays are indexed by window boundary: ``reference_starts[k]`` is the
    reference starting point at t_k (boundary 0 is the shared z0), while
    ``segment_endpoints[k]`` and ``target_states[k]`` cover boundaries
    t_1 .. t_K.
    """

    field: VelocityField
    windows: TimeWindows
    substeps: int
    reference_starts: list
    segment_endpoints: list
    target_states: list
    iteration: int = 0

    @classmethod
    def initialize(cls, field: VelocityField, z0, windows: TimeWindows,
                   substeps: int = 1) -> "PiecewiseState":
        traj = piecewise_sample(field, z0, windows, substeps)
        ends = [state for _, state in traj.segment_endpoints]
        starts = [as_f64(z0)] + [e.copy() for e in ends]
        return cls(field, windows, substeps, starts,
                   [e.copy() for e in ends], [e.copy() for e in ends])

    @property
    def target_endpoint(self) -> np.ndarray:
        return self.target_states[-1]

    def extrapolate_window(self, k: int, entry: np.ndarray) -> np.ndarray:
        """Window k's endpoint extrapolated from the given entry state."""
        bounds = self.windows.boundaries
        dt = (bounds[k + 1] - bounds[k]) / self.substeps
        z = entry
        for j in range(self.substeps):
            z = z + self.field.velocity(z, bounds[k] + j * dt) * dt
        return z

    def extrapolate_endpoints(self) -> list[np.ndarray]:
        """Window endpoints re-extrapolated from the current starting points."""
        return [self.extrapolate_window(k, self.reference_starts[k])
                for k in range(self.windows.count)]

    def to_trajectory(self) -> Trajectory:
        bounds = self.windows.boundaries
        states = [self.reference_starts[0]] + list(self.target_states)
        endpoints = list(zip(bounds[1:], self.segment_endpoints))
        return Trajectory(list(bounds), states, segment_endpoints=endpoints,
                          field_version=self.field.version)


def normalize_gradient(g) -> np.ndarray:
    """g / ||g||_2, or the zero vector when the norm is negligible."""
    g = as_f64(g)
    norm = float(np.linalg.norm(g))
    if norm <= 1e-12:
        return np.zeros_like(g)
    return g / norm


def _prepare_gradient(objective, z, config: GuidanceConfig) -> np.ndarray:
    g = objective.gradient(z)
    if not np.all(np.isfinite(g)):
        raise NonFiniteValue("objective gradient is non-finite")
    return normalize_gradient(g) if config.normalize_gradient else g


def _measured_rate(residuals) -> float | None:
    """exp of the least-squares slope of log residuals against iteration.

    The fit stops once the residual has fallen ten decades below its starting
    value, before the floating-point noise floor flattens the slope. The first
    residual is dropped when enough points remain: it measures the distance
    from the seed point rather than an iterate-to-iterate contraction.
    """
    start = next((r for r in residuals if r > 1e-300), None)
    if start is None:
        return None
    floor = max(1e-14, 1e-10 * start)
    pts = []
    for i, r in enumerate(residuals):
        if r <= floor:
            break
        pts.append((i, r))
    if len(pts) >= 3:
        pts = pts[1:]
    if len(pts) < 2:
        return None
    xs = np.array([p[0] for p in pts], dtype=np.float64)
    ys = np.log([p[1] for p in pts])
    slope = np.polyfit(xs, ys, 1)[0]
    return float(np.exp(slope))


class _DivergenceMonitor:
    def __init__(self):
        self.streak = 0
        self.previous = None
        self.flag = False

    def observe(self, residual: float) -> bool:
        if not np.isfinite(residual):
            self.flag = True
            return True
        if self.previous is not None and residual > self.previous:
            self.streak += 1
        else:
            self.streak = 0
        self.previous = residual
        if self.streak >= _DIVERGENCE_STREAK:
            self.flag = True
        return self.flag


# ---------------------------------------------------------------------------
# vanilla classifier guidance (the oracle family)


def vanilla_guided_velocity(field: VelocityField, noise_aware: NoiseAwareObjective,
                            z, t: float, s: float) -> np.ndarray:
    """v(z, t) + s * grad_z log p(c | z at time t)."""
    v = field.velocity(as_f64(z), t)
    if s == 0.0:
        return v
    g = noise_aware.gradient(z, t)
    if not np.all(np.isfinite(g)):
        raise NonFiniteValue("noise-aware gradient is non-finite")
    return v + s * g


def guided_ode_sample(field: VelocityField, noise_aware: NoiseAwareObjective,
                      z0, n_steps: int, s: float) -> Trajectory:
    """Euler integration of the classifier-adjusted velocity."""
    if n_steps < 1:
        raise ValueError("n_steps must be at least 1")
    z = as_f64(z0)
    dt = 1.0 / n_steps
    times, states = [0.0], [z]
    for i in range(n_steps):
        t = i * dt
        z = z + vanilla_guided_velocity(field, noise_aware, z, t, s) * dt
        if not np.all(np.isfinite(z)):
            raise NonFiniteValue(f"guided Euler state became non-finite at step {i + 1}")
        times.append((i + 1) * dt)
        states.append(z)
    times[-1] = 1.0
    return Trajectory(times, states, field_version=field.version)


# ---------------------------------------------------------------------------
# fixed-point solvers


def _finalize(method, residuals, objectives, config, trajectories,
              monitor, anchoring_distance=None, rate=False) -> SolverReport:
    converged = bool(residuals and residuals[-1] <= config.residual_tolerance
                     and not monitor.flag)
    if config.return_policy == "best-objective" and objectives:
        best = int(np.argmax(objectives))
    else:
        best = len(trajectories) - 1
    return SolverReport(
        method=method,
        residual_series=residuals,
        objective_series=objectives,
        converged=converged,
        iterations_used=len(residuals),
        divergence_flag=monitor.flag,
        final_trajectory=trajectories[best] if trajectories else None,
        anchoring_distance=anchoring_distance,
        measured_rate=_measured_rate(residuals) if rate else None,
    )


def unanchored_fixed_point(field: VelocityField, objective: GuidanceObjective,
                           z0, config: GuidanceConfig) -> SolverReport:
    """Iterate z1 <- z0 + v(z1, 1) + s * grad log p(c | z1); no guarantee."""
    z0 = as_f64(z0)
    z = z0.copy()
    residuals, objectives, trajectories = [], [], []
    monitor = _DivergenceMonitor()
    for _ in range(config.n_iterations):
        try:
            g = _prepare_gradient(objective, z, config)
            z_next = z0 + field.velocity(z, 1.0) + config.s * g
        except NonFiniteValue:
            monitor.flag = True
            break
        if not np.all(np.isfinite(z_next)):
            monitor.flag = True
            break
        residual = float(np.linalg.norm(z_next - z))
        residuals.append(residual)
        objectives.append(objective.value(z_next))
        trajectories.append(Trajectory([0.0, 1.0], [z0, z_next]))
        z = z_next
        if monitor.observe(residual):
            break
        if config.stop_at_tolerance and residual <= config.residual_tolerance:
            break
    return _finalize("unanchored", residuals, objectives, config,
                     trajectories, monitor)


def anchored_fixed_point_straight(field: VelocityField, objective: GuidanceObjective,
                                  z0, config: GuidanceConfig) -> SolverReport:
    """Iterate z1_hat <- z1 + s * J^T grad log p(c | z1_hat) on a K=1 reference.

    The reference endpoint z1 and the endpoint Jacobian are computed once from
    the unguided single-window sample. The reported iterate is the midpoint of
    consecutive raw updates: the raw map's dominant linear error mode carries a
    factor of -s, so the midpoint damps the sign-alternating component (it
    still converges when the raw map is merely non-expansive, s * L1 * L2 = 1)
    while decaying at the same rate s. The report records that measured rate.
    """
    z0 = as_f64(z0)
    windows = TimeWindows.uniform(1)
    reference = piecewise_sample(field, z0, windows, config.substeps_per_window)
    z1 = reference.endpoint
    raw = z1.copy()
    z = z1.copy()
    residuals, objectives, trajectories = [], [], []
    monitor = _DivergenceMonitor()
    for _ in range(config.n_iterations):
        try:
            g = _prepare_gradient(objective, raw, config)
            pulled = endpoint_vjp(field, z0, windows, g,
                                  substeps_per_window=config.substeps_per_window)
            raw_next = z1 + config.s * pulled
        except NonFiniteValue:
            monitor.flag = True
            break
        z_next = 0.5 * (raw + raw_next)
        raw = raw_next
        residual = float(np.linalg.norm(z_next - z))
        residuals.append(residual)
        objectives.append(objective.value(z_next))
        trajectories.append(Trajectory([0.0, 1.0], [z0, z_next]))
        z = z_next
        if monitor.observe(residual):
            break
        if config.stop_at_tolerance and residual <= config.residual_tolerance:
            break
    return _finalize("straight-anchored", residuals, objectives, config,
                     trajectories, monitor,
                     anchoring_distance=float(np.linalg.norm(z - z1)), rate=True)


def reference_update(state: PiecewiseState, new_segment_endpoints) -> PiecewiseState:
    """Starting points advanced by the current offset plus the predicted update.

    Per boundary: start + (endpoint_new - endpoint_old) + (target - endpoint_old).
    """
    new_eps = [as_f64(e) for e in new_segment_endpoints]
    if len(new_eps) != state.windows.count:
        raise ValueError("one new segment endpoint per window is required")
    new_starts = [state.reference_starts[0]]
    for k in range(state.windows.count):
        old_e = state.segment_endpoints[k]
        if new_eps[k].shape != old_e.shape:
            raise ValueError("segment endpoint dimension mismatch")
        new_starts.append(state.reference_starts[k + 1]
                          + (new_eps[k] - old_e)
                          + (state.target_states[k] - old_e))
    return PiecewiseState(state.field, state.windows, state.substeps,
                          new_starts, new_eps, list(state.target_states),
                          state.iteration + 1)


def advance_reference(state: PiecewiseState) -> PiecewiseState:
    """One reference round: endpoints and starting points advanced interleaved.

    Window k's endpoint is extrapolated from the already-updated starting
    point at boundary k-1 before the boundary-k starting point is predicted.
    """
    new_starts = [state.reference_starts[0]]
    new_eps = []
    for k in range(state.windows.count):
        endpoint = state.extrapolate_window(k, new_starts[k])
        new_eps.append(endpoint)
        old_e = state.segment_endpoints[k]
        new_starts.append(state.reference_starts[k + 1]
                          + (endpoint - old_e)
                          + (state.target_states[k] - old_e))
    return PiecewiseState(state.field, state.windows, state.substeps,
                          new_starts, new_eps, list(state.target_states),
                          state.iteration + 1)


def target_update(state: PiecewiseState, objective_gradient_at_z1,
                  config: GuidanceConfig) -> PiecewiseState:
    """Overwrite target boundary states from the fresh reference endpoints.

    The endpoint gradient is distributed across windows by chaining per-window
    VJPs with straight-through (identity) boundary factors.
    """
    g = as_f64(objective_gradient_at_z1)
    k = state.windows.count
    if config.s == 0.0 or not np.any(g):
        targets = [e.copy() for e in state.segment_endpoints]
    else:
        cots = chain_window_vjps(state.field, state.reference_starts[:k],
                                 state.windows, g, state.substeps)
        targets = [state.segment_endpoints[j] + config.s * cots[j + 1]
                   for j in range(k)]
    return PiecewiseState(state.field, state.windows, state.substeps,
                          list(state.reference_starts),
                          list(state.segment_endpoints), targets,
                          state.iteration)


def anchored_piecewise_solve(field: VelocityField, objective: GuidanceObjective,
                             z0, config: GuidanceConfig,
                             windows: TimeWindows | None = None) -> SolverReport:
    """Anchored guidance on a piecewise-straight flow.

    Each round reinitializes the reference trajectory from predicted starting
    points, re-extrapolates the segment endpoints, and moves every target
    boundary by the backpropagated endpoint gradient.
    """
    z0 = as_f64(z0)
    windows = windows or config.time_windows()
    state = PiecewiseState.initialize(field, z0, windows, config.substeps_per_window)
    initial_endpoint = state.target_endpoint.copy()
    residuals, objectives, trajectories = [], [], []
    monitor = _DivergenceMonitor()
    previous_endpoint = state.target_endpoint.copy()
    for _ in range(config.n_iterations):
        try:
            g = _prepare_gradient(objective, state.target_endpoint, config)
            state = target_update(advance_reference(state), g, config)
            endpoint = state.target_endpoint
            if not np.all(np.isfinite(endpoint)):
                raise NonFiniteValue("target endpoint is non-finite")
            residual = float(np.linalg.norm(endpoint - previous_endpoint))
            previous_endpoint = endpoint.copy()
            residuals.append(residual)
            objectives.append(objective.value(endpoint))
            trajectories.append(state.to_trajectory())
        except NonFiniteValue:
            monitor.flag = True
            break
        if monitor.observe(residual):
            break
        if config.stop_at_tolerance and residual <= config.residual_tolerance:
            break
    anchoring = (float(np.linalg.norm(previous_endpoint - initial_endpoint))
                 if residuals else 0.0)
    return _finalize("anchored", residuals, objectives, config, trajectories,
                     monitor, anchoring_distance=anchoring)


def noise_gradient_descent(field: VelocityField, objective: GuidanceObjective,
                           z0, lr: float = 0.4, momentum: float = 0.9,
                           l2_coeff: float = 1.0, n_iterations: int = 100,
                           windows: TimeWindows | None = None,
                           substeps_per_window: int = 1) -> SolverReport:
    """Baseline: gradient ascent on the initial noise with momentum and an
    l2 pull toward the starting noise; the trajectory is resampled each step."""
    if lr <= 0:
        raise ValueError("learning rate must be positive")
    z0 = as_f64(z0)
    windows = windows or TimeWindows.uniform(4)
    z0_init = z0.copy()
    velocity = np.zeros_like(z0)
    residuals, objectives, trajectories = [], [], []
    monitor = _DivergenceMonitor()
    previous_endpoint = None
    z = z0.copy()
    for _ in range(n_iterations):
        try:
            traj = piecewise_sample(field, z, windows, substeps_per_window)
            g_end = objective.gradient(traj.endpoint)
            pulled = endpoint_vjp(field, z, windows, g_end,
                                  substeps_per_window=substeps_per_window)
        except NonFiniteValue:
            monitor.flag = True
            break
        ascent = pulled - l2_coeff * (z - z0_init)
        velocity = momentum * velocity + lr * ascent
        z = z + velocity
        if not np.all(np.isfinite(z)):
            monitor.flag = True
            break
        traj = piecewise_sample(field, z, windows, substeps_per_window)
        endpoint = traj.endpoint
        residual = (float(np.linalg.norm(endpoint - previous_endpoint))
                    if previous_endpoint is not None else float(np.linalg.norm(velocity)))
        previous_endpoint = endpoint.copy()
        residuals.append(residual)
        objectives.append(objective.value(endpoint))
        trajectories.append(traj)
        if monitor.observe(residual):
            break
    config = GuidanceConfig(s=1.0, n_iterations=n_iterations,
                            windows=windows.count, return_policy="last")
    report = _finalize("noise-gd", residuals, objectives, config,
                       trajectories, monitor)
    report.anchoring_distance = float(np.linalg.norm(z - z0_init))
    return report


# ---------------------------------------------------------------------------
# contraction diagnostics


def contraction_estimate(field: VelocityField, objective: GuidanceObjective,
                         probe_region, n_probes: int,
                         windows: TimeWindows | None = None,
                         substeps_per_window: int = 1,
                         seed: int = 0) -> tuple[float, float, float]:
    """(L1, L2, s_max): endpoint-Jacobian norm, empirical gradient Lipschitz
    constant over probe pairs, and the admissible scale bound 1 / (L1 * L2).

    The Jacobian is materialized row-by-row from basis-cotangent VJPs at the
    probe-region midpoint; L1 is its largest singular value.
    """
    if n_probes < 2:
        raise ValueError("need at least 2 probes")
    lo, hi = as_f64(probe_region[0]), as_f64(probe_region[1])
    if lo.shape != hi.shape:
        raise ValueError("probe region bounds must share a shape")
    rng = np.random.default_rng(seed)
    probes = rng.uniform(lo, hi, size=(n_probes, lo.shape[0]))
    if np.allclose(probes, probes[0]):
        raise ValueError("degenerate probe region: all probes identical")
    windows = windows or TimeWindows.uniform(1)
    d = lo.shape[0]
    center = 0.5 * (lo + hi)
    rows = [endpoint_vjp(field, center, windows, e,
                         substeps_per_window=substeps_per_window)
            for e in np.eye(d)]
    jacobian = np.stack(rows)  # row i = d z1[i] / d z0
    l1 = float(np.linalg.svd(jacobian, compute_uv=False)[0])
    grads = [objective.gradient(p) for p in probes]
    ratios = []
    for i in range(n_probes):
        for j in range(i + 1, n_probes):
            gap = float(np.linalg.norm(probes[i] - probes[j]))
            if gap > 1e-12:
                ratios.append(float(np.linalg.norm(grads[i] - grads[j])) / gap)
    l2 = max(ratios)
    return l1, l2, 1.0 / (l1 * l2)
