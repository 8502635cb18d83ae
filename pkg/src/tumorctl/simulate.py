"""Time-stepping for the controlled dynamics: single paths, interacting ensembles,
and a deterministic Runge-Kutta oracle.

Integration is Euler-Maruyama with componentwise clamping to the unit
square (states are proportions; the clamp preserves the corner fixed
points of the zero-coupling dynamics and is consistent to first order in
dt). Weak accuracy is all the planner and the cost estimates need, and
the plain Euler map keeps the noise-to-path relationship simple.

Randomness is drawn from counter-based Philox streams keyed by
(master_seed, stream_id, ...) through numpy's SeedSequence spawning, so
distinct keys give statistically independent, reproducible streams and
results never depend on scheduling or batch layout.
"""

from __future__ import annotations

import csv
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Callable, Optional

import numpy as np

from . import cost as cost_mod
from .measures import EmpiricalMeasure, as_coupling_spec
from .model import (
    ModelParams,
    State,
    Terminal,
    _CODE_TO_TERMINAL,
    diffusion_arrays,
    drift_arrays,
    terminal_codes,
)

__all__ = [
    "Ensemble",
    "PathBatch",
    "SeedSpec",
    "TimeGrid",
    "TrajectoryBundle",
    "batch_paths",
    "em_paths_scalar",
    "em_step",
    "integrate_em_with_noise",
    "particle_evolve",
    "replicator_ode",
    "rollout",
    "write_trajectory_csv",
]


@dataclass(frozen=True)
class TimeGrid:
    """Uniform grid of k_steps subintervals covering [0, horizon_t]."""

    horizon_t: float
    k_steps: int

    def __post_init__(self):
        if not self.horizon_t > 0:
            raise ValueError("horizon_t must be > 0")
        if self.k_steps < 1:
            raise ValueError("k_steps must be >= 1")

    @property
    def dt(self) -> float:
        return self.horizon_t / self.k_steps

    def times(self) -> np.ndarray:
        return np.arange(self.k_steps + 1) * self.dt


@dataclass(frozen=True)
class SeedSpec:
    """Reproducible noise stream key.

    Distinct (master_seed, stream_id) pairs yield independent streams;
    substream() extends the key for internal consumers (planner
    proposals, per-step noise) without colliding with particle streams.
    """

    master_seed: int
    stream_id: int = 0

    def __post_init__(self):
        if not 0 <= self.master_seed < 2**64:
            raise ValueError("master_seed must be a 64-bit unsigned integer")
        if self.stream_id < 0:
            raise ValueError("stream_id must be >= 0")

    def generator(self) -> np.random.Generator:
        return self.substream()

    def substream(self, *keys: int) -> np.random.Generator:
        seq = np.random.SeedSequence(self.master_seed, spawn_key=(self.stream_id, *keys))
        return np.random.Generator(np.random.Philox(seq))


@dataclass(frozen=True)
class Ensemble:
    """N particle states with implied uniform weights."""

    states: np.ndarray

    def __post_init__(self):
        states = np.asarray(self.states, dtype=float)
        if states.ndim != 2 or states.shape[1] != 2 or states.shape[0] < 1:
            raise ValueError(f"ensemble states must be (N, 2), got {states.shape}")
        if not np.isfinite(states).all() or (states < 0).any() or (states > 1).any():
            raise ValueError("ensemble states must lie in [0,1]^2")
        object.__setattr__(self, "states", states)

    def __len__(self) -> int:
        return self.states.shape[0]

    @property
    def particles(self) -> list[State]:
        return [State(float(a), float(b)) for a, b in self.states]

    def empirical(self) -> EmpiricalMeasure:
        n = len(self)
        return EmpiricalMeasure(support=self.states.copy(), weights=np.full(n, 1.0 / n))

    @classmethod
    def from_states(cls, particles) -> "Ensemble":
        return cls(np.array([[st.x1, st.x2] for st in particles], dtype=float))


@dataclass(frozen=True)
class TrajectoryBundle:
    """One discretized path: states, controls, noise increments, and costs."""

    grid: TimeGrid
    states: np.ndarray
    controls: np.ndarray
    noise: Optional[np.ndarray]
    running_costs: np.ndarray
    terminal: Terminal
    total_cost: float

    def __post_init__(self):
        k = self.grid.k_steps
        if self.states.shape != (k + 1, 2):
            raise ValueError(f"states shape {self.states.shape}, expected {(k + 1, 2)}")
        for name in ("controls", "running_costs"):
            arr = getattr(self, name)
            if arr.shape != (k,):
                raise ValueError(f"{name} shape {arr.shape}, expected {(k,)}")
        if self.noise is not None and self.noise.shape != (k, 3):
            raise ValueError(f"noise shape {self.noise.shape}, expected {(k, 3)}")
        if (self.states < 0).any() or (self.states > 1).any():
            raise ValueError("states left [0,1]^2")

    @property
    def final_state(self) -> State:
        return State(float(self.states[-1, 0]), float(self.states[-1, 1]))


def _em_update(x1, x2, u, theta, dW, dt, p: ModelParams):
    """Shared Euler-Maruyama kernel; broadcasts over any batch shape.

    dW has shape (..., 3) in the (g, d, v) channel order. The same
    expression graph serves scalars, single paths and particle batches,
    so decoupled ensembles reproduce independent rollouts bitwise.
    """
    mu1, mu2 = drift_arrays(x1, x2, u, theta, p)
    s12, s13, s21, s22, s23 = diffusion_arrays(x1, x2, theta, p)
    y1 = x1 + mu1 * dt + s12 * dW[..., 1] + s13 * dW[..., 2]
    y2 = x2 + mu2 * dt + s21 * dW[..., 0] + s22 * dW[..., 1] + s23 * dW[..., 2]
    return np.clip(y1, 0.0, 1.0), np.clip(y2, 0.0, 1.0)


def em_step(st: State, u: float, theta, dt: float, dW, p: ModelParams) -> State:
    """Advance one state by a single Euler-Maruyama step and project to [0,1]^2."""
    if dt <= 0:
        raise ValueError("dt must be > 0")
    dW = np.asarray(dW, dtype=float)
    if dW.shape != (3,):
        raise ValueError(f"dW must be a 3-vector, got shape {dW.shape}")
    if not np.isfinite(dW).all():
        raise ValueError("noise increments must be finite")
    theta = theta.value if hasattr(theta, "value") else float(theta)
    x1, x2 = _em_update(st.x1, st.x2, u, theta, dW, dt, p)
    return State(float(x1), float(x2))


def _validate_controls(u, p: ModelParams):
    u = np.asarray(u, dtype=float)
    if not np.isfinite(u).all() or (u < 0).any() or (u > p.u_max).any():
        raise ValueError(
            "policy returned doses outside [0, u_max]; policies must saturate themselves"
        )
    return u


def _draw_path_noise(master_seed: int, stream_ids, k: int, dt: float) -> np.ndarray:
    """Brownian increments for each stream id, shape (len(ids), k, 3)."""
    root = np.sqrt(dt)
    out = np.empty((len(stream_ids), k, 3))
    for row, sid in enumerate(stream_ids):
        gen = SeedSpec(master_seed, int(sid)).generator()
        out[row] = gen.standard_normal((k, 3)) * root
    return out


def _evolve(p, policy, states0, grid, spec, noise):
    """March a batch of states forward, recording everything.

    states0: (S, 2); noise: (S, k, 3). Returns (states (S, k+1, 2),
    controls (S, k), theta (k,)). theta is recomputed from the whole batch
    each step when the coupling is live, and identically zero otherwise.
    """
    s_count, k = noise.shape[0], grid.k_steps
    dt = grid.dt
    states = np.empty((s_count, k + 1, 2))
    controls = np.empty((s_count, k))
    thetas = np.zeros(k)
    states[:, 0, :] = states0
    cur = np.array(states0, dtype=float)
    for i in range(k):
        theta = spec.stat_from_states(cur) if not spec.is_zero else 0.0
        thetas[i] = theta
        u = _validate_controls(policy(cur, i * dt), p)
        controls[:, i] = u
        x1, x2 = _em_update(cur[:, 0], cur[:, 1], u, theta, noise[:, i, :], dt, p)
        cur = np.stack([x1, x2], axis=1)
        states[:, i + 1, :] = cur
    return states, controls, thetas


@dataclass(frozen=True)
class PathBatch:
    """A batch of simulated paths sharing a grid (samples or particles)."""

    grid: TimeGrid
    states: np.ndarray    # (S, k+1, 2)
    controls: np.ndarray  # (S, k)
    noise: np.ndarray     # (S, k, 3)
    terminal: np.ndarray  # (S,) classifier codes
    theta: np.ndarray     # (k,) coupling statistic per step

    def ensembles(self) -> list[Ensemble]:
        """Ensemble snapshot at every time step (length k_steps + 1)."""
        return [Ensemble(self.states[:, i, :].copy()) for i in range(self.grid.k_steps + 1)]

    def bundle(self, index: int, p: ModelParams) -> TrajectoryBundle:
        """Extract one sample as a standalone trajectory bundle."""
        running = self.controls[index] + p.stabilization_weight_e
        total = self.grid.dt * np.sum(running) + float(
            cost_mod.terminal_cost_from_codes(self.terminal[index], p)
        )
        return TrajectoryBundle(
            grid=self.grid,
            states=self.states[index].copy(),
            controls=self.controls[index].copy(),
            noise=self.noise[index].copy(),
            running_costs=running,
            terminal=_CODE_TO_TERMINAL[int(self.terminal[index])],
            total_cost=float(total),
        )


def rollout(
    p: ModelParams,
    policy,
    st0: State,
    grid: TimeGrid,
    theta_path=None,
    seed: SeedSpec = SeedSpec(0),
) -> TrajectoryBundle:
    """Simulate one controlled path under an exogenous coupling path.

    theta_path (length k_steps) freezes the mean-field input per step;
    None means no coupling. The noise comes entirely from the seed's
    stream, so equal seeds reproduce the bundle bitwise.
    """
    k = grid.k_steps
    if theta_path is None:
        theta_path = np.zeros(k)
    theta_path = np.asarray(theta_path, dtype=float)
    if theta_path.shape != (k,):
        raise ValueError(f"theta_path must have length {k}")
    noise = _draw_path_noise(seed.master_seed, [seed.stream_id], k, grid.dt)[0]

    states = np.empty((k + 1, 2))
    controls = np.empty(k)
    states[0] = (st0.x1, st0.x2)
    cur = states[0].copy()
    dt = grid.dt
    for i in range(k):
        u = _validate_controls(policy(cur[None, :], i * dt), p)
        u = float(u.reshape(-1)[0])
        controls[i] = u
        x1, x2 = _em_update(
            np.array([cur[0]]), np.array([cur[1]]), u, theta_path[i], noise[None, i, :], dt, p
        )
        cur = np.array([x1[0], x2[0]])
        states[i + 1] = cur

    running = controls + p.stabilization_weight_e
    final = State(float(states[-1, 0]), float(states[-1, 1]))
    total = dt * np.sum(running) + cost_mod.terminal_cost(final, p)
    return TrajectoryBundle(
        grid=grid,
        states=states,
        controls=controls,
        noise=noise,
        running_costs=running,
        terminal=_CODE_TO_TERMINAL[int(terminal_codes(final.x2, p))],
        total_cost=float(total),
    )


def batch_paths(
    p: ModelParams,
    policy,
    st0: State,
    grid: TimeGrid,
    coupling_kind="zero",
    n_samples: int = 1,
    master_seed: int = 0,
    threads: int = 1,
) -> PathBatch:
    """Simulate n_samples paths from a common start state.

    Sample i uses noise stream (master_seed, i). With coupling "zero" the
    samples are independent and may be evaluated in per-thread chunks;
    results are written by sample index so the output is identical for
    any thread count. A live coupling evolves all samples as one
    interacting ensemble in a single pass.
    """
    spec = as_coupling_spec(coupling_kind)
    if n_samples < 1:
        raise ValueError("n_samples must be >= 1")
    k = grid.k_steps
    noise = _draw_path_noise(master_seed, range(n_samples), k, grid.dt)
    states0 = np.tile(np.array([st0.x1, st0.x2]), (n_samples, 1))

    whole_batch = bool(getattr(policy, "requires_whole_batch", False))
    if spec.is_zero and not whole_batch and threads > 1 and n_samples >= 2 * threads:
        states = np.empty((n_samples, k + 1, 2))
        controls = np.empty((n_samples, k))
        bounds = np.linspace(0, n_samples, threads + 1).astype(int)
        chunks = [(lo, hi) for lo, hi in zip(bounds[:-1], bounds[1:]) if hi > lo]

        def run_chunk(bound):
            lo, hi = bound
            st, ct, _ = _evolve(p, policy, states0[lo:hi], grid, spec, noise[lo:hi])
            return lo, hi, st, ct

        with ThreadPoolExecutor(max_workers=len(chunks)) as pool:
            for lo, hi, st, ct in pool.map(run_chunk, chunks):
                states[lo:hi] = st
                controls[lo:hi] = ct
        thetas = np.zeros(k)
    else:
        states, controls, thetas = _evolve(p, policy, states0, grid, spec, noise)

    return PathBatch(
        grid=grid,
        states=states,
        controls=controls,
        noise=noise,
        terminal=terminal_codes(states[:, -1, 1], p),
        theta=thetas,
    )


def particle_evolve(
    p: ModelParams,
    policy,
    ens0: Ensemble,
    grid: TimeGrid,
    coupling_kind="zero",
    seed: SeedSpec = SeedSpec(0),
) -> PathBatch:
    """Evolve an interacting particle ensemble.

    Each step computes the coupling statistic once from the current
    ensemble, then advances every particle with its own noise stream
    (particle i uses stream_id = seed.stream_id + i). Use .ensembles()
    on the result for per-step snapshots.
    """
    n = len(ens0)
    if n < 1:
        raise ValueError("ensemble must contain at least one particle")
    spec = as_coupling_spec(coupling_kind)
    k = grid.k_steps
    ids = [seed.stream_id + i for i in range(n)]
    noise = _draw_path_noise(seed.master_seed, ids, k, grid.dt)
    states, controls, thetas = _evolve(p, policy, ens0.states, grid, spec, noise)
    return PathBatch(
        grid=grid,
        states=states,
        controls=controls,
        noise=noise,
        terminal=terminal_codes(states[:, -1, 1], p),
        theta=thetas,
    )


def replicator_ode(p: ModelParams, st0: State, grid: TimeGrid, u_const: float = 0.0) -> np.ndarray:
    """Classical RK4 integration of the deterministic drift field.

    Serves as the noise-free oracle for the Euler-Maruyama integrator:
    with all volatilities zero the drift reduces to the replicator-style
    fitness flow of the two fractions.
    """
    if not 0.0 <= u_const <= p.u_max:
        raise ValueError(f"dose {u_const} outside [0, {p.u_max}]")

    def f(x):
        mu1, mu2 = drift_arrays(x[0], x[1], u_const, 0.0, p)
        return np.array([mu1, mu2])

    k, dt = grid.k_steps, grid.dt
    out = np.empty((k + 1, 2))
    out[0] = (st0.x1, st0.x2)
    x = out[0].copy()
    for i in range(k):
        k1 = f(x)
        k2 = f(x + 0.5 * dt * k1)
        k3 = f(x + 0.5 * dt * k2)
        k4 = f(x + dt * k3)
        x = x + (dt / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
        out[i + 1] = x
    return out


def integrate_em_with_noise(x0, drift_fn: Callable, diffusion_fn: Callable,
                            dt: float, dW: np.ndarray, clamp=None) -> np.ndarray:
    """Generic Euler-Maruyama march with externally supplied increments.

    For calibration studies that swap in test-only coefficient functions
    (e.g. geometric Brownian motion with a known strong solution).
    drift_fn(x) -> (dim,), diffusion_fn(x) -> (dim, n_noise), dW has
    shape (k, n_noise). clamp, if given, is a (lo, hi) box applied
    componentwise after each step.
    """
    x0 = np.atleast_1d(np.asarray(x0, dtype=float))
    k = dW.shape[0]
    out = np.empty((k + 1, x0.size))
    out[0] = x0
    x = x0.copy()
    for i in range(k):
        x = x + drift_fn(x) * dt + np.asarray(diffusion_fn(x)) @ dW[i]
        if clamp is not None:
            x = np.clip(x, clamp[0], clamp[1])
        out[i + 1] = x
    return out


def em_paths_scalar(x0, drift_fn: Callable, diffusion_fn: Callable,
                    dt: float, dW: np.ndarray) -> np.ndarray:
    """Euler-Maruyama for a batch of independent scalar SDEs.

    Same update rule as integrate_em_with_noise, vectorized over a batch
    axis: x0 broadcast to (B,), dW of shape (B, k), drift_fn/diffusion_fn
    mapping (B,) -> (B,). Returns final states (B,).
    """
    dW = np.asarray(dW, dtype=float)
    x = np.broadcast_to(np.asarray(x0, dtype=float), dW.shape[:1]).copy()
    for i in range(dW.shape[1]):
        x = x + drift_fn(x) * dt + diffusion_fn(x) * dW[:, i]
    return x


_TRAJECTORY_COLUMNS = ["step", "s", "x1", "x2", "u", "dW_g", "dW_d", "dW_v", "running_cost"]


def write_trajectory_csv(tr: TrajectoryBundle, path) -> None:
    """One row per step plus a final state-only row; header is mandatory."""
    k, dt = tr.grid.k_steps, tr.grid.dt
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(_TRAJECTORY_COLUMNS)
        for i in range(k):
            writer.writerow(
                [i, repr(i * dt), repr(float(tr.states[i, 0])), repr(float(tr.states[i, 1])),
                 repr(float(tr.controls[i])),
                 repr(float(tr.noise[i, 0])) if tr.noise is not None else "",
                 repr(float(tr.noise[i, 1])) if tr.noise is not None else "",
                 repr(float(tr.noise[i, 2])) if tr.noise is not None else "",
                 repr(float(tr.running_costs[i]))]
            )
        writer.writerow(
            [k, repr(k * dt), repr(float(tr.states[k, 0])), repr(float(tr.states[k, 1])),
             "", "", "", "", ""]
        )
