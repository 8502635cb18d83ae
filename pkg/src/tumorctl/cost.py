"""Treatment cost: running and terminal pieces, path totals, and the Monte Carlo objective.

The objective is the expected total cost of a dosing strategy: the dose
integral plus a constant stabilization charge per unit time, plus a large
finite penalty when the final GLY fraction fails to reach the success
threshold. The penalty is a finite surrogate so Monte Carlo averages and
exponential path weights stay well defined; sweeping it upward recovers
the hard-constraint limit.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from typing import TYPE_CHECKING

import numpy as np

from .model import (
    TERM_FAILURE,
    TERM_SUCCESS,
    ModelParams,
    State,
    classify_terminal,
    diffusion_arrays,
    drift_arrays,
    Terminal,
)

if TYPE_CHECKING:
    from .simulate import TimeGrid, TrajectoryBundle

__all__ = [
    "CostReport",
    "estimate_J",
    "lagrangian_residual",
    "path_cost",
    "running_cost",
    "terminal_cost",
    "terminal_cost_from_codes",
]


@dataclass(frozen=True)
class CostReport:
    """Monte Carlo summary of a policy's cost distribution."""

    mean_cost: float
    std_error: float
    n_samples: int
    failure_rate: float
    success_rate: float
    mean_dose_integral: float

    def to_json_dict(self) -> dict:
        return {
            "mean_cost": self.mean_cost,
            "std_error": self.std_error,
            "n_samples": self.n_samples,
            "failure_rate": self.failure_rate,
            "success_rate": self.success_rate,
            "mean_dose_integral": self.mean_dose_integral,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_json_dict(), indent=2, sort_keys=True)


def running_cost(u: float, p: ModelParams) -> float:
    """Instantaneous cost rate of dosing at rate u: the dose itself plus the
    stabilization charge e."""
    if not 0.0 <= u <= p.u_max:
        raise ValueError(f"dose {u} outside [0, {p.u_max}]")
    return u + p.stabilization_weight_e


def terminal_cost_from_codes(codes, p: ModelParams) -> np.ndarray:
    """Vectorized terminal cost from classifier codes."""
    codes = np.asarray(codes)
    if p.indeterminate_is_failure:
        cost = np.where(codes == TERM_SUCCESS, 0.0, p.failure_penalty_M)
    else:
        cost = np.where(codes == TERM_FAILURE, p.failure_penalty_M, 0.0)
    return cost.astype(float)


def terminal_cost(st: State, p: ModelParams) -> float:
    """Terminal cost of the final state: zero on success, the failure
    penalty otherwise (indeterminate states count as failures unless
    configured otherwise)."""
    outcome = classify_terminal(st, p)
    if outcome is Terminal.SUCCESS:
        return 0.0
    if outcome is Terminal.FAILURE:
        return p.failure_penalty_M
    return p.failure_penalty_M if p.indeterminate_is_failure else 0.0


def path_cost(tr: "TrajectoryBundle", p: ModelParams) -> float:
    """Total cost of one trajectory: left-endpoint quadrature of the running
    cost plus the terminal cost of the final state."""
    controls = np.asarray(tr.controls, dtype=float)
    running = controls + p.stabilization_weight_e
    final = State(float(tr.states[-1, 0]), float(tr.states[-1, 1]))
    return float(tr.grid.dt * np.sum(running) + terminal_cost(final, p))


def estimate_J(
    p: ModelParams,
    policy,
    st0: State,
    grid: "TimeGrid",
    coupling_kind="zero",
    n_samples: int = 100,
    master_seed: int = 0,
    threads: int = 1,
) -> CostReport:
    """Monte Carlo estimate of the expected total cost under a policy.

    Sample i draws its noise from stream i of master_seed, so estimates
    with equal seeds are paired across policies. With a nonzero coupling
    the samples evolve as one interacting ensemble whose empirical
    statistic feeds the dynamics; with coupling "zero" they are
    independent rollouts (and may be evaluated in parallel chunks; the
    reduction order is fixed by sample index either way).
    """
    from . import simulate  # deferred: simulate depends on this module

    if n_samples < 2:
        raise ValueError("n_samples must be >= 2")
    batch = simulate.batch_paths(
        p, policy, st0, grid, coupling_kind, n_samples, master_seed, threads=threads
    )
    running = batch.controls + p.stabilization_weight_e
    costs = grid.dt * np.sum(running, axis=1) + terminal_cost_from_codes(batch.terminal, p)
    dose_integrals = grid.dt * np.sum(batch.controls, axis=1)
    mean = float(np.mean(costs))
    if n_samples > 1:
        se = float(np.std(costs, ddof=1) / np.sqrt(n_samples))
    else:
        se = 0.0
    return CostReport(
        mean_cost=mean,
        std_error=se,
        n_samples=n_samples,
        failure_rate=float(np.mean(batch.terminal == TERM_FAILURE)),
        success_rate=float(np.mean(batch.terminal == TERM_SUCCESS)),
        mean_dose_integral=float(np.mean(dose_integrals)),
    )


def lagrangian_residual(tr: "TrajectoryBundle", p: ModelParams, theta_path=None) -> float:
    """Worst-case defect of the pathwise dynamics constraint along a bundle.

    Rebuilds the unclamped state increments from the recorded states,
    controls and noise, accumulates them from the initial state, and
    returns the largest Euclidean gap to the recorded path. The gap is
    exactly the accumulated boundary projection, so it vanishes on
    trajectories that never clamp.
    """
    if tr.noise is None:
        raise ValueError("trajectory bundle carries no noise record")
    k = tr.grid.k_steps
    if theta_path is None:
        theta_path = np.zeros(k)
    theta_path = np.asarray(theta_path, dtype=float)
    if theta_path.shape[0] != k:
        raise ValueError("theta path length must equal the number of steps")

    x1 = tr.states[:-1, 0]
    x2 = tr.states[:-1, 1]
    mu1, mu2 = drift_arrays(x1, x2, tr.controls, theta_path, p)
    s12, s13, s21, s22, s23 = diffusion_arrays(x1, x2, theta_path, p)
    dW = tr.noise
    inc1 = mu1 * tr.grid.dt + s12 * dW[:, 1] + s13 * dW[:, 2]
    inc2 = mu2 * tr.grid.dt + s21 * dW[:, 0] + s22 * dW[:, 1] + s23 * dW[:, 2]
    pred = np.empty_like(tr.states)
    pred[0] = tr.states[0]
    pred[1:, 0] = tr.states[0, 0] + np.cumsum(inc1)
    pred[1:, 1] = tr.states[0, 1] + np.cumsum(inc2)
    gap = np.sqrt(np.sum((tr.states - pred) ** 2, axis=1))
    return float(np.max(gap))
