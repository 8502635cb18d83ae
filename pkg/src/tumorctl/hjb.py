"""Dynamic-programming ground truth for the frozen-coupling dose problem.

With the mean-field statistic frozen at zero, the optimal cost-to-go
V(s, x) of the dose problem solves the backward equation

    V_s + e + min_{u in [0, u_max]} u * (1 - x2(1-x2) dV/dx2)
        + mu0 . grad V + (1/2) tr(sigma sigma^T D^2 V) = 0,

V(t, x) = terminal cost, where mu0 is the dose-free drift. The running
cost u + e and the drift are both affine in u, so the minimizer is
bang-bang: full dose wherever the coefficient 1 - x2(1-x2) dV/dx2 is
negative, none otherwise.

The solver is an explicit backward Euler sweep on a uniform grid over
the unit square: first derivatives upwinded by the sign of the total
drift (dose-free part plus the chosen dose's contribution), second
derivatives central including the cross term, Neumann (zero normal
derivative) boundaries to match the clamped simulation, and a CFL-type
time-step guard checked at construction. Layers are stored on a coarser
uniform grid aligned with the simulation time grid.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass
from typing import Optional

import numpy as np

from . import cost as cost_mod
from .measures import as_coupling_spec
from .model import ModelParams, State, diffusion_arrays, drift_arrays, terminal_codes

__all__ = [
    "HjbPolicy",
    "OracleDiscrepancy",
    "OracleScopeError",
    "StabilityError",
    "ValueGrid",
    "hjb_policy",
    "hjb_solve",
    "read_value_grid",
    "value_at",
    "value_vs_rollout",
    "write_value_grid",
]

POLICY_TIE_TOL = 1e-12


class StabilityError(RuntimeError):
    """The explicit sweep would violate its CFL-type stability condition."""


class OracleScopeError(ValueError):
    """The dynamic-programming oracle only covers the frozen (zero) coupling."""


@dataclass(frozen=True)
class ValueGrid:
    """Optimal cost-to-go on a space-time grid (stored layers only).

    values[j] is V at time j * dt; the last layer is the terminal cost.
    """

    nx1: int
    nx2: int
    nt: int
    values: np.ndarray
    dt: float
    dx1: float
    dx2: float
    horizon_t: float
    params: ModelParams

    def __post_init__(self):
        if self.values.shape != (self.nt, self.nx1, self.nx2):
            raise ValueError("values shape does not match grid sizes")
        if not np.isfinite(self.values).all():
            raise ValueError("value grid contains non-finite entries")

    def x1_nodes(self) -> np.ndarray:
        return np.linspace(0.0, 1.0, self.nx1)

    def x2_nodes(self) -> np.ndarray:
        return np.linspace(0.0, 1.0, self.nx2)


def _frozen_coefficients(p: ModelParams, x1: np.ndarray, x2: np.ndarray):
    """Dose-free drift and half covariance on the node mesh, theta = 0."""
    mu01, mu02 = drift_arrays(x1, x2, 0.0, 0.0, p)
    s12, s13, s21, s22, s23 = diffusion_arrays(x1, x2, 0.0, p)
    a11 = 0.5 * (s12 * s12 + s13 * s13)
    a12 = 0.5 * (s12 * s22 + s13 * s23)
    a22 = 0.5 * (s21 * s21 + s22 * s22 + s23 * s23)
    return mu01, mu02, a11, a12, a22


def hjb_solve(
    p: ModelParams,
    nx1: int,
    nx2: int,
    horizon_t: float,
    k_store: int = 100,
    cfl_safety: float = 0.5,
    nt_solve: Optional[int] = None,
    terminal_values: Optional[np.ndarray] = None,
) -> ValueGrid:
    """Solve the frozen-coupling dose problem backward from the terminal cost.

    k_store fixes the stored layer grid (k_store + 1 layers over
    [0, horizon_t], matching a simulation TimeGrid with the same
    k_steps). The internal sweep uses the finest multiple of k_store
    satisfying the stability bound, unless nt_solve pins it explicitly;
    a pinned value that violates the bound raises StabilityError naming
    the offending ratio. terminal_values overrides the terminal layer
    (used for split-horizon solves); it must match the space grid.
    """
    if nx1 < 16 or nx2 < 16:
        raise ValueError("grid sizes must be >= 16")
    if horizon_t <= 0:
        raise ValueError("horizon_t must be > 0")
    if k_store < 1:
        raise ValueError("k_store must be >= 1")
    if not 0 < cfl_safety <= 1:
        raise ValueError("cfl_safety must lie in (0, 1]")

    x1 = np.linspace(0.0, 1.0, nx1)[:, None]
    x2 = np.linspace(0.0, 1.0, nx2)[None, :]
    dx1 = 1.0 / (nx1 - 1)
    dx2 = 1.0 / (nx2 - 1)
    g2 = x2 * (1.0 - x2) * np.ones_like(x1)

    mu01, mu02, a11, a12, a22 = _frozen_coefficients(p, x1, x2)
    mu01 = mu01 * np.ones_like(g2)
    mu02 = mu02 * np.ones_like(g2)

    # worst-case explicit-update rate over nodes and admissible doses
    rate = (
        2.0 * a11 / dx1**2
        + 2.0 * a22 / dx2**2
        + 2.0 * np.abs(a12) / (dx1 * dx2)
        + np.abs(mu01) / dx1
        + (np.abs(mu02) + p.u_max * g2) / dx2
    )
    max_rate = float(np.max(rate))
    dt_stable = cfl_safety / max_rate if max_rate > 0 else horizon_t

    if nt_solve is None:
        per_store = max(1, int(np.ceil(horizon_t / (k_store * dt_stable))))
        nt_solve = per_store * k_store
    if nt_solve % k_store != 0:
        raise ValueError("nt_solve must be a multiple of k_store")
    dt = horizon_t / nt_solve
    if max_rate > 0 and dt > dt_stable * (1 + 1e-12):
        raise StabilityError(
            f"dt = {dt:.3e} exceeds the stability bound {dt_stable:.3e} "
            f"(dt * max update rate = {dt * max_rate:.3f} > cfl_safety = {cfl_safety})"
        )
    stride = nt_solve // k_store

    if terminal_values is None:
        v = cost_mod.terminal_cost_from_codes(
            terminal_codes(np.broadcast_to(x2, (nx1, nx2)), p), p
        )
    else:
        v = np.asarray(terminal_values, dtype=float)
        if v.shape != (nx1, nx2):
            raise ValueError("terminal_values shape must match the space grid")
        v = v.copy()

    stored = np.empty((k_store + 1, nx1, nx2))
    stored[k_store] = v

    e = p.stabilization_weight_e
    inv_dx1, inv_dx2 = 1.0 / dx1, 1.0 / dx2
    inv_dx1sq, inv_dx2sq = inv_dx1**2, inv_dx2**2
    inv_cross = 0.25 * inv_dx1 * inv_dx2

    for step in range(nt_solve - 1, -1, -1):
        vp = np.pad(v, 1, mode="edge")
        core = vp[1:-1, 1:-1]

        d2_fwd = (vp[1:-1, 2:] - core) * inv_dx2
        d2_bwd = (core - vp[1:-1, :-2]) * inv_dx2
        d2_central = 0.5 * (d2_fwd + d2_bwd)
        phi = 1.0 - g2 * d2_central
        ustar = np.where(phi < -POLICY_TIE_TOL, p.u_max, 0.0)

        c1 = mu01
        c2 = mu02 - ustar * g2
        d1_fwd = (vp[2:, 1:-1] - core) * inv_dx1
        d1_bwd = (core - vp[:-2, 1:-1]) * inv_dx1
        adv = (
            np.maximum(c1, 0.0) * d1_fwd
            + np.minimum(c1, 0.0) * d1_bwd
            + np.maximum(c2, 0.0) * d2_fwd
            + np.minimum(c2, 0.0) * d2_bwd
        )
        lap = (
            a11 * (vp[2:, 1:-1] - 2.0 * core + vp[:-2, 1:-1]) * inv_dx1sq
            + a22 * (vp[1:-1, 2:] - 2.0 * core + vp[1:-1, :-2]) * inv_dx2sq
            + 2.0
            * a12
            * (vp[2:, 2:] + vp[:-2, :-2] - vp[2:, :-2] - vp[:-2, 2:])
            * inv_cross
        )
        v = v + dt * (e + ustar + adv + lap)
        if step % stride == 0:
            stored[step // stride] = v

    upper = p.failure_penalty_M + (p.u_max + e) * horizon_t
    if stored.min() < -1e-9 or stored.max() > upper * (1 + 1e-9):
        raise StabilityError(
            f"value grid left its a priori bounds [0, {upper:.6g}] "
            f"(min {stored.min():.3e}, max {stored.max():.6g}); refine the sweep"
        )

    return ValueGrid(
        nx1=nx1,
        nx2=nx2,
        nt=k_store + 1,
        values=stored,
        dt=horizon_t / k_store,
        dx1=dx1,
        dx2=dx2,
        horizon_t=horizon_t,
        params=p,
    )


def _bilinear(field: np.ndarray, x1, x2, dx1: float, dx2: float):
    """Bilinear interpolation of a node field at points in the unit square."""
    f1 = np.clip(x1 / dx1, 0.0, field.shape[0] - 1 - 1e-12)
    f2 = np.clip(x2 / dx2, 0.0, field.shape[1] - 1 - 1e-12)
    i1 = f1.astype(int)
    i2 = f2.astype(int)
    w1 = f1 - i1
    w2 = f2 - i2
    return (
        field[i1, i2] * (1 - w1) * (1 - w2)
        + field[i1 + 1, i2] * w1 * (1 - w2)
        + field[i1, i2 + 1] * (1 - w1) * w2
        + field[i1 + 1, i2 + 1] * w1 * w2
    )


def value_at(vg: ValueGrid, s: float, st: State) -> float:
    """Interpolated cost-to-go at time s and state st (nearest stored layer)."""
    layer = int(np.clip(round(s / vg.dt), 0, vg.nt - 1))
    return float(_bilinear(vg.values[layer], np.asarray(st.x1), np.asarray(st.x2), vg.dx1, vg.dx2))


class HjbPolicy:
    """Bang-bang feedback policy read off a solved value grid.

    Doses u_max wherever the interpolated coefficient
    1 - x2(1-x2) dV/dx2 is negative (beyond the tie tolerance), zero
    otherwise, using the stored layer nearest in time.
    """

    requires_whole_batch = False

    def __init__(self, vg: ValueGrid):
        self.vg = vg
        self.u_max = vg.params.u_max
        # precompute dV/dx2 per layer, central with one-sided edges
        vals = vg.values
        grad = np.empty_like(vals)
        grad[:, :, 1:-1] = (vals[:, :, 2:] - vals[:, :, :-2]) / (2.0 * vg.dx2)
        grad[:, :, 0] = (vals[:, :, 1] - vals[:, :, 0]) / vg.dx2
        grad[:, :, -1] = (vals[:, :, -1] - vals[:, :, -2]) / vg.dx2
        self._grad = grad

    def coefficient(self, x, s: float) -> np.ndarray:
        """The dose coefficient 1 - x2(1-x2) dV/dx2 at the given states."""
        x = np.asarray(x, dtype=float)
        x1, x2 = x[..., 0], x[..., 1]
        if (x1 < 0).any() or (x1 > 1).any() or (x2 < 0).any() or (x2 > 1).any():
            raise ValueError("policy query outside [0,1]^2")
        layer = int(np.clip(round(s / self.vg.dt), 0, self.vg.nt - 1))
        slope = _bilinear(self._grad[layer], x1, x2, self.vg.dx1, self.vg.dx2)
        return 1.0 - x2 * (1.0 - x2) * slope

    def __call__(self, x, s: float) -> np.ndarray:
        phi = self.coefficient(x, s)
        return np.where(phi < -POLICY_TIE_TOL, self.u_max, 0.0)

    def __repr__(self):
        return f"HjbPolicy(grid={self.vg.nx1}x{self.vg.nx2}, layers={self.vg.nt})"


def hjb_policy(vg: ValueGrid) -> HjbPolicy:
    return HjbPolicy(vg)


@dataclass(frozen=True)
class OracleDiscrepancy:
    """Dynamic-programming self-check: V(0, x0) against a Monte Carlo rollout."""

    value_dp: float
    mc_mean: float
    mc_std_error: float

    @property
    def discrepancy(self) -> float:
        return abs(self.value_dp - self.mc_mean)

    def to_json_dict(self) -> dict:
        return {
            "value_dp": self.value_dp,
            "mc_mean": self.mc_mean,
            "mc_std_error": self.mc_std_error,
            "discrepancy": self.discrepancy,
        }


def value_vs_rollout(
    p: ModelParams,
    vg: ValueGrid,
    st0: State,
    n_samples: int = 1000,
    master_seed: int = 0,
    coupling_kind="zero",
    threads: int = 1,
) -> OracleDiscrepancy:
    """Compare V(0, st0) with a Monte Carlo estimate under the grid's policy.

    Only valid for the frozen (zero) coupling; the simulation runs on the
    time grid the layers were stored on.
    """
    from .simulate import TimeGrid

    spec = as_coupling_spec(coupling_kind)
    if not spec.is_zero:
        raise OracleScopeError("oracle valid only for frozen mean field (coupling zero)")
    grid = TimeGrid(horizon_t=vg.horizon_t, k_steps=vg.nt - 1)
    report = cost_mod.estimate_J(
        p, HjbPolicy(vg), st0, grid, "zero", n_samples=n_samples,
        master_seed=master_seed, threads=threads,
    )
    return OracleDiscrepancy(
        value_dp=value_at(vg, 0.0, st0),
        mc_mean=report.mean_cost,
        mc_std_error=report.std_error,
    )


def write_value_grid(vg: ValueGrid, csv_path, json_path) -> None:
    """Flat CSV (i1, i2, layer, value) plus a JSON metadata header."""
    meta = {
        "nx1": vg.nx1,
        "nx2": vg.nx2,
        "nt": vg.nt,
        "dt": vg.dt,
        "dx1": vg.dx1,
        "dx2": vg.dx2,
        "horizon_t": vg.horizon_t,
        "model": vg.params.to_dict(),
    }
    with open(json_path, "w") as fh:
        json.dump(meta, fh, indent=2, sort_keys=True)
        fh.write("\n")
    with open(csv_path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["i1", "i2", "layer", "value"])
        for layer in range(vg.nt):
            vals = vg.values[layer]
            for i1 in range(vg.nx1):
                row_vals = vals[i1]
                for i2 in range(vg.nx2):
                    writer.writerow([i1, i2, layer, repr(float(row_vals[i2]))])


def read_value_grid(csv_path, json_path) -> ValueGrid:
    with open(json_path) as fh:
        meta = json.load(fh)
    params = ModelParams.from_dict(meta["model"])
    values = np.empty((meta["nt"], meta["nx1"], meta["nx2"]))
    seen = 0
    with open(csv_path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header != ["i1", "i2", "layer", "value"]:
            raise ValueError(f"{csv_path}: unrecognized value-grid header {header}")
        for row in reader:
            if not row:
                continue
            i1, i2, layer, value = int(row[0]), int(row[1]), int(row[2]), float(row[3])
            values[layer, i1, i2] = value
            seen += 1
    if seen != values.size:
        raise ValueError(f"{csv_path}: expected {values.size} entries, found {seen}")
    return ValueGrid(
        nx1=meta["nx1"],
        nx2=meta["nx2"],
        nt=meta["nt"],
        values=values,
        dt=meta["dt"],
        dx1=meta["dx1"],
        dx2=meta["dx2"],
        horizon_t=meta["horizon_t"],
        params=params,
    )
