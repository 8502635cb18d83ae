"""Empirical measures, exact Wasserstein distances, and the scalar coupling statistic.

Two independent transport solvers are provided on purpose: the 1D
closed form (merged quantile functions) and a desk-scale exact linear
program over couplings. They cross-check each other in the test suite.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass

import numpy as np
from scipy import sparse
from scipy.optimize import linprog

from .model import CouplingStat

__all__ = [
    "CouplingSpec",
    "EmpiricalMeasure",
    "MAX_LP_SUPPORT",
    "as_coupling_spec",
    "coupling_stat",
    "empirical_from_samples",
    "read_measure_csv",
    "wasserstein_1d",
    "wasserstein_lp",
    "write_measure_csv",
]

MAX_LP_SUPPORT = 256
_WEIGHT_TOL = 1e-12

COUPLING_KINDS = ("zero", "mean_x1", "mean_x2", "scaled_mean")


@dataclass(frozen=True)
class EmpiricalMeasure:
    """Weighted point masses in R^dim, dim 1 or 2; weights sum to one."""

    support: np.ndarray
    weights: np.ndarray

    def __post_init__(self):
        support = np.atleast_1d(np.asarray(self.support, dtype=float))
        if support.ndim == 1:
            support = support[:, None]
        if support.ndim != 2 or support.shape[1] not in (1, 2):
            raise ValueError(f"support must be (N, 1) or (N, 2), got {support.shape}")
        weights = np.asarray(self.weights, dtype=float).ravel()
        if weights.shape[0] != support.shape[0]:
            raise ValueError("support and weights length mismatch")
        if not np.isfinite(support).all():
            raise ValueError("support points must be finite")
        if not np.isfinite(weights).all() or (weights < 0).any():
            raise ValueError("weights must be finite and >= 0")
        if abs(weights.sum() - 1.0) > _WEIGHT_TOL:
            raise ValueError(f"weights sum to {weights.sum()}, expected 1 within {_WEIGHT_TOL}")
        object.__setattr__(self, "support", support)
        object.__setattr__(self, "weights", weights)

    @property
    def dim(self) -> int:
        return self.support.shape[1]

    def __len__(self) -> int:
        return self.support.shape[0]


def empirical_from_samples(points) -> EmpiricalMeasure:
    """Uniform measure on the given sample points; duplicates are kept as-is."""
    pts = np.atleast_1d(np.asarray(points, dtype=float))
    if pts.size == 0:
        raise ValueError("cannot build an empirical measure from no samples")
    if pts.ndim == 1:
        pts = pts[:, None]
    n = pts.shape[0]
    return EmpiricalMeasure(support=pts, weights=np.full(n, 1.0 / n))


def _quantile_segments(m: EmpiricalMeasure):
    order = np.argsort(m.support[:, 0], kind="stable")
    xs = m.support[order, 0]
    cum = np.cumsum(m.weights[order])
    cum /= cum[-1]
    return xs, cum


def wasserstein_1d(rho: float, mu: EmpiricalMeasure, nu: EmpiricalMeasure) -> float:
    """Exact 1D rho-Wasserstein distance via merged quantile functions.

    Integrates |F_mu^-1(q) - F_nu^-1(q)|**rho over q in (0, 1) piecewise,
    on the merged breakpoints of both cumulative weight profiles.
    """
    if rho < 1:
        raise ValueError(f"rho must be >= 1, got {rho}")
    if mu.dim != 1 or nu.dim != 1:
        raise ValueError("wasserstein_1d requires 1-dimensional measures")
    xs_mu, cum_mu = _quantile_segments(mu)
    xs_nu, cum_nu = _quantile_segments(nu)
    levels = np.union1d(cum_mu, cum_nu)
    lows = np.concatenate(([0.0], levels[:-1]))
    lengths = levels - lows
    mids = 0.5 * (lows + levels)
    q_mu = xs_mu[np.searchsorted(cum_mu, mids, side="left")]
    q_nu = xs_nu[np.searchsorted(cum_nu, mids, side="left")]
    total = float(np.sum(lengths * np.abs(q_mu - q_nu) ** rho))
    return total ** (1.0 / rho)


def _cost_matrix(mu: EmpiricalMeasure, nu: EmpiricalMeasure, rho: float) -> np.ndarray:
    if mu.dim != nu.dim:
        raise ValueError("measures must share a dimension")
    diff = mu.support[:, None, :] - nu.support[None, :, :]
    dist = np.sqrt(np.sum(diff * diff, axis=2))
    return dist**rho


def wasserstein_lp(rho: float, mu: EmpiricalMeasure, nu: EmpiricalMeasure,
                   return_coupling: bool = False):
    """Exact small-support rho-Wasserstein distance via the transport LP.

    Solves min <C, P> over couplings P with marginals (mu, nu), where
    C_ij = |x_i - y_j|^rho in the Euclidean ground metric, and returns
    the rho-th root of the optimum. Supports are capped at
    MAX_LP_SUPPORT points each; this is a desk-scale exact solver, not a
    large-scale approximation.
    """
    if rho < 1:
        raise ValueError(f"rho must be >= 1, got {rho}")
    n, m = len(mu), len(nu)
    if n > MAX_LP_SUPPORT or m > MAX_LP_SUPPORT:
        raise ValueError(
            f"support sizes ({n}, {m}) exceed the exact-LP cap of {MAX_LP_SUPPORT}"
        )
    cost = _cost_matrix(mu, nu, rho)

    # marginal constraints: row sums = mu.weights, column sums = nu.weights
    row_idx = np.repeat(np.arange(n), m)
    col_idx = np.tile(np.arange(m), n) + n
    var_idx = np.arange(n * m)
    a_eq = sparse.csc_matrix(
        (np.ones(2 * n * m), (np.concatenate([row_idx, col_idx]), np.tile(var_idx, 2))),
        shape=(n + m, n * m),
    )
    b_eq = np.concatenate([mu.weights, nu.weights])
    res = linprog(cost.ravel(), A_eq=a_eq, b_eq=b_eq, bounds=(0, None), method="highs")
    if res.status != 0:
        raise RuntimeError(f"transport LP failed: {res.message}")
    value = max(res.fun, 0.0)
    distance = value ** (1.0 / rho)
    if return_coupling:
        return distance, res.x.reshape(n, m)
    return distance


@dataclass(frozen=True)
class CouplingSpec:
    """Which scalar functional of the ensemble law feeds back into the dynamics."""

    kind: str = "zero"
    coord: int = 2
    gain: float = 1.0

    def __post_init__(self):
        if self.kind not in COUPLING_KINDS:
            raise ValueError(f"unknown coupling kind {self.kind!r}; expected one of {COUPLING_KINDS}")
        if self.coord not in (1, 2):
            raise ValueError(f"coupling coord must be 1 or 2, got {self.coord}")
        if not np.isfinite(self.gain):
            raise ValueError("coupling gain must be finite")

    @property
    def is_zero(self) -> bool:
        return self.kind == "zero"

    def stat_from_states(self, states: np.ndarray) -> float:
        """Scalar statistic from an (N, 2) array of particle states."""
        if self.kind == "zero":
            return 0.0
        if self.kind == "mean_x1":
            return float(np.mean(states[:, 0]))
        if self.kind == "mean_x2":
            return float(np.mean(states[:, 1]))
        return self.gain * float(np.mean(states[:, self.coord - 1]))


def as_coupling_spec(kind) -> CouplingSpec:
    """Coerce a kind string or CouplingSpec into a CouplingSpec."""
    if isinstance(kind, CouplingSpec):
        return kind
    return CouplingSpec(kind=str(kind))


def coupling_stat(m: EmpiricalMeasure, kind, *, coord: int = 2, gain: float = 1.0) -> CouplingStat:
    """Evaluate the configured scalar statistic of a 2D empirical measure."""
    spec = kind if isinstance(kind, CouplingSpec) else CouplingSpec(kind=str(kind), coord=coord, gain=gain)
    if spec.kind == "zero":
        return CouplingStat(0.0)
    if m.dim != 2:
        raise ValueError("coupling statistics are defined on 2-dimensional measures")
    if spec.kind == "mean_x1":
        value = float(np.sum(m.weights * m.support[:, 0]))
    elif spec.kind == "mean_x2":
        value = float(np.sum(m.weights * m.support[:, 1]))
    else:
        value = spec.gain * float(np.sum(m.weights * m.support[:, spec.coord - 1]))
    return CouplingStat(value)


def write_measure_csv(m: EmpiricalMeasure, path) -> None:
    header = ["x1", "weight"] if m.dim == 1 else ["x1", "x2", "weight"]
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(header)
        for point, w in zip(m.support, m.weights):
            writer.writerow([repr(float(v)) for v in point] + [repr(float(w))])


def read_measure_csv(path) -> EmpiricalMeasure:
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise ValueError(f"{path}: empty measure file") from None
        if header == ["x1", "weight"]:
            dim = 1
        elif header == ["x1", "x2", "weight"]:
            dim = 2
        else:
            raise ValueError(f"{path}: unrecognized measure header {header}")
        rows = [row for row in reader if row]
    if not rows:
        raise ValueError(f"{path}: no support points")
    try:
        data = np.array([[float(v) for v in row] for row in rows])
    except ValueError as exc:
        raise ValueError(f"{path}: malformed measure row: {exc}") from None
    if data.shape[1] != dim + 1:
        raise ValueError(f"{path}: rows do not match header width")
    return EmpiricalMeasure(support=data[:, :dim], weights=data[:, dim])
