"""Three-species tumor game model: parameters, state algebra, drift and diffusion.

The tumor is made of glycolytic cells (GLY, anaerobic acid producers),
defectors (DEF, aerobic free-riders) and VEGF overproducers (VOP, aerobic
cells paying a vascularization cost). The reduced state tracks

    x1 = fraction of VOP among aerobic cells,
    x2 = fraction of GLY in the whole tumor,

both living in [0, 1]. Growth of the two coordinates follows a replicator
style drift with multiplicative noise on the three subpopulation channels;
a dose rate u suppresses the GLY growth term, and a scalar mean-field
statistic theta (computed from a particle ensemble elsewhere) shifts both
drift brackets and most diffusion entries additively.

All functions here are pure and operate either on scalar records or on
numpy arrays (the *_arrays kernels broadcast over arbitrary batch shapes).
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass, fields, replace

import numpy as np

__all__ = [
    "AerobicExtinctError",
    "CouplingStat",
    "Fractions",
    "ModelParams",
    "State",
    "Terminal",
    "classify_terminal",
    "diffusion",
    "diffusion_arrays",
    "drift",
    "drift_arrays",
    "fractions_from_counts",
    "state_from_fractions",
    "terminal_codes",
    "vop_benefit_factor_from_geometric",
]

_SUM_TOL = 1e-12


class AerobicExtinctError(ValueError):
    """The aerobic compartment is empty, so the VOP-among-aerobic fraction is undefined."""


@dataclass(frozen=True)
class ModelParams:
    """All game, noise and cost constants in one validated record.

    Units: beta_v, beta_alpha, cost_c are rates (1/time); sigma_g, sigma_d,
    sigma_v are volatilities (1/sqrt(time)); stabilization_weight_e is a
    cost per unit time; u_max bounds the dose rate; x2_success / x2_fail
    are thresholds on the GLY fraction classifying the terminal state.
    """

    beta_v: float = 1.0
    beta_alpha: float = 2.0
    cost_c: float = 0.4
    n_neighbors: int = 3
    vop_benefit_factor: float = 1.0
    sigma_g: float = 0.1
    sigma_d: float = 0.1
    sigma_v: float = 0.1
    stabilization_weight_e: float = 0.5
    failure_penalty_M: float = 100.0
    u_max: float = 1.5
    x2_success: float = 0.3
    x2_fail: float = 0.85
    symmetrize_theta: bool = False
    indeterminate_is_failure: bool = True

    def __post_init__(self):
        rates = {
            "beta_v": self.beta_v,
            "beta_alpha": self.beta_alpha,
            "cost_c": self.cost_c,
            "vop_benefit_factor": self.vop_benefit_factor,
            "sigma_g": self.sigma_g,
            "sigma_d": self.sigma_d,
            "sigma_v": self.sigma_v,
        }
        for name, value in rates.items():
            if not math.isfinite(value) or value < 0:
                raise ValueError(f"{name} must be finite and >= 0, got {value}")
        if self.n_neighbors < 1:
            raise ValueError(f"n_neighbors must be >= 1, got {self.n_neighbors}")
        if not self.stabilization_weight_e > 0:
            raise ValueError("stabilization_weight_e must be > 0")
        if not self.failure_penalty_M > 0:
            raise ValueError("failure_penalty_M must be > 0")
        if not self.u_max > 0:
            raise ValueError("u_max must be > 0")
        if not 0.0 <= self.x2_success <= self.x2_fail <= 1.0:
            raise ValueError(
                "thresholds must satisfy 0 <= x2_success <= x2_fail <= 1, got "
                f"({self.x2_success}, {self.x2_fail})"
            )

    def to_dict(self) -> dict:
        return {f.name: getattr(self, f.name) for f in fields(self)}

    @classmethod
    def from_dict(cls, d: dict) -> "ModelParams":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown model keys: {sorted(unknown)}")
        return cls(**d)

    def with_(self, **kw) -> "ModelParams":
        return replace(self, **kw)


@dataclass(frozen=True)
class State:
    """Point in the unit square: (VOP-among-aerobic fraction, GLY fraction)."""

    x1: float
    x2: float

    def __post_init__(self):
        if not (0.0 <= self.x1 <= 1.0 and 0.0 <= self.x2 <= 1.0):
            raise ValueError(f"state ({self.x1}, {self.x2}) outside [0,1]^2")

    def as_array(self) -> np.ndarray:
        return np.array([self.x1, self.x2], dtype=float)


@dataclass(frozen=True)
class Fractions:
    """Subpopulation proportions (GLY, DEF, VOP); they must sum to one."""

    b_g: float
    b_d: float
    b_v: float

    def __post_init__(self):
        for name in ("b_g", "b_d", "b_v"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise ValueError(f"{name}={v} outside [0,1]")
        s = self.b_g + self.b_d + self.b_v
        if abs(s - 1.0) > _SUM_TOL:
            raise ValueError(f"fractions sum to {s}, expected 1 within {_SUM_TOL}")


@dataclass(frozen=True)
class CouplingStat:
    """Scalar mean-field statistic added wherever the dynamics take '+theta'."""

    value: float = 0.0

    def __post_init__(self):
        if not math.isfinite(self.value):
            raise ValueError(f"coupling statistic must be finite, got {self.value}")


def _theta_value(theta) -> float:
    if isinstance(theta, CouplingStat):
        return theta.value
    return float(theta)


class Terminal(enum.Enum):
    SUCCESS = "success"
    FAILURE = "failure"
    INDETERMINATE = "indeterminate"


# integer codes used by the vectorized classifier
TERM_SUCCESS, TERM_FAILURE, TERM_INDETERMINATE = 0, 1, 2

_CODE_TO_TERMINAL = {
    TERM_SUCCESS: Terminal.SUCCESS,
    TERM_FAILURE: Terminal.FAILURE,
    TERM_INDETERMINATE: Terminal.INDETERMINATE,
}


def fractions_from_counts(m_g: float, m_d: float, m_v: float) -> Fractions:
    """Normalize raw subpopulation counts to proportions.

    Counts may be any nonnegative numbers (cell counts, masses); an
    all-zero population has no defined composition and raises ValueError.
    """
    if m_g < 0 or m_d < 0 or m_v < 0:
        raise ValueError("counts must be >= 0")
    total = m_g + m_d + m_v
    if total <= 0:
        raise ValueError("cannot form fractions from an all-zero population")
    return Fractions(b_g=m_g / total, b_d=m_d / total, b_v=m_v / total)


def state_from_fractions(f: Fractions) -> State:
    """Reduce (b_g, b_d, b_v) to the two-coordinate state (x1, x2).

    x1 is the VOP share of the aerobic compartment, x2 the GLY share of
    the whole tumor. A fully glycolytic tumor (b_g = 1) leaves x1
    undefined and raises AerobicExtinctError.
    """
    aerobic = f.b_v + f.b_d
    if aerobic <= 0:
        raise AerobicExtinctError(
            "aerobic-extinct: b_v + b_d = 0, VOP-among-aerobic fraction undefined"
        )
    return State(x1=f.b_v / aerobic, x2=f.b_g)


def vop_benefit_factor_from_geometric(q: float, d: int) -> float:
    """Geometric-series helper for the vascularization benefit factor.

    Returns sum_{j=0}^{d} q**j = (1 - q**(d+1)) / (1 - q), with the q = 0
    convention q**0 = 1 so the value is 1 there.
    """
    if not 0.0 <= q < 1.0:
        raise ValueError(f"q must lie in [0, 1), got {q}")
    if d < 0 or d != int(d):
        raise ValueError(f"d must be a nonnegative integer, got {d}")
    if q == 0.0:
        return 1.0
    return (1.0 - q ** (d + 1)) / (1.0 - q)


def drift_arrays(x1, x2, u, theta: float, p: ModelParams):
    """Drift components for batches of states; broadcasts over any shape.

    Inputs may be scalars or arrays of a common broadcast shape; theta is
    the scalar mean-field statistic frozen for the step. Returns (mu1, mu2).
    """
    sg2 = p.sigma_g * p.sigma_g
    sd2 = p.sigma_d * p.sigma_d
    sv2 = p.sigma_v * p.sigma_v
    inv_group = 1.0 / (p.n_neighbors + 1)
    vop_gain = p.beta_v * inv_group * p.vop_benefit_factor - p.cost_c

    g1 = x1 * (1.0 - x1)
    g2 = x2 * (1.0 - x2)
    mu1 = g1 * (vop_gain + theta + (1.0 - x1) * sd2 - x1 * sv2)
    ito2 = sg2 * x2 - (1.0 - x2) * (sd2 * (1.0 - x1) ** 2 + sv2 * x1 * x1)
    mu2 = g2 * (p.beta_alpha * inv_group - (p.beta_v - p.cost_c) * x1 - u + theta - ito2)
    return mu1, mu2


def drift(st: State, u: float, theta, p: ModelParams) -> np.ndarray:
    """Drift vector at a single state under dose rate u and coupling theta."""
    if not 0.0 <= u <= p.u_max:
        raise ValueError(f"dose {u} outside [0, {p.u_max}]")
    mu1, mu2 = drift_arrays(st.x1, st.x2, u, _theta_value(theta), p)
    return np.array([mu1, mu2], dtype=float)


def diffusion_arrays(x1, x2, theta: float, p: ModelParams):
    """The five nonzero diffusion entries, broadcast over batch shapes.

    Returns (s12, s13, s21, s22, s23); entry (1,1) is identically zero.
    The (2,3) entry carries no +theta shift unless symmetrize_theta is set.
    """
    g1 = x1 * (1.0 - x1)
    g2 = x2 * (1.0 - x2)
    s12 = -p.sigma_d * g1 + theta
    s13 = p.sigma_v * g1 + theta
    s21 = p.sigma_g * g2 + theta
    s22 = p.sigma_g * g2 * (1.0 - x1) + theta
    s23 = p.sigma_g * g2 * x1
    if p.symmetrize_theta:
        s23 = s23 + theta
    return s12, s13, s21, s22, s23


def diffusion(st: State, theta, p: ModelParams) -> np.ndarray:
    """2x3 diffusion matrix at a single state; columns follow the (g, d, v) noise order."""
    s12, s13, s21, s22, s23 = diffusion_arrays(st.x1, st.x2, _theta_value(theta), p)
    return np.array([[0.0, s12, s13], [s21, s22, s23]], dtype=float)


def terminal_codes(x2, p: ModelParams) -> np.ndarray:
    """Vectorized terminal classifier on the GLY fraction.

    0 = success (x2 <= x2_success), 1 = failure (x2 >= x2_fail),
    2 = indeterminate. Success wins if the thresholds coincide.
    """
    x2 = np.asarray(x2)
    codes = np.where(x2 >= p.x2_fail, TERM_FAILURE, TERM_INDETERMINATE)
    codes = np.where(x2 <= p.x2_success, TERM_SUCCESS, codes)
    return codes.astype(np.int8)


def classify_terminal(st: State, p: ModelParams) -> Terminal:
    """Classify a terminal state as Success, Failure or Indeterminate."""
    return _CODE_TO_TERMINAL[int(terminal_codes(st.x2, p))]
