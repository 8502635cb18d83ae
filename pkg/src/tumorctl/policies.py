"""Dosing policies: state- and time-dependent dose-rate rules.

A policy is any callable ``policy(x, s) -> u`` taking a state array of
shape (..., 2) and the current time, returning dose rates of shape (...).
Policies are expected to saturate their own output into [0, u_max]; the
rollout machinery rejects out-of-range doses rather than fixing them.

Feedback policies derived from the dynamic-programming solver and the
sampling planner live in :mod:`tumorctl.hjb` and :mod:`tumorctl.pic`.
"""

from __future__ import annotations

from typing import Protocol

import numpy as np

__all__ = ["ConstantPolicy", "OpenLoopPolicy", "Policy", "ThresholdPolicy", "ZeroPolicy"]


class Policy(Protocol):
    def __call__(self, x: np.ndarray, s: float) -> np.ndarray: ...


class ZeroPolicy:
    """No treatment."""

    def __call__(self, x, s):
        x = np.asarray(x)
        return np.zeros(x.shape[:-1], dtype=float)

    def __repr__(self):
        return "ZeroPolicy()"


class ConstantPolicy:
    """Fixed dose rate, regardless of state and time."""

    def __init__(self, value: float):
        if not np.isfinite(value) or value < 0:
            raise ValueError(f"constant dose must be finite and >= 0, got {value}")
        self.value = float(value)

    def __call__(self, x, s):
        x = np.asarray(x)
        return np.full(x.shape[:-1], self.value, dtype=float)

    def __repr__(self):
        return f"ConstantPolicy({self.value})"


class ThresholdPolicy:
    """Feedback on the GLY fraction: dose hi at or above the threshold, lo below."""

    def __init__(self, x2_star: float, lo: float, hi: float):
        if not 0.0 <= x2_star <= 1.0:
            raise ValueError(f"threshold must lie in [0,1], got {x2_star}")
        if lo < 0 or hi < 0:
            raise ValueError("dose levels must be >= 0")
        self.x2_star = float(x2_star)
        self.lo = float(lo)
        self.hi = float(hi)

    def __call__(self, x, s):
        x = np.asarray(x, dtype=float)
        return np.where(x[..., 1] >= self.x2_star, self.hi, self.lo)

    def __repr__(self):
        return f"ThresholdPolicy(x2_star={self.x2_star}, lo={self.lo}, hi={self.hi})"


class OpenLoopPolicy:
    """Replays a precomputed dose sequence on a uniform time grid.

    The step index is the nearest grid step of s / dt, clipped to the
    sequence, so the policy is also usable slightly past its horizon.
    """

    def __init__(self, doses, dt: float):
        doses = np.asarray(doses, dtype=float).ravel()
        if doses.size == 0:
            raise ValueError("open-loop policy needs at least one dose")
        if not np.isfinite(doses).all() or (doses < 0).any():
            raise ValueError("open-loop doses must be finite and >= 0")
        if dt <= 0:
            raise ValueError("dt must be > 0")
        self.doses = doses
        self.dt = float(dt)

    def __call__(self, x, s):
        x = np.asarray(x)
        i = min(int(round(s / self.dt)), self.doses.size - 1)
        return np.full(x.shape[:-1], self.doses[i], dtype=float)

    def __repr__(self):
        return f"OpenLoopPolicy(k={self.doses.size}, dt={self.dt})"
