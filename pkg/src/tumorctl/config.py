"""Run configuration: one TOML file drives every CLI experiment.

Sections mirror the library's own records ([model], [grid], [coupling],
[pic], [hjb]) plus experiment I/O ([io]) and the master seed ([seed]).
Unknown sections or keys are rejected so a typo cannot silently fall
back to a default. All randomness in a run flows from seed.master_seed.
"""

from __future__ import annotations

import sys
from dataclasses import dataclass
from typing import Optional

if sys.version_info >= (3, 11):
    import tomllib as _toml
else:
    import tomli as _toml

from .measures import CouplingSpec
from .model import ModelParams, State
from .pic import PicConfig
from .simulate import TimeGrid

__all__ = ["ConfigError", "HjbConfig", "IoConfig", "RunConfig", "load_config"]


class ConfigError(ValueError):
    """A config file could not be parsed into a valid RunConfig."""


@dataclass(frozen=True)
class HjbConfig:
    nx1: int = 129
    nx2: int = 129
    cfl_safety: float = 0.5
    nt_solve: Optional[int] = None


@dataclass(frozen=True)
class IoConfig:
    out_dir: str = "out"
    run_label: str = "run"
    n_samples: int = 100
    n_trajectories: int = 1
    x1_0: float = 0.5
    x2_0: float = 0.5

    def initial_state(self) -> State:
        return State(self.x1_0, self.x2_0)


@dataclass(frozen=True)
class RunConfig:
    model: ModelParams
    grid: TimeGrid
    coupling: CouplingSpec
    pic: PicConfig
    hjb: HjbConfig
    io: IoConfig
    master_seed: int


_SECTIONS = ("model", "grid", "coupling", "pic", "hjb", "io", "seed")


def _take(section: dict, name: str, keys: dict) -> dict:
    """Validate keys of one section against a {key: converter} table."""
    unknown = set(section) - set(keys)
    if unknown:
        raise ConfigError(f"[{name}]: unknown keys {sorted(unknown)}")
    out = {}
    for key, value in section.items():
        conv = keys[key]
        try:
            out[key] = conv(value)
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"[{name}].{key}: {exc}") from None
    return out


def _build(cls, name: str, kwargs: dict):
    try:
        return cls(**kwargs)
    except ValueError as exc:
        raise ConfigError(f"[{name}]: {exc}") from None


def load_config(path) -> RunConfig:
    """Parse and validate a TOML run configuration."""
    try:
        with open(path, "rb") as fh:
            raw = _toml.load(fh)
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from None
    except _toml.TOMLDecodeError as exc:
        raise ConfigError(f"{path}: invalid TOML: {exc}") from None

    unknown = set(raw) - set(_SECTIONS)
    if unknown:
        raise ConfigError(f"unknown config sections {sorted(unknown)}")

    model_keys = {
        "beta_v": float, "beta_alpha": float, "cost_c": float, "n_neighbors": int,
        "vop_benefit_factor": float, "sigma_g": float, "sigma_d": float, "sigma_v": float,
        "stabilization_weight_e": float, "failure_penalty_M": float, "u_max": float,
        "x2_success": float, "x2_fail": float, "symmetrize_theta": bool,
        "indeterminate_is_failure": bool,
    }
    model = _build(ModelParams, "model", _take(raw.get("model", {}), "model", model_keys))

    grid_kwargs = _take(
        raw.get("grid", {}), "grid", {"horizon_t": float, "k_steps": int}
    )
    grid_kwargs.setdefault("horizon_t", 2.0)
    grid_kwargs.setdefault("k_steps", 100)
    grid = _build(TimeGrid, "grid", grid_kwargs)

    coupling_kwargs = _take(
        raw.get("coupling", {}), "coupling", {"kind": str, "coord": int, "gain": float}
    )
    coupling = _build(CouplingSpec, "coupling", coupling_kwargs)

    pic_keys = {
        "k_steps": int, "n_rollouts": int, "temperature_lambda": float,
        "proposal_std": float, "n_iterations": int,
        "u_init": lambda v: tuple(float(x) for x in v),
        "warmup_iterations": int, "risk_margin": float,
    }
    pic_kwargs = _take(raw.get("pic", {}), "pic", pic_keys)
    pic_kwargs.setdefault("k_steps", grid.k_steps)
    pic = _build(PicConfig, "pic", pic_kwargs)

    hjb_kwargs = _take(
        raw.get("hjb", {}), "hjb",
        {"nx1": int, "nx2": int, "cfl_safety": float, "nt_solve": int},
    )
    hjb_cfg = _build(HjbConfig, "hjb", hjb_kwargs)
    if hjb_cfg.nx1 < 16 or hjb_cfg.nx2 < 16:
        raise ConfigError("[hjb]: grid sizes must be >= 16")

    io_kwargs = _take(
        raw.get("io", {}), "io",
        {"out_dir": str, "run_label": str, "n_samples": int, "n_trajectories": int,
         "x1_0": float, "x2_0": float},
    )
    io_cfg = _build(IoConfig, "io", io_kwargs)
    if io_cfg.n_samples < 2:
        raise ConfigError("[io].n_samples must be >= 2")
    if io_cfg.n_trajectories < 0:
        raise ConfigError("[io].n_trajectories must be >= 0")
    try:
        io_cfg.initial_state()
    except ValueError as exc:
        raise ConfigError(f"[io]: {exc}") from None

    seed_kwargs = _take(raw.get("seed", {}), "seed", {"master_seed": int})
    master_seed = seed_kwargs.get("master_seed", 0)
    if not 0 <= master_seed < 2**64:
        raise ConfigError("[seed].master_seed must be a 64-bit unsigned integer")

    return RunConfig(
        model=model, grid=grid, coupling=coupling, pic=pic,
        hjb=hjb_cfg, io=io_cfg, master_seed=master_seed,
    )
