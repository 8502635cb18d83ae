"""Stochastic tumor-growth simulation and dose-control toolkit.

Submodules:
    model     - game constants, state algebra, drift/diffusion coefficients
    simulate  - Euler-Maruyama paths, interacting ensembles, RK4 oracle
    measures  - empirical measures, exact Wasserstein distances, coupling statistic
    cost      - running/terminal costs and the Monte Carlo objective
    policies  - basic dosing policies (zero, constant, threshold, open-loop)
    pic       - sampling path-integral planner and receding-horizon policy
    hjb       - dynamic-programming oracle (finite-difference value function)
    config    - TOML run configuration
    cli       - batch experiment front end
"""

__version__ = "0.1.0"

from .model import ModelParams, State  # noqa: F401

__all__ = ["ModelParams", "State", "__version__"]
