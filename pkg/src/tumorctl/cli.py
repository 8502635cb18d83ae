"""Batch experiment front end.

Subcommands: simulate, evaluate, control, hjb, wasserstein. Every run is
driven by one TOML config (see :mod:`tumorctl.config`) and is
deterministic given that file: reruns produce byte-identical outputs for
any --threads value. Outputs are CSV and JSON only; plotting belongs to
downstream tools.

Exit codes: 0 success, 2 user or config error, 3 scope error (the
dynamic-programming oracle with a live coupling), 4 numerical-stability
error.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np

from . import cost as cost_mod
from . import hjb as hjb_mod
from . import measures, pic, simulate
from .config import ConfigError, RunConfig, load_config
from .policies import ConstantPolicy, ThresholdPolicy, ZeroPolicy

EXIT_OK = 0
EXIT_USER = 2
EXIT_SCOPE = 3
EXIT_STABILITY = 4


class CliError(Exception):
    def __init__(self, message: str, code: int = EXIT_USER):
        super().__init__(message)
        self.code = code


def _write_json(path: Path, payload: dict) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w") as fh:
        json.dump(payload, fh, indent=2, sort_keys=True)
        fh.write("\n")


def _parse_policy(spec: str, cfg: RunConfig):
    """Resolve a policy spec string against the run configuration.

    Forms: zero | constant:<v> | threshold:<x2*,lo,hi> | hjb:<grid.csv>
    | mppi. The hjb form expects the matching metadata JSON next to the
    CSV (same stem).
    """
    kind, _, arg = spec.partition(":")
    try:
        if kind == "zero":
            return ZeroPolicy()
        if kind == "constant":
            value = float(arg)
            if value > cfg.model.u_max:
                raise ValueError(f"constant dose {value} exceeds u_max {cfg.model.u_max}")
            return ConstantPolicy(value)
        if kind == "threshold":
            parts = [float(v) for v in arg.split(",")]
            if len(parts) != 3:
                raise ValueError("threshold policy needs x2*,lo,hi")
            pol = ThresholdPolicy(*parts)
            if max(pol.lo, pol.hi) > cfg.model.u_max:
                raise ValueError("threshold doses exceed u_max")
            return pol
        if kind == "hjb":
            csv_path = Path(arg)
            json_path = csv_path.with_suffix(".json")
            vg = hjb_mod.read_value_grid(csv_path, json_path)
            return hjb_mod.HjbPolicy(vg)
        if kind == "mppi":
            return pic.MppiPolicy(
                cfg.model, cfg.grid, cfg.pic, cfg.coupling,
                simulate.SeedSpec(cfg.master_seed),
            )
    except (OSError, ValueError) as exc:
        raise CliError(f"bad policy spec {spec!r}: {exc}") from None
    raise CliError(f"unknown policy {spec!r}; expected zero|constant:v|threshold:x2*,lo,hi|hjb:file|mppi")


def _run_report(cfg: RunConfig, policy, threads: int) -> cost_mod.CostReport:
    return cost_mod.estimate_J(
        cfg.model, policy, cfg.io.initial_state(), cfg.grid, cfg.coupling,
        n_samples=cfg.io.n_samples, master_seed=cfg.master_seed, threads=threads,
    )


def cmd_simulate(cfg: RunConfig, policy_spec: str, out_dir: Path, threads: int) -> int:
    policy = _parse_policy(policy_spec, cfg)
    report = _run_report(cfg, policy, threads)
    label = cfg.io.run_label
    _write_json(out_dir / f"{label}_simulate_report.json", report.to_json_dict())

    n_traj = min(cfg.io.n_trajectories, cfg.io.n_samples)
    if n_traj > 0:
        # fresh policy instance so receding-horizon state starts clean
        batch = simulate.batch_paths(
            cfg.model, _parse_policy(policy_spec, cfg), cfg.io.initial_state(),
            cfg.grid, cfg.coupling, n_samples=cfg.io.n_samples,
            master_seed=cfg.master_seed, threads=threads,
        )
        for i in range(n_traj):
            simulate.write_trajectory_csv(
                batch.bundle(i, cfg.model), out_dir / f"{label}_traj_{i:03d}.csv"
            )
    print(f"simulate: mean_cost={report.mean_cost!r} n={report.n_samples}")
    return EXIT_OK


def cmd_evaluate(cfg: RunConfig, policy_spec: str, out_dir: Path, threads: int) -> int:
    policy = _parse_policy(policy_spec, cfg)
    report = _run_report(cfg, policy, threads)
    _write_json(out_dir / f"{cfg.io.run_label}_evaluate_report.json", report.to_json_dict())
    print(f"evaluate: mean_cost={report.mean_cost!r} n={report.n_samples}")
    return EXIT_OK


def cmd_control(cfg: RunConfig, out_dir: Path, threads: int) -> int:
    label = cfg.io.run_label
    seed = simulate.SeedSpec(cfg.master_seed)
    st0 = cfg.io.initial_state()
    plan, diag = pic.mppi_plan(cfg.model, st0, cfg.grid, cfg.pic, cfg.coupling, seed)
    out_dir.mkdir(parents=True, exist_ok=True)
    pic.write_plan_csv(plan, cfg.grid.dt, out_dir / f"{label}_plan.csv")
    _write_json(out_dir / f"{label}_plan_diagnostics.json", diag)

    tr, policy = pic.mppi_feedback(
        cfg.model, st0, cfg.grid, cfg.pic, cfg.coupling, seed, return_policy=True
    )
    simulate.write_trajectory_csv(tr, out_dir / f"{label}_feedback_traj.csv")
    _write_json(
        out_dir / f"{label}_feedback_diagnostics.json",
        {
            "total_cost": tr.total_cost,
            "terminal": tr.terminal.value,
            "dose_integral": float(cfg.grid.dt * np.sum(tr.controls)),
            "steps": policy.step_diagnostics,
        },
    )
    print(f"control: feedback_cost={tr.total_cost!r} terminal={tr.terminal.value}")
    return EXIT_OK


def cmd_hjb(cfg: RunConfig, out_dir: Path, threads: int) -> int:
    if not cfg.coupling.is_zero:
        raise CliError(
            "the dynamic-programming oracle only covers coupling = zero; "
            "freeze the mean field to use this command", EXIT_SCOPE,
        )
    label = cfg.io.run_label
    vg = hjb_mod.hjb_solve(
        cfg.model, cfg.hjb.nx1, cfg.hjb.nx2, cfg.grid.horizon_t,
        k_store=cfg.grid.k_steps, cfl_safety=cfg.hjb.cfl_safety,
        nt_solve=cfg.hjb.nt_solve,
    )
    out_dir.mkdir(parents=True, exist_ok=True)
    hjb_mod.write_value_grid(
        vg, out_dir / f"{label}_value_grid.csv", out_dir / f"{label}_value_grid.json"
    )
    check = hjb_mod.value_vs_rollout(
        cfg.model, vg, cfg.io.initial_state(), n_samples=cfg.io.n_samples,
        master_seed=cfg.master_seed, coupling_kind=cfg.coupling, threads=threads,
    )
    _write_json(out_dir / f"{label}_hjb_check.json", check.to_json_dict())
    print(f"hjb: value={check.value_dp!r} mc={check.mc_mean!r}")
    return EXIT_OK


def cmd_wasserstein(file_a: str, file_b: str, rho: float, show_coupling: bool) -> int:
    try:
        mu = measures.read_measure_csv(file_a)
        nu = measures.read_measure_csv(file_b)
    except (OSError, ValueError) as exc:
        raise CliError(f"cannot read measure: {exc}") from None
    try:
        if mu.dim == 1 and nu.dim == 1 and not show_coupling:
            distance = measures.wasserstein_1d(rho, mu, nu)
            payload = {"rho": rho, "distance": distance, "solver": "closed_form_1d"}
        else:
            result = measures.wasserstein_lp(rho, mu, nu, return_coupling=show_coupling)
            if show_coupling:
                distance, coupling = result
                payload = {
                    "rho": rho, "distance": distance, "solver": "exact_lp",
                    "coupling": [[float(v) for v in row] for row in coupling],
                }
            else:
                payload = {"rho": rho, "distance": result, "solver": "exact_lp"}
    except ValueError as exc:
        raise CliError(str(exc)) from None
    print(json.dumps(payload, indent=2, sort_keys=True))
    return EXIT_OK


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="tumorctl",
        description="Simulate tumor subpopulation dynamics and compute dosing policies.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    def add_common(sp):
        sp.add_argument("--config", required=True, help="TOML run configuration")
        sp.add_argument("--out", default=None, help="output directory (overrides [io].out_dir)")
        sp.add_argument("--seed", type=int, default=None, help="override [seed].master_seed")
        sp.add_argument("--threads", type=int, default=1, help="worker threads for sample batches")

    sp = sub.add_parser("simulate", help="roll out a policy; write trajectories and a cost report")
    add_common(sp)
    sp.add_argument("--policy", default="zero",
                    help="zero | constant:v | threshold:x2*,lo,hi | hjb:grid.csv | mppi")

    sp = sub.add_parser("evaluate", help="Monte Carlo cost report for a policy")
    add_common(sp)
    sp.add_argument("--policy", default="zero",
                    help="zero | constant:v | threshold:x2*,lo,hi | hjb:grid.csv | mppi")

    sp = sub.add_parser("control", help="run the sampling planner: open-loop plan and feedback run")
    add_common(sp)

    sp = sub.add_parser("hjb", help="solve the dynamic-programming oracle and self-check it")
    add_common(sp)

    sp = sub.add_parser("wasserstein", help="distance between two measure CSV files")
    sp.add_argument("file_a")
    sp.add_argument("file_b")
    sp.add_argument("--rho", type=float, default=2.0, help="Wasserstein exponent (>= 1)")
    sp.add_argument("--show-coupling", action="store_true", help="include the optimal coupling")
    return parser


def main(argv=None) -> int:
    parser = _build_parser()
    args = parser.parse_args(argv)
    try:
        if args.command == "wasserstein":
            return cmd_wasserstein(args.file_a, args.file_b, args.rho, args.show_coupling)

        cfg = load_config(args.config)
        if args.seed is not None:
            if not 0 <= args.seed < 2**64:
                raise CliError("--seed must be a 64-bit unsigned integer")
            cfg = RunConfig(**{**cfg.__dict__, "master_seed": args.seed})
        out_dir = Path(args.out) if args.out is not None else Path(cfg.io.out_dir)
        threads = max(1, args.threads)

        if args.command == "simulate":
            return cmd_simulate(cfg, args.policy, out_dir, threads)
        if args.command == "evaluate":
            return cmd_evaluate(cfg, args.policy, out_dir, threads)
        if args.command == "control":
            return cmd_control(cfg, out_dir, threads)
        if args.command == "hjb":
            return cmd_hjb(cfg, out_dir, threads)
        raise CliError(f"unknown command {args.command}")
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_USER
    except CliError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.code
    except hjb_mod.StabilityError as exc:
        print(f"numerical stability error: {exc}", file=sys.stderr)
        return EXIT_STABILITY


if __name__ == "__main__":
    raise SystemExit(main())
