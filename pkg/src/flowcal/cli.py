"""Command-line entry point.

Commands: assign, calibrate, rl-train, rl-eval, check.  Every command is
deterministic given (inputs, seed); artifacts are written to --out-dir via a
temp file and atomic rename, so failures leave no partial output.  CSV output
uses '.' decimals, ',' separators, a header row, LF line endings, and one
leading '#' metadata line echoing the resolved configuration.

Exit codes: 0 success, 1 usage/config, 2 data, 3 numeric failure.
"""
from __future__ import annotations

import dataclasses
import json
import os
import sys
from pathlib import Path

import click
import numpy as np

from .assignment import AssignmentConfig, solve_user_equilibrium
from .calibration import MODES, CalibrationConfig, run_calibration
from .dqn import (
    DQNConfig,
    SchedulingEnvConfig,
    evaluate_policy,
    random_profile,
    train_dqn,
)
from .errors import ConfigError, DataError, FlowcalError, NumericError
from .network import (
    ODMatrix,
    parse_tntp_network,
    parse_tntp_trips,
    validate_network,
)
from .neural import mlp_from_json, mlp_to_json

DEFAULT_SEED = 0


def _load_config_file(path: str | None) -> dict:
    if path is None:
        return {}
    text = Path(path).read_text()
    if path.endswith(".toml"):
        try:
            import tomllib  # Python >= 3.11
        except ModuleNotFoundError:
            import tomli as tomllib
        return tomllib.loads(text)
    try:
        return json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config file {path} is not valid JSON: {exc}") from exc


def _resolve(config: dict, overrides: dict) -> dict:
    """Config-file values overridden by explicitly passed CLI flags."""
    merged = dict(config)
    merged.update({k: v for k, v in overrides.items() if v is not None})
    return merged


def _fmt(value) -> str:
    if isinstance(value, (float, np.floating)):
        return repr(float(value))
    return str(value)


def _write_atomic(path: Path, text: str) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_text(text)
    os.replace(tmp, path)


def _csv_text(header: list[str], rows: list[list], params: dict) -> str:
    lines = ["# " + json.dumps(params, sort_keys=True)]
    lines.append(",".join(header))
    for row in rows:
        lines.append(",".join(_fmt(v) for v in row))
    return "\n".join(lines) + "\n"


def _json_text(payload: dict, params: dict) -> str:
    return json.dumps({"metadata": params, **payload}, sort_keys=True, indent=1) + "\n"


def _read_inputs(net_path: str, trips_path: str, demand_scale: float):
    net = parse_tntp_network(Path(net_path).read_text())
    trips = parse_tntp_trips(Path(trips_path).read_text())
    if demand_scale != 1.0:
        trips = trips.scaled(demand_scale)
    return net, trips


@click.group()
def cli():
    """Traffic equilibrium, O-D calibration, and demand-scheduling toolkit."""


@cli.command("assign")
@click.option("--net", "net_path", required=True, type=click.Path(exists=True))
@click.option("--trips", "trips_path", required=True, type=click.Path(exists=True))
@click.option("--config", "config_path", type=click.Path(exists=True))
@click.option("--out-dir", default=".", show_default=True)
@click.option("--max-iterations", type=int, default=None)
@click.option("--gap-tolerance", type=float, default=None)
@click.option("--demand-scale", type=float, default=None)
@click.option("--seed", type=int, default=None)  # recorded; the solve is deterministic
def cmd_assign(net_path, trips_path, config_path, out_dir, max_iterations,
               gap_tolerance, demand_scale, seed):
    """Solve user equilibrium; write per-link CSV and a summary JSON."""
    params = _resolve(
        {
            "max_iterations": AssignmentConfig.max_iterations,
            "gap_tolerance": AssignmentConfig.gap_tolerance,
            "line_search_tolerance": AssignmentConfig.line_search_tolerance,
            "demand_scale": 1.0,
            "seed": DEFAULT_SEED,
        },
        _load_config_file(config_path)
        | {
            "max_iterations": max_iterations,
            "gap_tolerance": gap_tolerance,
            "demand_scale": demand_scale,
            "seed": seed,
            "net": net_path,
            "trips": trips_path,
        },
    )
    cfg = AssignmentConfig(
        max_iterations=params["max_iterations"],
        gap_tolerance=params["gap_tolerance"],
        line_search_tolerance=params["line_search_tolerance"],
    )
    net, trips = _read_inputs(net_path, trips_path, params["demand_scale"])
    solution = solve_user_equilibrium(net, trips, cfg)

    out = Path(out_dir)
    rows = [
        [link.id, flow, time]
        for link, flow, time in zip(net.links, solution.link_flows, solution.link_times)
    ]
    _write_atomic(out / "links.csv", _csv_text(["link", "flow", "time"], rows, params))
    _write_atomic(
        out / "summary.json",
        _json_text(
            {
                "total_system_travel_time": solution.total_system_travel_time,
                "relative_gap": solution.relative_gap,
                "iterations": solution.iterations,
                "converged": solution.relative_gap <= cfg.gap_tolerance,
            },
            params,
        ),
    )
    if solution.relative_gap > cfg.gap_tolerance:
        click.echo(
            f"not converged: relative gap {solution.relative_gap:.3e} > "
            f"{cfg.gap_tolerance:g} after {solution.iterations} iterations",
            err=True,
        )
        return 3
    return 0


@cli.command("calibrate")
@click.option("--net", "net_path", required=True, type=click.Path(exists=True))
@click.option("--trips", "trips_path", required=True, type=click.Path(exists=True))
@click.option("--config", "config_path", type=click.Path(exists=True))
@click.option("--out-dir", default=".", show_default=True)
@click.option("--mode", type=click.Choice([*MODES, "both"]), default=None)
@click.option("--seed", type=int, default=None)
@click.option("--budget", type=int, default=None)
@click.option("--noise-sigma", type=float, default=None)
@click.option("--demand-scale", type=float, default=None)
def cmd_calibrate(net_path, trips_path, config_path, out_dir, mode, seed,
                  budget, noise_sigma, demand_scale):
    """Calibrate unknown O-D entries; write trace CSV and best-candidate JSON."""
    defaults = {
        field.name: field.default
        for field in dataclasses.fields(CalibrationConfig)
        if field.name != "assignment"
    }
    defaults.update({"mode": "latent", "demand_scale": 1.0})
    params = _resolve(
        defaults,
        _load_config_file(config_path)
        | {
            "mode": mode,
            "seed": seed,
            "iteration_budget": budget,
            "noise_sigma": noise_sigma,
            "demand_scale": demand_scale,
            "net": net_path,
            "trips": trips_path,
        },
    )
    cfg_fields = {f.name for f in dataclasses.fields(CalibrationConfig)}
    cfg = CalibrationConfig(
        **{k: v for k, v in params.items() if k in cfg_fields and k != "assignment"}
    )
    net, trips = _read_inputs(net_path, trips_path, params["demand_scale"])

    modes = list(MODES) if params["mode"] == "both" else [params["mode"]]
    out = Path(out_dir)
    code = 0
    for run_mode in modes:
        state = run_calibration(cfg, net, trips, mode=run_mode)
        tag = run_mode.replace("-", "_")
        run_params = dict(params)
        run_params["mode"] = run_mode
        _write_atomic(
            out / f"calibration_trace_{tag}.csv",
            _csv_text(
                ["iteration", "evaluations", "best_objective"],
                [[it, ev, best] for it, ev, best in state.trace],
                run_params,
            ),
        )
        best_times = None
        for record in state.evaluated:
            if record.objective == state.best_objective:
                best_times = record.arc_times
                break
        _write_atomic(
            out / f"best_theta_{tag}.json",
            _json_text(
                {
                    "best_objective": state.best_objective,
                    "pairs": [list(p) for p in trips.pairs()[: cfg.unknown_pair_count]],
                    "best_theta": [float(v) for v in state.best_theta],
                    "true_theta": [float(v) for v in state.true_theta],
                },
                run_params,
            ),
        )
        comparison = [
            [
                i + 1,
                true,
                calibrated,
                abs(calibrated - true),
                abs(calibrated - true) / true,
            ]
            for i, (true, calibrated) in enumerate(zip(state.true_times, best_times))
        ]
        _write_atomic(
            out / f"link_comparison_{tag}.csv",
            _csv_text(
                ["link", "true_time", "calibrated_time", "abs_diff", "rel_diff"],
                comparison,
                run_params,
            ),
        )
    return code


@cli.command("rl-train")
@click.option("--config", "config_path", type=click.Path(exists=True))
@click.option("--out-dir", default=".", show_default=True)
@click.option("--seed", type=int, default=None)
@click.option("--episodes", type=int, default=None)
def cmd_rl_train(config_path, out_dir, seed, episodes):
    """Train the scheduling agent; write model JSON and per-episode returns."""
    defaults = {f.name: f.default for f in dataclasses.fields(DQNConfig)
                if f.name != "hidden"}
    defaults["hidden"] = list(DQNConfig.hidden)
    params = _resolve(
        defaults,
        _load_config_file(config_path) | {"seed": seed, "episodes": episodes},
    )
    cfg_kwargs = dict(params)
    cfg_kwargs["hidden"] = tuple(cfg_kwargs["hidden"])
    cfg = DQNConfig(**{k: v for k, v in cfg_kwargs.items()
                       if k in {f.name for f in dataclasses.fields(DQNConfig)}})
    qnet, returns = train_dqn(SchedulingEnvConfig(), cfg)

    out = Path(out_dir)
    _write_atomic(out / "model.json", mlp_to_json(qnet))
    _write_atomic(
        out / "returns.csv",
        _csv_text(
            ["episode", "return"],
            [[i + 1, r] for i, r in enumerate(returns)],
            params,
        ),
    )
    return 0


@cli.command("rl-eval")
@click.option("--model", "model_path", required=True, type=click.Path(exists=True))
@click.option("--out-dir", default=".", show_default=True)
@click.option("--seed", type=int, default=None)
@click.option("--profile", "profile_text", default=None,
              help="Comma-separated 24 demands; random from --seed if omitted.")
def cmd_rl_eval(model_path, out_dir, seed, profile_text):
    """Greedy rollout of a trained model; write the adjustment table, the
    per-period travel-time comparison, and an improvement summary."""
    seed = DEFAULT_SEED if seed is None else seed
    env_config = SchedulingEnvConfig()
    if profile_text:
        try:
            profile = [int(v) for v in profile_text.split(",")]
        except ValueError as exc:
            raise ConfigError(f"--profile must be comma-separated integers: {exc}")
    else:
        profile = [int(v) for v in random_profile(np.random.default_rng(seed), env_config)]
    qnet = mlp_from_json(Path(model_path).read_text())
    report = evaluate_policy(qnet, profile, env_config)

    params = {"model": model_path, "seed": seed, "profile": profile}
    out = Path(out_dir)
    _write_atomic(
        out / "adjustments.csv",
        _csv_text(
            ["hour", "original_demand", "arc12_demand", "arc13_demand"],
            [
                [row.hour, row.original_demand, row.arc12_demand, row.arc13_demand]
                for row in report.rows
            ],
            params,
        ),
    )
    _write_atomic(
        out / "period_times.csv",
        _csv_text(
            ["hour", "original_time", "adjusted_time"],
            [[row.hour, row.original_time, row.adjusted_time] for row in report.rows],
            params,
        ),
    )
    _write_atomic(
        out / "improvement.json",
        _json_text(
            {
                "original_total_time": report.original_total_time,
                "adjusted_total_time": report.adjusted_total_time,
                "improvement_total": report.improvement_total,
                "improvement_period_mean": report.improvement_period_mean,
            },
            params,
        ),
    )
    return 0


@cli.command("check")
@click.option("--net", "net_path", required=True, type=click.Path(exists=True))
@click.option("--trips", "trips_path", type=click.Path(exists=True))
def cmd_check(net_path, trips_path):
    """Parse and validate inputs; list violations."""
    net = parse_tntp_network(Path(net_path).read_text())
    violations = validate_network(net)
    trips: ODMatrix | None = None
    if trips_path:
        trips = parse_tntp_trips(Path(trips_path).read_text())
        if trips.zones > net.zones:
            violations.append(
                f"trips declare {trips.zones} zones but network has {net.zones}"
            )
    for violation in violations:
        click.echo(violation)
    if violations:
        return 2
    click.echo(
        f"ok: {net.num_nodes} nodes, {len(net.links)} links, {net.zones} zones"
        + (f", {len(trips)} demand pairs" if trips is not None else "")
    )
    return 0


def main(argv=None) -> int:
    try:
        result = cli.main(args=argv, standalone_mode=False)
        return int(result) if isinstance(result, int) else 0
    except click.ClickException as exc:
        exc.show()
        return 1
    except click.Abort:
        return 1
    except ConfigError as exc:
        click.echo(f"config error: {exc}", err=True)
        return 1
    except DataError as exc:
        click.echo(f"data error: {exc}", err=True)
        return 2
    except NumericError as exc:
        click.echo(f"numeric failure: {exc}", err=True)
        return 3
    except (OSError, ValueError) as exc:
        click.echo(f"data error: {exc}", err=True)
        return 2
    except FlowcalError as exc:
        click.echo(f"error: {exc}", err=True)
        return 2


if __name__ == "__main__":
    sys.exit(main())
