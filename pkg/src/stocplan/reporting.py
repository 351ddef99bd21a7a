"""Result emission: per-episode records, summary tables, and plot-ready series.

Outputs are plain comma-separated text with header rows, dot decimals, and
shortest round-trip float formatting, so identical results serialize to
identical bytes.  Wall-clock planning times are kept in separate ``timing_*``
files: every other artifact is a pure function of (config, code), and the
determinism contract (byte-identical re-runs, exact replay) applies to those
timing-free files.

A run directory is versioned by the hash of its materialized config:
``<output>/<scenario>-<hash>/``.  Re-running the same config regenerates the
same deterministic bytes in place; a changed config lands in a fresh directory.
"""

from __future__ import annotations

import csv
from pathlib import Path

import numpy as np

from .config import ExperimentConfig, render_config
from .simulation import MonteCarloSummary, SweepResult


def _fmt(value) -> str:
    if isinstance(value, (bool, np.bool_)):
        return "1" if value else "0"
    if isinstance(value, (int, np.integer)):
        return str(int(value))
    if value is None:
        return ""
    return repr(float(value))


def run_directory(config: ExperimentConfig) -> Path:
    return Path(config.output_dir) / f"{config.scenario.name}-{config.config_hash()}"


def write_run(config: ExperimentConfig, result: SweepResult) -> Path:
    """Write all artifacts of one run; returns the versioned run directory."""
    out = run_directory(config)
    (out / "steps").mkdir(parents=True, exist_ok=True)
    (out / "config.toml").write_text(render_config(config.raw))
    write_result_table(out / "results.csv", result)
    write_episode_table(out / "episodes.csv", result)
    write_timing_tables(out, result)
    for summary in result.summaries:
        write_step_records(out / "steps", summary)
    (out / "sweep_axis.txt").write_text(result.axis + "\n")
    return out


def write_result_table(path: Path, result: SweepResult) -> None:
    """Deterministic per-(controller, grid point) statistics."""
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow([
            "controller", "grid_value", "epsilon", "n_episodes",
            "mean_cost_ratio", "var_cost_ratio", "mean_cost", "nominal_cost",
            "mean_replans", "mean_plan_calls", "nonconvergence_rate",
            "failure_rate", "mean_min_pair_distance",
        ])
        for s in result.summaries:
            writer.writerow([
                s.controller_label, _fmt(s.grid_value), _fmt(s.epsilon),
                s.n_episodes, _fmt(s.mean_cost_ratio), _fmt(s.var_cost_ratio),
                _fmt(s.mean_cost), _fmt(s.nominal_cost), _fmt(s.mean_replans),
                _fmt(s.mean_plan_calls), _fmt(s.nonconvergence_rate),
                _fmt(s.failure_rate), _fmt(s.mean_min_pair_distance),
            ])


def write_episode_table(path: Path, result: SweepResult) -> None:
    """Deterministic per-episode aggregates."""
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow([
            "controller", "grid_value", "episode", "seed", "total_cost",
            "cost_ratio", "n_replans", "plan_calls", "nonconverged_calls",
            "min_pair_distance", "failed", "failure_step",
        ])
        for s in result.summaries:
            for i, r in enumerate(s.records):
                writer.writerow([
                    s.controller_label, _fmt(s.grid_value), i, r.seed,
                    _fmt(r.total_cost), _fmt(r.cost_ratio), r.n_replans,
                    r.plan_calls, r.nonconverged_calls,
                    _fmt(r.min_pair_distance), _fmt(r.failed),
                    "" if r.failure_step is None else r.failure_step,
                ])


def _slug(label: str, grid_value: float) -> str:
    return f"{label}__{grid_value:g}".replace(".", "p").replace("-", "m")


def write_step_records(steps_dir: Path, summary: MonteCarloSummary) -> None:
    """One deterministic file per (controller, grid point): step-level records.

    Rows carry the state at t, the applied control, the noise draw, the stage
    cost, and the replanned flag; a final row per episode holds the terminal
    state.  Together with the timing files these are the complete per-step
    records of the run.
    """
    first = summary.records[0]
    n_x = first.states.shape[1]
    n_u = first.controls.shape[1]
    path = steps_dir / f"{_slug(summary.controller_label, summary.grid_value)}.csv"
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(
            ["episode", "seed", "t"]
            + [f"x{i}" for i in range(n_x)]
            + [f"u{i}" for i in range(n_u)]
            + [f"w{i}" for i in range(n_u)]
            + ["stage_cost", "replanned"]
        )
        for e, r in enumerate(summary.records):
            t_logged = r.controls.shape[0] if not r.failed else (r.failure_step or 0)
            replanned = {0: 1} if r.plan_calls else {}
            for t in r.replan_steps:
                replanned[t] = 1
            for t in range(t_logged):
                writer.writerow(
                    [e, r.seed, t]
                    + [_fmt(v) for v in r.states[t]]
                    + [_fmt(v) for v in r.controls[t]]
                    + [_fmt(v) for v in r.noise[t]]
                    + [_fmt(r.stage_costs[t]), replanned.get(t, 0)]
                )
            if not r.failed:
                writer.writerow(
                    [e, r.seed, t_logged]
                    + [_fmt(v) for v in r.states[t_logged]]
                    + [""] * (2 * n_u) + ["", 0]
                )


def write_timing_tables(out: Path, result: SweepResult) -> None:
    """Wall-clock planning times (excluded from the determinism contract)."""
    with open(out / "timing.csv", "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["controller", "grid_value", "mean_planning_time",
                         "total_planning_time"])
        for s in result.summaries:
            writer.writerow([s.controller_label, _fmt(s.grid_value),
                             _fmt(s.mean_planning_time), _fmt(s.total_planning_time)])
    with open(out / "timing_steps.csv", "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["controller", "grid_value", "episode", "t", "plan_time"])
        for s in result.summaries:
            for e, r in enumerate(s.records):
                for t, pt in enumerate(r.planning_times):
                    writer.writerow([s.controller_label, _fmt(s.grid_value),
                                     e, t, _fmt(pt)])


# ---------------------------------------------------------------------------
# report generation from a finished run directory
# ---------------------------------------------------------------------------


def _read_csv(path: Path) -> list[dict]:
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


def write_report(run_dir: str | Path) -> Path:
    """Emit plot-ready series files for the figure families of one run.

    The cost and replan series come from the deterministic results table; the
    per-step planning-time series comes from the timing files.
    """
    run_dir = Path(run_dir)
    results_path = run_dir / "results.csv"
    if not results_path.exists():
        raise FileNotFoundError(f"no results.csv under {run_dir}")
    axis_path = run_dir / "sweep_axis.txt"
    axis = axis_path.read_text().strip() if axis_path.exists() else "epsilon"
    rows = _read_csv(results_path)

    report = run_dir / "report"
    report.mkdir(exist_ok=True)

    if axis == "epsilon":
        with open(report / "cost_vs_epsilon.csv", "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["controller", "epsilon", "mean_cost_ratio",
                             "var_cost_ratio", "n_episodes"])
            for r in rows:
                writer.writerow([r["controller"], r["grid_value"],
                                 r["mean_cost_ratio"], r["var_cost_ratio"],
                                 r["n_episodes"]])
        with open(report / "replans_vs_epsilon.csv", "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["controller", "epsilon", "mean_replans",
                             "mean_plan_calls"])
            for r in rows:
                writer.writerow([r["controller"], r["grid_value"],
                                 r["mean_replans"], r["mean_plan_calls"]])
    else:
        name = "cost_time_vs_threshold.csv" if axis == "threshold" else "cost_time_vs_horizon.csv"
        key = "j_thresh" if axis == "threshold" else "control_horizon"
        timing = {(r["controller"], r["grid_value"]): r
                  for r in _read_csv(run_dir / "timing.csv")}
        with open(report / name, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["controller", key, "mean_cost_ratio",
                             "mean_replans", "total_planning_time"])
            for r in rows:
                t = timing.get((r["controller"], r["grid_value"]), {})
                writer.writerow([r["controller"], r["grid_value"],
                                 r["mean_cost_ratio"], r["mean_replans"],
                                 t.get("total_planning_time", "")])

    steps_path = run_dir / "timing_steps.csv"
    if steps_path.exists():
        acc: dict[tuple[str, str, int], list[float]] = {}
        for r in _read_csv(steps_path):
            key = (r["controller"], r["grid_value"], int(r["t"]))
            acc.setdefault(key, []).append(float(r["plan_time"]))
        with open(report / "time_vs_step.csv", "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["controller", "grid_value", "t", "mean_plan_time"])
            for (ctl, gv, t) in sorted(acc, key=lambda k: (k[0], k[1], k[2])):
                writer.writerow([ctl, gv, t, _fmt(float(np.mean(acc[(ctl, gv, t)])))])
    return report
