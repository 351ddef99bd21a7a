"""Experiment configuration: TOML loading, validation, defaulting, and echo.

A config file fully describes one experiment run: the scenario (or a named
preset), the controllers to benchmark, one sweep axis with its grid, the Monte
Carlo block, solver settings, and the output directory.  Loading materializes
every default so the echoed config is self-describing; re-serializing and
re-loading a materialized config reproduces it exactly.
"""

from __future__ import annotations

import hashlib
import sys
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

from .controllers import ControllerConfig, ControllerKind
from .costs import CollisionPenaltyParams
from .dynamics import AgentSystem, CarParams, ControlLimits
from .scenario import Scenario, single_agent_scenario, three_agent_scenario
from .simulation import SWEEP_AXES
from .trajopt import DEFAULT_PHI_MAX, SolverSettings


class ConfigError(ValueError):
    """Invalid experiment configuration; the message names the offending field."""


@dataclass(frozen=True)
class ExperimentConfig:
    """Validated, fully-materialized experiment description."""

    scenario: Scenario
    controllers: tuple[ControllerConfig, ...]
    sweep_axis: str
    sweep_grid: tuple[float, ...]
    base_epsilon: float
    episodes: int
    seed_base: int
    workers: int
    output_dir: str
    raw: dict = field(repr=False)

    def config_hash(self) -> str:
        """Stable short hash of the materialized config (output versioning)."""
        return hashlib.sha256(render_config(self.raw).encode()).hexdigest()[:12]


def _expect(table: dict, key: str, kind, where: str, default=None, required=False):
    if key not in table:
        if required:
            raise ConfigError(f"{where}.{key} is required")
        return default
    value = table[key]
    if kind is float and isinstance(value, int) and not isinstance(value, bool):
        value = float(value)
    if not isinstance(value, kind):
        raise ConfigError(f"{where}.{key} must be {kind.__name__}, got {type(value).__name__}")
    return value


def _vector(table: dict, key: str, length: int, where: str, default=None):
    if key not in table:
        return None if default is None else list(default)
    value = table[key]
    if (not isinstance(value, list) or len(value) != length
            or not all(isinstance(v, (int, float)) and not isinstance(v, bool) for v in value)):
        raise ConfigError(f"{where}.{key} must be a list of {length} numbers")
    return [float(v) for v in value]


def _build_scenario(table: dict, solver: SolverSettings) -> Scenario:
    preset = _expect(table, "preset", str, "scenario")
    horizon = _expect(table, "horizon", int, "scenario", default=35)
    if horizon < 1:
        raise ConfigError("scenario.horizon must be >= 1")
    if preset is not None:
        if preset == "single_agent":
            scenario = single_agent_scenario(horizon=horizon, solver=solver)
        elif preset == "three_agent":
            scenario = three_agent_scenario(horizon=horizon, solver=solver)
        else:
            raise ConfigError(
                f"scenario.preset must be 'single_agent' or 'three_agent', got {preset!r}")
        return scenario

    agents = _expect(table, "agents", int, "scenario", default=1)
    if agents < 1:
        raise ConfigError("scenario.agents must be >= 1")
    car_tbl = table.get("car", {})
    car = CarParams(
        wheelbase=_expect(car_tbl, "wheelbase", float, "scenario.car", default=0.5),
        dt=_expect(car_tbl, "dt", float, "scenario.car", default=0.1),
    )
    lim_tbl = table.get("limits", {})
    limits = ControlLimits(
        u_min=np.array(_vector(lim_tbl, "u_min", 2, "scenario.limits", [-2.0, -2.0])),
        u_max=np.array(_vector(lim_tbl, "u_max", 2, "scenario.limits", [2.0, 2.0])),
        du_max=np.array(_vector(lim_tbl, "du_max", 2, "scenario.limits", [1.0, 1.0])),
    )
    x0 = _vector(table, "x0", 4 * agents, "scenario")
    goal = _vector(table, "goal", 4 * agents, "scenario")
    if x0 is None or goal is None:
        raise ConfigError("scenario.x0 and scenario.goal are required without a preset")
    w_tbl = table.get("weights", {})
    w_x = np.diag(_vector(w_tbl, "w_x", 4, "scenario.weights", [5.0, 5.0, 1.0, 0.1]))
    w_u = np.diag(_vector(w_tbl, "w_u", 2, "scenario.weights", [1.0, 1.0]))
    w_xf_diag = _vector(w_tbl, "w_xf", 4, "scenario.weights")
    if w_xf_diag is not None:
        w_xf = np.diag(w_xf_diag)
    else:
        w_xf = _expect(w_tbl, "w_xf_scale", float, "scenario.weights", default=100.0) * w_x
    collision = None
    if agents >= 2:
        c_tbl = table.get("collision", {})
        collision = CollisionPenaltyParams(
            scale=_expect(c_tbl, "scale", float, "scenario.collision", default=100.0),
            r_thresh=_expect(c_tbl, "r_thresh", float, "scenario.collision", default=0.5),
        )
    phi_max = _expect(table, "phi_max", float, "scenario", default=DEFAULT_PHI_MAX)
    if phi_max <= 0.0:
        raise ConfigError("scenario.phi_max must be positive")
    return Scenario(
        system=AgentSystem.identical(agents, car, limits),
        x0=np.array(x0), goal=np.array(goal), horizon=horizon,
        w_x=w_x, w_u=w_u, w_xf=w_xf, collision=collision,
        solver=solver, phi_max=phi_max, name="custom",
    )


def _build_controller(table: dict, index: int) -> ControllerConfig:
    where = f"controller[{index}]"
    kind_name = _expect(table, "kind", str, where, required=True)
    try:
        kind = ControllerKind(kind_name)
    except ValueError:
        valid = ", ".join(k.value for k in ControllerKind)
        raise ConfigError(f"{where}.kind must be one of {valid}, got {kind_name!r}") from None
    h_c = _expect(table, "control_horizon", int, where)
    j_thresh = _expect(table, "j_thresh", float, where)
    if j_thresh is not None and j_thresh < 0.0:
        raise ConfigError(f"{where}.j_thresh must be >= 0")
    try:
        return ControllerConfig(kind=kind, control_horizon=h_c, j_thresh=j_thresh)
    except ValueError as exc:
        raise ConfigError(f"{where}: {exc}") from None


def _build_solver(table: dict) -> SolverSettings:
    defaults = SolverSettings()
    max_iters = _expect(table, "max_iters", int, "solver", default=defaults.max_iters)
    tol = _expect(table, "tol_stationarity", float, "solver",
                  default=defaults.tol_stationarity)
    if max_iters < 1:
        raise ConfigError("solver.max_iters must be >= 1")
    if tol <= 0.0:
        raise ConfigError("solver.tol_stationarity must be positive")
    return SolverSettings(max_iters=max_iters, tol_stationarity=tol)


def parse_config(data: dict) -> ExperimentConfig:
    """Validate a parsed TOML table and materialize every default."""
    solver = _build_solver(data.get("solver", {}))
    if "scenario" not in data:
        raise ConfigError("scenario table is required")
    scenario = _build_scenario(data["scenario"], solver)

    raw_controllers = data.get("controller", [])
    if not isinstance(raw_controllers, list) or not raw_controllers:
        raise ConfigError("at least one [[controller]] block is required")
    controllers = tuple(_build_controller(tbl, i) for i, tbl in enumerate(raw_controllers))
    labels = [c.label for c in controllers]
    if len(set(labels)) != len(labels):
        raise ConfigError("controller blocks must be distinct (duplicate label)")

    sweep_tbl = data.get("sweep", {})
    axis = _expect(sweep_tbl, "axis", str, "sweep", default="epsilon")
    if axis not in SWEEP_AXES:
        raise ConfigError(f"sweep.axis must be one of {SWEEP_AXES}, got {axis!r}")
    grid = sweep_tbl.get("grid", [0.0, 0.1, 0.2])
    if (not isinstance(grid, list) or not grid
            or not all(isinstance(v, (int, float)) and not isinstance(v, bool) for v in grid)):
        raise ConfigError("sweep.grid must be a nonempty list of numbers")
    grid = [float(v) for v in grid]
    if axis == "epsilon" and any(v < 0 for v in grid):
        raise ConfigError("sweep.grid epsilon values must be >= 0")
    if axis == "threshold" and any(v < 0 for v in grid):
        raise ConfigError("sweep.grid threshold values must be >= 0")
    if axis == "horizon" and any(v < 1 or v != int(v) for v in grid):
        raise ConfigError("sweep.grid horizon values must be positive integers")
    base_epsilon = _expect(sweep_tbl, "base_epsilon", float, "sweep", default=0.1)
    if base_epsilon < 0.0:
        raise ConfigError("sweep.base_epsilon must be >= 0")

    mc_tbl = data.get("monte_carlo", {})
    episodes = _expect(mc_tbl, "episodes", int, "monte_carlo", default=100)
    if episodes < 1:
        raise ConfigError("monte_carlo.episodes must be >= 1")
    seed_base = _expect(mc_tbl, "seed_base", int, "monte_carlo", default=1000)
    if seed_base < 0:
        raise ConfigError("monte_carlo.seed_base must be >= 0")
    workers = _expect(mc_tbl, "workers", int, "monte_carlo", default=1)
    if workers < 1:
        raise ConfigError("monte_carlo.workers must be >= 1")

    out_tbl = data.get("output", {})
    output_dir = _expect(out_tbl, "directory", str, "output", default="runs")

    materialized = _materialize(data, scenario, controllers, axis, grid,
                                base_epsilon, episodes, seed_base, workers,
                                output_dir, solver)
    return ExperimentConfig(
        scenario=scenario, controllers=controllers, sweep_axis=axis,
        sweep_grid=tuple(grid), base_epsilon=base_epsilon, episodes=episodes,
        seed_base=seed_base, workers=workers, output_dir=output_dir,
        raw=materialized,
    )


def load_config(path: str | Path) -> ExperimentConfig:
    """Parse and validate a TOML experiment file."""
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"config file not found: {path}")
    try:
        with open(path, "rb") as fh:
            data = tomllib.load(fh)
    except tomllib.TOMLDecodeError as exc:
        raise ConfigError(f"{path}: {exc}") from None
    return parse_config(data)


def _materialize(data, scenario, controllers, axis, grid, base_epsilon,
                 episodes, seed_base, workers, output_dir, solver) -> dict:
    """Every value that affects results, defaults included, in plain types."""
    sc_tbl: dict = {"horizon": scenario.horizon, "agents": scenario.system.n_agents}
    preset = data.get("scenario", {}).get("preset")
    if preset:
        sc_tbl["preset"] = preset
    sc_tbl["x0"] = [float(v) for v in scenario.x0]
    sc_tbl["goal"] = [float(v) for v in scenario.goal]
    sc_tbl["phi_max"] = float(scenario.phi_max)
    sc_tbl["car"] = {"wheelbase": float(scenario.system.cars[0].wheelbase),
                     "dt": float(scenario.system.dt)}
    lim = scenario.system.limits
    sc_tbl["limits"] = {"u_min": [float(v) for v in lim.u_min],
                        "u_max": [float(v) for v in lim.u_max],
                        "du_max": [float(v) for v in lim.du_max]}
    sc_tbl["weights"] = {"w_x": [float(v) for v in np.diag(scenario.w_x)],
                         "w_u": [float(v) for v in np.diag(scenario.w_u)],
                         "w_xf": [float(v) for v in np.diag(scenario.w_xf)]}
    if scenario.collision is not None:
        sc_tbl["collision"] = {"scale": float(scenario.collision.scale),
                               "r_thresh": float(scenario.collision.r_thresh)}
    ctl_tbls = []
    for c in controllers:
        tbl: dict = {"kind": c.kind.value}
        if c.control_horizon is not None:
            tbl["control_horizon"] = c.control_horizon
        if c.j_thresh is not None:
            tbl["j_thresh"] = c.j_thresh
        ctl_tbls.append(tbl)
    return {
        "scenario": sc_tbl,
        "controller": ctl_tbls,
        "sweep": {"axis": axis, "grid": [float(v) for v in grid],
                  "base_epsilon": float(base_epsilon)},
        "monte_carlo": {"episodes": episodes, "seed_base": seed_base,
                        "workers": workers},
        "solver": {"max_iters": solver.max_iters,
                   "tol_stationarity": solver.tol_stationarity},
        "output": {"directory": output_dir},
    }


def _render_value(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, (int,)):
        return str(value)
    if isinstance(value, float):
        return repr(value)
    if isinstance(value, str):
        return '"' + value.replace("\\", "\\\\").replace('"', '\\"') + '"'
    if isinstance(value, list):
        return "[" + ", ".join(_render_value(v) for v in value) + "]"
    raise TypeError(f"cannot render {type(value)} as TOML")


def render_config(tree: dict) -> str:
    """Deterministic TOML text of a materialized config tree."""
    lines: list[str] = []

    def emit_table(table: dict, prefix: str) -> None:
        scalars = {k: v for k, v in table.items() if not isinstance(v, (dict, list))
                   or (isinstance(v, list) and (not v or not isinstance(v[0], dict)))}
        for key, val in scalars.items():
            lines.append(f"{key} = {_render_value(val)}")
        for key, val in table.items():
            if isinstance(val, dict):
                lines.append("")
                lines.append(f"[{prefix}{key}]")
                emit_table(val, f"{prefix}{key}.")
            elif isinstance(val, list) and val and isinstance(val[0], dict):
                for item in val:
                    lines.append("")
                    lines.append(f"[[{prefix}{key}]]")
                    emit_table(item, f"{prefix}{key}.")

    emit_table(tree, "")
    return "\n".join(lines).lstrip("\n") + "\n"
