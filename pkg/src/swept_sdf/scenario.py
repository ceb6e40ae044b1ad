"""
Scenario files and obstacle clouds.

A scenario is an INI document::

    [scenario]
    mesh = robot.obj
    cloud = obstacles.xyz
    output_dir = out

    [start]
    position = 0, 0, 1

    [goal]
    position = 4, 0, 1
    velocity = 0, 0, 0

    [planner]
    safety_margin = 0.02

    [solver]
    max_iterations = 100

    [sweep]
    seed_stride = 0.01

Relative paths are resolved against the directory of the scenario file. Keys in
``[planner]``, ``[solver]`` and ``[sweep]`` are fields of
:class:`~swept_sdf.objective.PlannerConfig`, :class:`~swept_sdf.solver.SolveOptions`
and :class:`~swept_sdf.sweep.SweepOptions`; missing keys keep their defaults.
"""
from __future__ import annotations

import configparser
import logging
from dataclasses import dataclass, field, fields, replace
from pathlib import Path
from typing import Optional, Union

import numpy as np
import pandas as pd

from swept_sdf.exceptions import InputError
from swept_sdf.geometry import TriangleMesh, load_mesh
from swept_sdf.objective import PlannerConfig
from swept_sdf.solver import SolveOptions
from swept_sdf.sweep import SweepOptions
from swept_sdf.trajectory import BoundaryState

_logger = logging.getLogger(__name__)
_logger.addHandler(logging.NullHandler())

PathLike = Union[str, Path]

_BOOLEANS = configparser.ConfigParser.BOOLEAN_STATES


def read_cloud(path: PathLike) -> np.ndarray:
    """Read whitespace separated ``x y z`` rows; ``#`` starts a comment.

    Returns:
        np.ndarray: ``(n, 3)`` points, ``(0, 3)`` for an empty file.

    Raises:
        InputError: unreadable file, wrong column count or non-numeric values.
    """
    try:
        frame = pd.read_csv(
            path, sep=r"\s+", comment="#", header=None, dtype=np.float64, float_precision="round_trip"
        )
    except pd.errors.EmptyDataError:
        return np.zeros((0, 3))
    except (OSError, ValueError) as exc:
        raise InputError(f"cannot read point cloud {path}: {exc}") from exc
    if frame.shape[1] != 3:
        raise InputError(f"{path}: expected 3 columns per point, found {frame.shape[1]}")
    points = frame.to_numpy(dtype=np.float64)
    if not np.all(np.isfinite(points)):
        raise InputError(f"{path}: point cloud contains missing or non-finite values")
    return points


def write_cloud(points, path: PathLike) -> None:
    frame = pd.DataFrame(np.asarray(points, dtype=np.float64).reshape(-1, 3))
    frame.to_csv(path, sep=" ", header=False, index=False, float_format="%.17g")


def _triple(text: str, key: str) -> np.ndarray:
    try:
        values = [float(v) for v in text.split(",")]
    except ValueError as exc:
        raise InputError(f"{key}: expected three comma-separated numbers, got {text!r}") from exc
    if len(values) != 3:
        raise InputError(f"{key}: expected three comma-separated numbers, got {text!r}")
    return np.array(values)


def _state(parser: configparser.ConfigParser, name: str) -> BoundaryState:
    if not parser.has_section(name):
        raise InputError(f"scenario is missing the [{name}] section")
    section = parser[name]
    if "position" not in section:
        raise InputError(f"[{name}] needs a position")
    unknown = set(section) - {"position", "velocity", "acceleration"} - set(parser.defaults())
    if unknown:
        raise InputError(f"unknown keys in [{name}]: {', '.join(sorted(unknown))}")
    return BoundaryState(
        _triple(section["position"], f"{name}.position"),
        _triple(section.get("velocity", "0, 0, 0"), f"{name}.velocity"),
        _triple(section.get("acceleration", "0, 0, 0"), f"{name}.acceleration"),
    )


def _parse_value(raw: str, default, key: str):
    text = raw.strip()
    try:
        if isinstance(default, bool):
            return _BOOLEANS[text.lower()]
        if isinstance(default, int):
            return int(text)
        if text.lower() in ("", "none"):
            return None
        return float(text)
    except (KeyError, ValueError) as exc:
        raise InputError(f"{key}: cannot parse {raw!r}") from exc


def options_from_section(cls, parser: configparser.ConfigParser, name: str):
    """Build a frozen options dataclass from one INI section."""
    if not parser.has_section(name):
        return cls()
    known = {f.name: f for f in fields(cls)}
    kwargs = {}
    for key, raw in parser.items(name):
        if key in parser.defaults():
            continue
        if key not in known:
            raise InputError(f"unknown key {key!r} in [{name}]")
        kwargs[key] = _parse_value(raw, known[key].default, f"{name}.{key}")
    return cls(**kwargs)


@dataclass
class Scenario:
    """Everything needed to plan one trajectory."""

    mesh_path: Path
    cloud_path: Optional[Path]
    start: BoundaryState
    goal: BoundaryState
    planner: PlannerConfig = field(default_factory=PlannerConfig)
    solver: SolveOptions = field(default_factory=SolveOptions)
    sweep: SweepOptions = field(default_factory=SweepOptions)
    output_dir: Optional[Path] = None
    path: Optional[Path] = None

    def load_mesh(self) -> TriangleMesh:
        return load_mesh(self.mesh_path)

    def load_cloud(self) -> np.ndarray:
        if self.cloud_path is None:
            return np.zeros((0, 3))
        return read_cloud(self.cloud_path)


def load_scenario(path: PathLike) -> Scenario:
    """Parse a scenario file.

    Raises:
        InputError: missing file, section or key, unparsable value, or option values
            violating their invariants.
    """
    path = Path(path)
    parser = configparser.ConfigParser()
    try:
        with open(path) as handle:
            parser.read_file(handle)
    except (OSError, configparser.Error) as exc:
        raise InputError(f"cannot read scenario {path}: {exc}") from exc
    base = path.resolve().parent

    def resolve(value: Optional[str]) -> Optional[Path]:
        if not value:
            return None
        candidate = Path(value).expanduser()
        return candidate if candidate.is_absolute() else base / candidate

    if not parser.has_section("scenario") or not parser["scenario"].get("mesh"):
        raise InputError(f"{path}: [scenario] needs a mesh")
    section = parser["scenario"]
    planner = options_from_section(PlannerConfig, parser, "planner")
    sweep = options_from_section(SweepOptions, parser, "sweep")
    if not parser.has_option("sweep", "v_max"):
        sweep = replace(sweep, v_max=planner.v_max)
    scenario = Scenario(
        mesh_path=resolve(section.get("mesh")),
        cloud_path=resolve(section.get("cloud")),
        start=_state(parser, "start"),
        goal=_state(parser, "goal"),
        planner=planner,
        solver=options_from_section(SolveOptions, parser, "solver"),
        sweep=sweep,
        output_dir=resolve(section.get("output_dir")),
        path=path,
    )
    _logger.debug("Loaded scenario %s", path)
    return scenario
