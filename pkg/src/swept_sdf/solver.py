"""
Trajectory optimization: a limited-memory quasi-Newton minimizer and the planner
driving it.

The decision vector stacks the interior waypoints with ``tau = log(T)`` so every
iterate decodes to strictly positive durations. Steps are chosen by a weak-Wolfe
bisection/doubling line search, which only asks for sufficient decrease plus a
sign change in the directional derivative and therefore copes with the kinks of
the hinge penalties and of the swept SDF itself.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field, replace
from enum import IntEnum
from math import ceil
from typing import Callable, List, NamedTuple, Optional, Tuple

import numpy as np

from swept_sdf import flatness
from swept_sdf.exceptions import CollisionError, FlatnessSingularityError, InputError, SolverError, TrajectoryError
from swept_sdf.geometry import MeshDistanceIndex, TriangleMesh
from swept_sdf.logging_config import log_iteration
from swept_sdf.objective import CostReport, PlannerConfig, total_cost
from swept_sdf.sweep import (
    ClearanceReport,
    MotionOracle,
    SweepOptions,
    SweptSdfEngine,
    dense_clearance,
    select_obstacles,
)
from swept_sdf.trajectory import BoundaryState, Trajectory, minco_construct

_logger = logging.getLogger(__name__)
_logger.addHandler(logging.NullHandler())

# curvature pairs with s.y below this fraction of s.s are skipped
_CAUTIOUS = 1e-12
# cloud points farther than this from the body along the whole motion are not certified
_CHECK_CUTOFF = 1.0


class Status(IntEnum):
    GRADIENT = 0
    RELATIVE_DECREASE = 1
    MAX_ITERATIONS = 2
    LINE_SEARCH_FAILED = 3


STATUS_MESSAGES = {
    Status.GRADIENT: "gradient norm below tolerance",
    Status.RELATIVE_DECREASE: "relative cost decrease below tolerance",
    Status.MAX_ITERATIONS: "iteration limit reached",
    Status.LINE_SEARCH_FAILED: "line search failed to find an acceptable step",
}


@dataclass(frozen=True)
class SolveOptions:
    """Tunables of :func:`minimize`.

    Attributes:
        memory: stored curvature pairs.
        max_iterations: accepted steps.
        grad_tol: stop when the gradient norm falls below this.
        rel_tol: stop when the cost decreased by less than ``rel_tol * max(1, |f|)``
            over the last ``rel_window`` iterations.
        c1, c2: sufficient-decrease and curvature constants, ``0 < c1 < c2 < 1``.
        max_line_search: trial steps per line search.
        failure_tol: a run ending without meeting a tolerance is flagged failed when
            its gradient norm exceeds ``failure_tol * max(1, |f|)``.
    """

    memory: int = 16
    max_iterations: int = 200
    grad_tol: float = 1e-6
    rel_tol: float = 1e-10
    rel_window: int = 3
    c1: float = 1e-4
    c2: float = 0.9
    max_line_search: int = 64
    failure_tol: float = 1e-3

    def __post_init__(self):
        if self.memory < 1:
            raise InputError("memory must be at least 1")
        if self.max_iterations < 0 or self.max_line_search < 1 or self.rel_window < 1:
            raise InputError("iteration limits must be positive")
        if not (self.grad_tol > 0 and self.rel_tol > 0 and self.failure_tol > 0):
            raise InputError("tolerances must be positive")
        if not 0 < self.c1 < self.c2 < 1:
            raise InputError(f"line search constants need 0 < c1 < c2 < 1, got {self.c1}, {self.c2}")


@dataclass(frozen=True)
class SolveReport:
    x: np.ndarray
    iterations: int
    evaluations: int
    cost: float
    grad_norm: float
    status: Status
    failed: bool

    @property
    def message(self) -> str:
        return STATUS_MESSAGES[self.status]

    def to_dict(self) -> dict:
        return {
            "iterations": self.iterations,
            "evaluations": self.evaluations,
            "cost": self.cost,
            "grad_norm": self.grad_norm,
            "status": self.status.name.lower(),
            "message": self.message,
            "failed": self.failed,
        }


class IterationRecord(NamedTuple):
    iteration: int
    x: np.ndarray
    cost: float
    grad_norm: float
    step: float
    evaluations: int


class LineSearchResult(NamedTuple):
    step: float
    x: np.ndarray
    f: float
    g: np.ndarray
    evaluations: int
    success: bool


# ---- Decision vector ----


def pack(q, T) -> np.ndarray:
    """Stack waypoints ``(M - 1, 3)`` and ``log(T)``."""
    T = np.asarray(T, dtype=np.float64).reshape(-1)
    if not np.all(np.isfinite(T)) or np.any(T <= 0):
        raise InputError(f"durations must be positive, got {T.tolist()}")
    return np.concatenate([np.asarray(q, dtype=np.float64).reshape(-1), np.log(T)])


def unpack(x, pieces: int) -> Tuple[np.ndarray, np.ndarray]:
    x = np.asarray(x, dtype=np.float64).reshape(-1)
    if len(x) != 4 * pieces - 3:
        raise InputError(f"decision vector of length {len(x)} does not fit {pieces} pieces")
    return x[:-pieces].reshape(pieces - 1, 3).copy(), np.exp(x[-pieces:])


def pack_gradient(grad_q, grad_T, T) -> np.ndarray:
    """Gradient on the decision vector; ``dJ/dtau = T dJ/dT``."""
    return np.concatenate(
        [np.asarray(grad_q, dtype=np.float64).reshape(-1), np.asarray(T) * np.asarray(grad_T, dtype=np.float64)]
    )


# ---- Minimizer ----


def weak_wolfe_search(
    fun: Callable, x: np.ndarray, f: float, g: np.ndarray, d: np.ndarray, step: float, options: SolveOptions
) -> LineSearchResult:
    """Bisection/doubling search for a step with sufficient decrease and a
    directional derivative that rose above ``c2`` times its initial value.

    A non-finite trial cost counts as a failed decrease. On failure the last step
    known to decrease the cost is returned, or the start point if there is none.
    """
    slope = float(g @ d)
    lo, hi = 0.0, np.inf
    best = LineSearchResult(0.0, x, f, g, 0, False)
    for k in range(options.max_line_search):
        trial = x + step * d
        ft, gt = fun(trial)
        if not np.isfinite(ft) or ft > f + options.c1 * step * slope:
            hi = step
        elif not np.all(np.isfinite(gt)):
            hi = step
        elif gt @ d < options.c2 * slope:
            lo = step
            best = LineSearchResult(step, trial, float(ft), gt, 0, False)
        else:
            return LineSearchResult(step, trial, float(ft), gt, k + 1, True)
        step = 0.5 * (lo + hi) if np.isfinite(hi) else 2.0 * lo
        if hi - lo <= np.finfo(float).eps * max(1.0, lo):
            break
    return best._replace(evaluations=k + 1)


def _two_loop(g: np.ndarray, pairs: List[Tuple[np.ndarray, np.ndarray, float]]) -> np.ndarray:
    q = g.copy()
    alphas = []
    for s, y, rho in reversed(pairs):
        alpha = rho * (s @ q)
        q -= alpha * y
        alphas.append(alpha)
    if pairs:
        s, y, _ = pairs[-1]
        q *= (s @ y) / (y @ y)
    for (s, y, rho), alpha in zip(pairs, reversed(alphas)):
        q += (alpha - rho * (y @ q)) * s
    return -q


def minimize(
    fun: Callable[[np.ndarray], Tuple[float, np.ndarray]],
    x0,
    options: Optional[SolveOptions] = None,
    callback: Optional[Callable[[IterationRecord], None]] = None,
) -> SolveReport:
    """Limited-memory BFGS with a weak-Wolfe line search.

    Args:
        fun: returns ``(cost, gradient)``; may return a non-finite cost for points
            outside its domain.
        x0: starting point.
        options: solver tunables.
        callback: called once per accepted step.

    Returns:
        SolveReport: the best point found with termination details.

    Raises:
        SolverError: the cost or gradient is not finite at ``x0``.
    """
    options = options or SolveOptions()
    x = np.array(x0, dtype=np.float64).reshape(-1)
    f, g = fun(x)
    g = np.asarray(g, dtype=np.float64)
    evaluations = 1
    if not (np.isfinite(f) and np.all(np.isfinite(g))):
        raise SolverError(f"objective is not finite at the starting point (cost {f!r})")

    pairs: List[Tuple[np.ndarray, np.ndarray, float]] = []
    recent = [float(f)]
    status = Status.MAX_ITERATIONS
    iteration = 0
    while True:
        grad_norm = float(np.linalg.norm(g))
        if grad_norm <= options.grad_tol:
            status = Status.GRADIENT
            break
        if iteration >= options.max_iterations:
            status = Status.MAX_ITERATIONS
            break
        d = _two_loop(g, pairs)
        if not g @ d < 0:
            _logger.debug("Quasi-Newton direction is not a descent direction; memory reset")
            pairs.clear()
            d = -g
        step = 1.0 / float(np.linalg.norm(d)) if iteration == 0 else 1.0
        search = weak_wolfe_search(fun, x, f, g, d, step, options)
        evaluations += search.evaluations
        if search.step == 0.0:
            _logger.warning("Line search failed at iteration %d (cost %.6g)", iteration, f)
            status = Status.LINE_SEARCH_FAILED
            break
        s = search.x - x
        y = search.g - g
        if s @ y > _CAUTIOUS * (s @ s):
            pairs.append((s, y, 1.0 / (s @ y)))
            if len(pairs) > options.memory:
                pairs.pop(0)
        x, f, g = search.x, search.f, search.g
        iteration += 1
        recent.append(f)
        if callback is not None:
            callback(IterationRecord(iteration, x, f, float(np.linalg.norm(g)), search.step, evaluations))
        if not search.success:
            _logger.warning("Line search stopped short at iteration %d; keeping the last decrease", iteration)
            status = Status.LINE_SEARCH_FAILED
            break
        if len(recent) > options.rel_window:
            if recent[-1 - options.rel_window] - f <= options.rel_tol * max(1.0, abs(f)):
                status = Status.RELATIVE_DECREASE
                break

    grad_norm = float(np.linalg.norm(g))
    failed = status in (Status.LINE_SEARCH_FAILED, Status.MAX_ITERATIONS) and grad_norm > options.failure_tol * max(
        1.0, abs(f)
    )
    _logger.info("Minimizer stopped after %d iterations: %s", iteration, STATUS_MESSAGES[status])
    return SolveReport(x, iteration, evaluations, float(f), grad_norm, status, failed)


# ---- Planner ----


@dataclass
class PlanResult:
    """Planner output.

    Attributes:
        trajectory: optimized trajectory.
        history: cost report of every accepted iterate, starting with the initial guess.
        report: combined minimizer report over all reselection rounds.
        clearance: dense clearance check of the final trajectory.
        cost: cost report of the final trajectory with a fresh obstacle selection.
    """

    trajectory: Trajectory
    history: List[CostReport]
    report: SolveReport
    clearance: Optional[ClearanceReport]
    cost: CostReport
    rounds: int = 1
    selected: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.intp))

    @property
    def failed(self) -> bool:
        return self.report.failed or self.cost.safety > 0

    def to_summary(self) -> dict:
        clearance = None if self.clearance is None else self.clearance.to_dict()
        if clearance is not None and not np.isfinite(clearance["min_clearance"]):
            clearance["min_clearance"] = None
        return {
            "total_duration": self.trajectory.total_duration,
            "pieces": self.trajectory.pieces,
            "rounds": self.rounds,
            "solver": self.report.to_dict(),
            "cost": self.cost.to_dict(),
            "clearance": clearance,
            "failed": self.failed,
        }


def initial_guess(start: BoundaryState, goal: BoundaryState, config: PlannerConfig) -> Tuple[np.ndarray, np.ndarray]:
    """Evenly spaced waypoints on the segment start-goal, flown at half the speed limit."""
    delta = goal.position - start.position
    distance = float(np.linalg.norm(delta))
    if distance == 0.0:
        raise InputError("start and goal positions coincide")
    pieces = max(2, ceil(distance / config.segment_length))
    fractions = np.arange(1, pieces)[:, None] / pieces
    waypoints = start.position + fractions * delta
    durations = np.full(pieces, distance / pieces / (0.5 * config.v_max))
    return waypoints, durations


def check_endpoint(index: MeshDistanceIndex, cloud, state: BoundaryState, name: str, gravity: float) -> float:
    """Smallest body SDF of the cloud with the robot resting in ``state``.

    Raises:
        CollisionError: some cloud point is inside the body.
    """
    pts = np.asarray(cloud, dtype=np.float64).reshape(-1, 3)
    if not len(pts):
        return np.inf
    quat = flatness.flat_to_attitude(state.acceleration, gravity=gravity)
    R = flatness.rotation_from_quaternion(quat)
    clearance = float(np.min(index.signed_distances((pts - state.position) @ R)))
    if clearance < 0:
        raise CollisionError(f"{name} state in collision (clearance {clearance:.6g})")
    return clearance


def plan(
    mesh: TriangleMesh,
    cloud,
    start: BoundaryState,
    goal: BoundaryState,
    config: Optional[PlannerConfig] = None,
    options: Optional[SolveOptions] = None,
    sweep_options: Optional[SweepOptions] = None,
    threads: int = 1,
    certify: bool = True,
) -> PlanResult:
    """Optimize a trajectory from ``start`` to ``goal`` around the obstacle cloud.

    The minimizer runs in rounds of ``config.reselect_every`` iterations; between
    rounds the obstacle points near the current trajectory are reselected.

    Raises:
        CollisionError: start or goal places the robot in collision.
        InputError: invalid inputs.
        SolverError: the initial guess has a non-finite cost.
    """
    config = config or PlannerConfig()
    options = options or SolveOptions()
    sweep_options = sweep_options or SweepOptions(v_max=config.v_max)
    cloud = np.asarray(cloud, dtype=np.float64).reshape(-1, 3)
    index = MeshDistanceIndex(mesh)
    check_endpoint(index, cloud, start, "start", config.gravity)
    check_endpoint(index, cloud, goal, "goal", config.gravity)
    inflation = config.inflation_for(mesh.circumscribed_radius)

    waypoints, durations = initial_guess(start, goal, config)
    pieces = len(durations)
    traj = minco_construct(waypoints, durations, start, goal)
    engine = SweptSdfEngine(index, traj, sweep_options, gravity=config.gravity)
    state = {"selected": select_obstacles(cloud, traj, inflation)}
    evaluated = {}

    def objective(x):
        q, T = unpack(x, pieces)
        try:
            candidate = minco_construct(q, T, start, goal)
            report = total_cost(engine, candidate, config, cloud, state["selected"], threads)
        except (TrajectoryError, FlatnessSingularityError) as exc:
            _logger.debug("Rejecting trial point: %s", exc)
            return np.inf, np.zeros_like(x)
        evaluated.clear()
        evaluated[x.tobytes()] = report
        return report.total, pack_gradient(report.grad_q, report.grad_T, T)

    history: List[CostReport] = []
    offset = {"iterations": 0}

    def record(info: IterationRecord):
        report = evaluated.get(info.x.tobytes())
        if report is None:
            objective(info.x)
            report = evaluated[info.x.tobytes()]
        history.append(report)
        entry = report.to_dict()
        entry.update(iteration=offset["iterations"] + info.iteration, step=info.step)
        log_iteration(entry)

    x = pack(waypoints, durations)
    initial = total_cost(engine, traj, config, cloud, state["selected"], threads)
    history.append(initial)
    iterations = evaluations = rounds = 0
    while True:
        rounds += 1
        budget = min(config.reselect_every, options.max_iterations - iterations)
        report = minimize(objective, x, replace(options, max_iterations=budget), record)
        x = report.x
        iterations += report.iterations
        evaluations += report.evaluations
        offset["iterations"] = iterations
        if report.status != Status.MAX_ITERATIONS or iterations >= options.max_iterations:
            break
        q, T = unpack(x, pieces)
        state["selected"] = select_obstacles(cloud, minco_construct(q, T, start, goal), inflation)
        _logger.info("Round %d: %d obstacle points selected", rounds, len(state["selected"]))

    q, T = unpack(x, pieces)
    traj = minco_construct(q, T, start, goal)
    state["selected"] = select_obstacles(cloud, traj, inflation)
    final = total_cost(engine, traj, config, cloud, state["selected"], threads)
    report = replace(report, iterations=iterations, evaluations=evaluations)
    clearance = None
    if certify:
        clearance = dense_clearance(index, MotionOracle(traj, config.gravity), cloud, config.check_dt, _CHECK_CUTOFF)
    _logger.info(
        "Planned %d pieces over %.4g s: cost %.6g, safety %.3g, %s",
        traj.pieces, traj.total_duration, final.total, final.safety, report.message,
    )
    return PlanResult(traj, history, report, clearance, final, rounds, state["selected"])
