"""
Signed distance to the volume swept by a rigid body moving along a trajectory.

For an obstacle point ``x`` the body-frame SDF at time ``t`` is
``f(t) = sdf(R(t)^T (x - p(t)))``. The swept-volume SDF is the minimum of ``f``
over the horizon, and the minimizing time ``t*`` is what the safety gradients
are evaluated at.

The minimum is found by projected gradient descent in time with Armijo
backtracking. A cold query starts from every promising local minimum of a
refined sampling of the horizon and keeps the lowest result; a warm query starts
from the ``t*`` of an earlier query of the same obstacle. All of it runs batched
over many obstacle points at once.
"""
from __future__ import annotations

import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, Iterable, NamedTuple, Optional, Sequence, Tuple, Union

import numpy as np
import pandas as pd
from scipy.optimize import brentq

from swept_sdf import flatness
from swept_sdf.exceptions import InputError, TrajectoryError
from swept_sdf.geometry import GRADIENT_STEP, SURFACE_EPS, MeshDistanceIndex
from swept_sdf.trajectory import Trajectory

_logger = logging.getLogger(__name__)
_logger.addHandler(logging.NullHandler())

INTERIOR, AT_T_MIN, AT_T_MAX = 0, 1, 2
BOUNDARY_LABELS = ("interior", "t_min", "t_max")

_EPS = np.finfo(np.float64).eps
_MAX_STEP = 1e6
# rows per batched SDF call when sampling many (point, time) pairs
_SAMPLE_BLOCK = 1 << 16

PathLike = Union[str, Path]


@dataclass(frozen=True)
class SweepOptions:
    """Tunables of the argmin-over-time search.

    Attributes:
        initial_step: first trial step ``eta`` of every search.
        armijo: sufficient-decrease coefficient.
        stationarity_tol: stop when ``|df/dt|`` falls below this (m/s).
        step_tol: stop when a projected step is shorter than this (s).
        max_iterations: accepted steps per search.
        max_halvings: backtracking halvings before restarting from the second-best
            seed sample; the better of the two runs is kept.
        max_starts: start times per point of a cold search.
        refine_levels: bisection rounds of the seed grid.
        seed_tol: refine an interval of the seed grid while its Lipschitz lower
            bound is more than this below the best sample (m).
        seed_stride: seed sampling interval in seconds; ``None`` derives it from the
            robot radius and ``v_max``.
        min_seed_samples: lower bound on seed samples over the horizon.
        v_max: speed used for the default seed stride.
        polish: refine a non-stationary interior result by root finding on ``df/dt``.
    """

    initial_step: float = 0.02
    armijo: float = 0.5
    stationarity_tol: float = 1e-8
    step_tol: float = 1e-10
    max_iterations: int = 128
    max_halvings: int = 32
    max_starts: int = 6
    refine_levels: int = 3
    seed_tol: float = 1e-4
    seed_stride: Optional[float] = None
    min_seed_samples: int = 32
    v_max: float = 2.0
    surface_eps: float = SURFACE_EPS
    gradient_step: float = GRADIENT_STEP
    polish: bool = True

    def __post_init__(self):
        positive = ("initial_step", "stationarity_tol", "step_tol", "v_max", "surface_eps", "gradient_step", "seed_tol")
        for name in positive:
            if not getattr(self, name) > 0:
                raise InputError(f"{name} must be positive, got {getattr(self, name)!r}")
        if not 0 < self.armijo < 1:
            raise InputError(f"armijo must be in (0, 1), got {self.armijo!r}")
        if self.max_iterations < 1 or self.max_halvings < 1 or self.min_seed_samples < 2 or self.max_starts < 1:
            raise InputError("iteration, halving, start and seed-sample limits must be positive")
        if self.refine_levels < 0:
            raise InputError(f"refine_levels must be non-negative, got {self.refine_levels!r}")
        if self.seed_stride is not None and not self.seed_stride > 0:
            raise InputError(f"seed_stride must be positive, got {self.seed_stride!r}")


# ---- Motion ----


class MotionSample(NamedTuple):
    """Flat state of the body at a batch of times."""

    t: np.ndarray
    p: np.ndarray
    v: np.ndarray
    a: np.ndarray
    j: np.ndarray
    snap: np.ndarray
    quat: np.ndarray
    R: np.ndarray
    omega: np.ndarray


class MotionOracle:
    """Pose, rates and flat outputs of the robot along a trajectory."""

    def __init__(self, trajectory: Trajectory, gravity: float = flatness.GRAVITY):
        self.trajectory = trajectory
        self.gravity = gravity
        self.t_min = 0.0
        self.t_max = trajectory.total_duration

    def __repr__(self) -> str:
        return f"{type(self).__name__}(t_max={self.t_max:.6g})"

    def sample(self, ts) -> MotionSample:
        ts = np.atleast_1d(np.asarray(ts, dtype=np.float64))
        pieces, local = self.trajectory.locate_many(ts)
        derivs = [self.trajectory.eval_local(pieces, local, k) for k in range(5)]
        state = flatness.flat_state(derivs[0], derivs[1], derivs[2], derivs[3], self.gravity)
        return MotionSample(ts, derivs[0], derivs[1], derivs[2], derivs[3], derivs[4], state.quat, state.R, state.omega)

    def pose(self, ts) -> Tuple[np.ndarray, np.ndarray]:
        """Positions ``(n, 3)`` and rotations ``(n, 3, 3)``."""
        ts = np.atleast_1d(np.asarray(ts, dtype=np.float64))
        pieces, local = self.trajectory.locate_many(ts)
        p = self.trajectory.eval_local(pieces, local, 0)
        a = self.trajectory.eval_local(pieces, local, 2)
        return p, flatness.rotation_from_quaternion(flatness.flat_to_attitude(a, gravity=self.gravity))


def to_body(points, p, R) -> np.ndarray:
    """``R^T (x - p)`` row by row."""
    return np.einsum("nji,nj->ni", R, points - p)


def _evaluate(index: MeshDistanceIndex, motion: MotionOracle, points, ts, options: SweepOptions):
    sample = motion.sample(ts)
    x_rel = to_body(points, sample.p, sample.R)
    f, grad = index.sdf_with_gradients(x_rel, options.surface_eps, options.gradient_step)
    rel_rate = -np.cross(sample.omega, x_rel) - np.einsum("nji,nj->ni", sample.R, sample.v)
    fdot = np.einsum("ni,ni->n", grad, rel_rate)
    return f, fdot, x_rel, grad


def sdf_at_time(index: MeshDistanceIndex, motion: MotionOracle, x_ob, t: float) -> float:
    """Body SDF at obstacle point ``x_ob`` with the robot in its pose at time ``t``."""
    p, R = motion.pose([t])
    return float(index.signed_distances(to_body(np.reshape(x_ob, (1, 3)), p, R))[0])


def sdf_time_derivative(
    index: MeshDistanceIndex, motion: MotionOracle, x_ob, t: float, options: Optional[SweepOptions] = None
) -> float:
    """``d/dt`` of :func:`sdf_at_time`, ``grad . (-omega x x_rel - R^T v)``."""
    options = options or SweepOptions()
    return float(_evaluate(index, motion, np.reshape(x_ob, (1, 3)), [t], options)[1][0])


# ---- Seeding ----


def default_seed_stride(radius: float, v_max: float, horizon: float, min_samples: int = 32) -> float:
    """Half a body radius of travel at ``v_max``, with at least ``min_samples`` samples."""
    return min(radius / (2.0 * v_max), horizon / min_samples) if horizon > 0 else radius / (2.0 * v_max)


def seed_grid(motion: MotionOracle, stride: float) -> np.ndarray:
    """``t_min, t_min + stride, ...`` with ``t_max`` always included."""
    if not stride > 0:
        raise InputError(f"seed stride must be positive, got {stride!r}")
    span = motion.t_max - motion.t_min
    count = int(np.ceil(span / stride)) if span > 0 else 0
    return np.append(motion.t_min + stride * np.arange(count), motion.t_max)


def seed_times(index: MeshDistanceIndex, motion: MotionOracle, points, stride: float) -> Tuple[np.ndarray, np.ndarray]:
    """Best and second-best sample time for each point (ties toward smaller t)."""
    pts = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    times = seed_grid(motion, stride)
    p, R = motion.pose(times)
    best = np.full(len(pts), motion.t_min)
    second = np.full(len(pts), motion.t_min)
    rows = max(1, _SAMPLE_BLOCK // len(times))
    for lo in range(0, len(pts), rows):
        block = pts[lo:lo + rows]
        rel = np.einsum("sji,nsj->nsi", R, block[:, None, :] - p[None, :, :])
        values = index.signed_distances(rel.reshape(-1, 3)).reshape(len(block), len(times))
        order = np.argsort(values, axis=1, kind="stable")
        best[lo:lo + rows] = times[order[:, 0]]
        second[lo:lo + rows] = times[order[:, min(1, len(times) - 1)]]
    return best, second


def seed_time(index: MeshDistanceIndex, motion: MotionOracle, x_ob, stride: float) -> float:
    return float(seed_times(index, motion, x_ob, stride)[0][0])


def _sample_bounds(index: MeshDistanceIndex, motion: MotionOracle, points, times):
    """Body SDF at (point, time) pairs and a bound on its rate of change.

    The body SDF is 1-Lipschitz in space and the point moves in the body frame with
    speed at most ``|v| + |omega| |x - p|``.
    """
    sample = motion.sample(times)
    offset = points - sample.p
    values = index.signed_distances(to_body(points, sample.p, sample.R))
    rates = np.linalg.norm(sample.v, axis=1) + np.linalg.norm(sample.omega, axis=1) * np.linalg.norm(offset, axis=1)
    return values, rates


def _sorted_samples(owner, times, values, rates):
    order = np.lexsort((times, owner))
    return owner[order], times[order], values[order], rates[order]


def _block_candidates(index, motion, block, grid, options):
    m = len(block)
    owner = np.repeat(np.arange(m), len(grid))
    times = np.tile(grid, m)
    values, rates = _sample_bounds(index, motion, block[owner], times)
    for _ in range(options.refine_levels):
        owner, times, values, rates = _sorted_samples(owner, times, values, rates)
        best = np.full(m, np.inf)
        np.minimum.at(best, owner, values)
        width = times[1:] - times[:-1]
        # lowest value a Lipschitz function can reach between two samples
        bound = 0.5 * (values[1:] + values[:-1] - np.maximum(rates[1:], rates[:-1]) * width)
        split = (owner[1:] == owner[:-1]) & (bound < best[owner[:-1]] - options.seed_tol)
        split &= width > 2.0 * options.step_tol
        if not split.any():
            break
        mid_owner = owner[:-1][split]
        mid_times = 0.5 * (times[:-1][split] + times[1:][split])
        mid_values, mid_rates = _sample_bounds(index, motion, block[mid_owner], mid_times)
        owner = np.concatenate([owner, mid_owner])
        times = np.concatenate([times, mid_times])
        values = np.concatenate([values, mid_values])
        rates = np.concatenate([rates, mid_rates])

    owner, times, values, rates = _sorted_samples(owner, times, values, rates)
    best = np.full(m, np.inf)
    np.minimum.at(best, owner, values)
    same = owner[1:] == owner[:-1]
    width = np.where(same, times[1:] - times[:-1], 0.0)
    rise = values[1:] - values[:-1]
    lower = np.ones(len(owner), dtype=bool)
    lower[1:] &= ~same | (rise <= 0)
    lower[:-1] &= ~same | (rise >= 0)
    # strictly below one neighbour, so a flat stretch yields its ends only
    strict = np.zeros(len(owner), dtype=bool)
    strict[1:] |= same & (rise < 0)
    strict[:-1] |= same & (rise > 0)
    reach = np.zeros(len(owner))
    reach[1:] = width
    reach[:-1] = np.maximum(reach[:-1], width)
    # a discrete local minimum is worth a start while its neighbourhood could dip below the best sample
    candidate = lower & strict & (values <= best[owner] + rates * reach)
    at_best = np.flatnonzero(values == best[owner])
    _, head = np.unique(owner[at_best], return_index=True)
    candidate[at_best[head]] = True

    picks = np.flatnonzero(candidate)
    picks = picks[np.lexsort((times[picks], values[picks], owner[picks]))]
    picked_owner = owner[picks]
    rank = np.arange(len(picks)) - np.searchsorted(picked_owner, picked_owner, side="left")
    keep = rank < options.max_starts
    return picked_owner[keep], rank[keep], times[picks[keep]]


def seed_candidates(
    index: MeshDistanceIndex,
    motion: MotionOracle,
    points,
    stride: float,
    options: Optional[SweepOptions] = None,
) -> Tuple[np.ndarray, np.ndarray]:
    """Start times of a multi-start search over the horizon.

    The seed grid is refined, up to ``refine_levels`` bisections, wherever the
    Lipschitz lower bound of an interval falls more than ``seed_tol`` below the best
    sample. Every discrete local minimum whose neighbourhood could still hold a
    lower value becomes a candidate.

    Returns:
        tuple: ``(starts, valid)``, both ``(n, max_starts)``; row ``i`` lists the
        candidates of point ``i`` by increasing sample value and always holds the
        best sample first.
    """
    options = options or SweepOptions()
    pts = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    starts = np.full((len(pts), options.max_starts), motion.t_min)
    valid = np.zeros((len(pts), options.max_starts), dtype=bool)
    grid = seed_grid(motion, stride)
    rows = max(1, _SAMPLE_BLOCK // len(grid))
    for lo in range(0, len(pts), rows):
        block = pts[lo:lo + rows]
        owner, rank, times = _block_candidates(index, motion, block, grid, options)
        starts[lo + owner, rank] = times
        valid[lo + owner, rank] = True
    return starts, valid


# ---- Results ----


@dataclass(frozen=True)
class SweptQueryResult:
    """Swept-volume SDF of one obstacle point.

    ``f_star`` equals the body SDF at ``x_rel`` exactly; ``at_boundary`` is one of
    ``"interior"``, ``"t_min"`` or ``"t_max"``.
    """

    f_star: float
    t_star: float
    at_boundary: str
    x_rel: np.ndarray
    grad_body: np.ndarray
    iterations: int
    f_dot: float
    converged: bool
    seeded: bool = False

    @property
    def interior(self) -> bool:
        return self.at_boundary == "interior"


@dataclass
class SweptBatch:
    """Column-wise results of many swept-volume queries."""

    f_star: np.ndarray
    t_star: np.ndarray
    boundary: np.ndarray
    x_rel: np.ndarray
    grad_body: np.ndarray
    iterations: np.ndarray
    f_dot: np.ndarray
    converged: np.ndarray
    seeded: np.ndarray = field(default=None)

    def __post_init__(self):
        if self.seeded is None:
            self.seeded = np.zeros(len(self.f_star), dtype=bool)

    def __len__(self):
        return len(self.f_star)

    def __getitem__(self, i) -> SweptQueryResult:
        return SweptQueryResult(
            f_star=float(self.f_star[i]),
            t_star=float(self.t_star[i]),
            at_boundary=BOUNDARY_LABELS[int(self.boundary[i])],
            x_rel=self.x_rel[i].copy(),
            grad_body=self.grad_body[i].copy(),
            iterations=int(self.iterations[i]),
            f_dot=float(self.f_dot[i]),
            converged=bool(self.converged[i]),
            seeded=bool(self.seeded[i]),
        )

    @property
    def interior(self) -> np.ndarray:
        return self.boundary == INTERIOR

    @classmethod
    def empty(cls) -> "SweptBatch":
        return cls(
            np.zeros(0), np.zeros(0), np.zeros(0, dtype=np.int8), np.zeros((0, 3)), np.zeros((0, 3)),
            np.zeros(0, dtype=np.int64), np.zeros(0), np.zeros(0, dtype=bool), np.zeros(0, dtype=bool),
        )

    @classmethod
    def concatenate(cls, batches: Sequence["SweptBatch"]) -> "SweptBatch":
        if not batches:
            return cls.empty()
        return cls(*(np.concatenate([getattr(b, name) for b in batches]) for name in cls.__dataclass_fields__))

    def take(self, indices) -> "SweptBatch":
        return type(self)(*(getattr(self, name)[indices] for name in self.__dataclass_fields__))

    def to_frame(self, points) -> pd.DataFrame:
        pts = np.asarray(points, dtype=np.float64).reshape(-1, 3)
        return pd.DataFrame(
            {
                "x": pts[:, 0],
                "y": pts[:, 1],
                "z": pts[:, 2],
                "f_star": self.f_star,
                "t_star": self.t_star,
                "at_boundary": [BOUNDARY_LABELS[int(code)] for code in self.boundary],
            }
        )


# ---- Argmin over time ----


def argmin_times(
    index: MeshDistanceIndex,
    motion: MotionOracle,
    points,
    t_init=None,
    options: Optional[SweepOptions] = None,
    stride: Optional[float] = None,
) -> SweptBatch:
    """Minimize the body SDF over time for many obstacle points at once.

    Each search runs projected gradient descent in ``t`` with Armijo backtracking.
    The first trial step is ``initial_step``; after an accepted step the next trial
    is the secant estimate of the inverse curvature.

    Without ``t_init`` every point is searched from all of its
    :func:`seed_candidates` and keeps the lowest minimum found (ties toward smaller
    ``t``); ``iterations`` then counts the steps of all starts.

    Args:
        points: ``(n, 3)`` obstacle points.
        t_init: ``(n,)`` start times inside the horizon, or ``None``.
        stride: seed stride of the multi-start and of the restart from the
            second-best seed sample when a search exhausts its halvings.

    Raises:
        TrajectoryError: a start time lies outside the horizon.
    """
    options = options or SweepOptions()
    pts = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    n = len(pts)
    if n == 0:
        return SweptBatch.empty()
    t_min, t_max = motion.t_min, motion.t_max
    if stride is None:
        stride = options.seed_stride or ((t_max - t_min) / options.min_seed_samples if t_max > t_min else 1.0)
    if t_init is not None:
        t = np.array(t_init, dtype=np.float64).reshape(-1) * np.ones(n)
        if np.any(~np.isfinite(t)) or t.min() < t_min or t.max() > t_max:
            raise TrajectoryError(f"initial time outside [{t_min}, {t_max}]")
        return _descend(index, motion, pts, t, options, stride)

    starts, valid = seed_candidates(index, motion, pts, stride, options)
    owner, slot = np.nonzero(valid)
    runs = _descend(index, motion, pts[owner], starts[owner, slot], options, stride)
    order = np.lexsort((runs.t_star, runs.f_star, owner))
    ranked = owner[order]
    first = np.ones(len(order), dtype=bool)
    first[1:] = ranked[1:] != ranked[:-1]
    batch = runs.take(order[first])
    batch.iterations = np.bincount(owner, weights=runs.iterations, minlength=n).astype(np.int64)
    return batch


def _descend(index, motion, pts, t, options, stride) -> SweptBatch:
    n = len(pts)
    t_min, t_max = motion.t_min, motion.t_max
    f, fdot, x_rel, grad = _evaluate(index, motion, pts, t, options)
    eta = np.full(n, options.initial_step)
    halvings = np.zeros(n, dtype=np.int64)
    iterations = np.zeros(n, dtype=np.int64)
    boundary = np.zeros(n, dtype=np.int8)
    converged = np.zeros(n, dtype=bool)
    restarted = np.zeros(n, dtype=bool)
    active = np.ones(n, dtype=bool)
    # state at the moment of a restart
    saved_f = np.full(n, np.inf)
    saved_t, saved_fdot = t.copy(), fdot.copy()
    saved_rel, saved_grad = x_rel.copy(), grad.copy()

    while active.any():
        idx = np.flatnonzero(active)
        stationary = np.abs(fdot[idx]) <= options.stationarity_tol
        low = (t[idx] <= t_min) & (fdot[idx] >= 0)
        high = (t[idx] >= t_max) & (fdot[idx] <= 0)
        boundary[idx[low & ~stationary]] = AT_T_MIN
        boundary[idx[high & ~stationary]] = AT_T_MAX
        done = stationary | low | high
        converged[idx[done]] = True
        done |= iterations[idx] >= options.max_iterations
        active[idx[done]] = False
        idx = idx[~done]
        if not idx.size:
            break

        trial = np.clip(t[idx] - eta[idx] * fdot[idx], t_min, t_max)
        step = trial - t[idx]
        tiny = np.abs(step) < options.step_tol
        active[idx[tiny]] = False
        idx, trial, step = idx[~tiny], trial[~tiny], step[~tiny]
        if not idx.size:
            continue

        f_try, fdot_try, rel_try, grad_try = _evaluate(index, motion, pts[idx], trial, options)
        noise = 4.0 * _EPS * np.maximum(1.0, np.abs(f[idx]))
        accept = f_try <= f[idx] + options.armijo * fdot[idx] * step + noise

        good = idx[accept]
        if good.size:
            change = fdot_try[accept] - fdot[good]
            moved = step[accept]
            curvature = moved * change > 0
            secant = np.where(curvature, moved / np.where(curvature, change, 1.0), eta[good])
            eta[good] = np.clip(secant, 1e-16, _MAX_STEP)
            t[good] = trial[accept]
            f[good] = f_try[accept]
            fdot[good] = fdot_try[accept]
            x_rel[good] = rel_try[accept]
            grad[good] = grad_try[accept]
            iterations[good] += 1
            halvings[good] = 0

        bad = idx[~accept]
        if bad.size:
            eta[bad] *= 0.5
            halvings[bad] += 1
            exhausted = bad[halvings[bad] > options.max_halvings]
            if exhausted.size:
                again = exhausted[~restarted[exhausted]]
                active[exhausted[restarted[exhausted]]] = False
                if again.size:
                    _logger.warning("Armijo backtracking exhausted for %d points; restarting", again.size)
                    saved_f[again], saved_t[again], saved_fdot[again] = f[again], t[again], fdot[again]
                    saved_rel[again], saved_grad[again] = x_rel[again], grad[again]
                    _, second = seed_times(index, motion, pts[again], stride)
                    restarted[again] = True
                    t[again] = second
                    eta[again] = options.initial_step
                    halvings[again] = 0
                    f[again], fdot[again], x_rel[again], grad[again] = _evaluate(
                        index, motion, pts[again], second, options
                    )

    back = np.flatnonzero(saved_f < f)
    if back.size:
        t[back], f[back], fdot[back] = saved_t[back], saved_f[back], saved_fdot[back]
        x_rel[back], grad[back] = saved_rel[back], saved_grad[back]
        boundary[back] = INTERIOR
        converged[back] = False

    if options.polish:
        loose = np.flatnonzero((boundary == INTERIOR) & (np.abs(fdot) > options.stationarity_tol))
        for i in loose:
            _polish(index, motion, pts[i], i, t, f, fdot, x_rel, grad, converged, options)

    return SweptBatch(f, t, boundary, x_rel, grad, iterations, fdot, converged)


def _polish(index, motion, point, i, t, f, fdot, x_rel, grad, converged, options):
    """Bracket the sign change of df/dt next to ``t[i]`` and root-find it."""
    point = point.reshape(1, 3)

    def rate(time):
        return float(_evaluate(index, motion, point, [time], options)[1][0])

    direction = 1.0 if fdot[i] < 0 else -1.0
    limit = motion.t_max if direction > 0 else motion.t_min
    width = max(1e-9, 1e-6 * (motion.t_max - motion.t_min))
    inner = t[i]
    while True:
        outer = inner + direction * width
        if (outer - limit) * direction >= 0:
            outer = limit
        if rate(outer) * direction > 0:
            break
        if outer == limit:
            return
        inner = outer
        width *= 2.0
    lo, hi = sorted((inner, outer))
    try:
        root = brentq(rate, lo, hi, xtol=1e-15, maxiter=200)
    except (ValueError, RuntimeError):
        return
    f_new, fdot_new, rel_new, grad_new = _evaluate(index, motion, point, [root], options)
    if f_new[0] <= f[i] + 4.0 * _EPS * max(1.0, abs(f[i])):
        t[i], f[i], fdot[i] = root, f_new[0], fdot_new[0]
        x_rel[i], grad[i] = rel_new[0], grad_new[0]
        converged[i] = abs(fdot_new[0]) <= options.stationarity_tol


def argmin_time(
    index: MeshDistanceIndex,
    motion: MotionOracle,
    x_ob,
    t_init: Optional[float] = None,
    options: Optional[SweepOptions] = None,
) -> SweptQueryResult:
    """Single-point form of :func:`argmin_times`."""
    start = None if t_init is None else [t_init]
    return argmin_times(index, motion, np.reshape(x_ob, (1, 3)), start, options)[0]


# ---- Warm starts ----


class WarmStartCache:
    """Last ``t*`` of each obstacle, keyed by obstacle index.

    Entries are clamped into the current horizon on read. Each entry remembers the
    waypoints it was computed against; :meth:`invalidate_if_moved` drops the
    entries whose waypoints drifted further than a threshold, so small moves
    cannot add up unnoticed.
    """

    def __init__(self, entries: Optional[Dict[int, float]] = None):
        self._times: Dict[int, float] = dict(entries or {})
        # entry key -> generation, generation -> waypoints of that generation
        self._stamps: Dict[int, int] = {}
        self._snapshots: Dict[int, np.ndarray] = {}
        self._generation = 0

    def __len__(self):
        return len(self._times)

    def __contains__(self, key):
        return int(key) in self._times

    def get(self, key, t_min: float, t_max: float) -> Optional[float]:
        value = self._times.get(int(key))
        return None if value is None else min(max(value, t_min), t_max)

    def put(self, key, t_star: float) -> None:
        self.update_many([key], [t_star])

    def lookup_many(self, keys: Iterable, t_min: float, t_max: float) -> Tuple[np.ndarray, np.ndarray]:
        values = np.array([self._times.get(int(k), np.nan) for k in keys], dtype=np.float64)
        hit = ~np.isnan(values)
        return np.clip(np.where(hit, values, t_min), t_min, t_max), hit

    def update_many(self, keys: Iterable, times: Iterable) -> None:
        for k, v in zip(keys, times):
            self._times[int(k)] = float(v)
            self._stamps[int(k)] = self._generation

    def subset(self, keys: Iterable) -> "WarmStartCache":
        part = WarmStartCache()
        part._generation = self._generation
        part._snapshots = dict(self._snapshots)
        for k in map(int, keys):
            if k in self._times:
                part._times[k] = self._times[k]
                if k in self._stamps:
                    part._stamps[k] = self._stamps[k]
        return part

    def merge(self, other: "WarmStartCache") -> None:
        self._times.update(other._times)
        self._stamps.update(other._stamps)
        for generation, waypoints in other._snapshots.items():
            self._snapshots.setdefault(generation, waypoints)
        self._generation = max(self._generation, other._generation)

    def clear(self) -> None:
        self._times.clear()
        self._stamps.clear()
        self._snapshots.clear()

    def invalidate_if_moved(self, waypoints, threshold: float) -> bool:
        """Drop entries whose waypoints moved more than ``threshold`` (inf-norm).

        Later :meth:`put` calls are stamped with ``waypoints``. Returns whether any
        entry was dropped.
        """
        waypoints = np.asarray(waypoints, dtype=np.float64)
        stale = set()
        for generation, ref in self._snapshots.items():
            if ref.shape != waypoints.shape or (waypoints.size and np.max(np.abs(waypoints - ref)) > threshold):
                stale.add(generation)
        dropped = [k for k in self._times if self._stamps.get(k) not in self._snapshots or self._stamps[k] in stale]
        for k in dropped:
            del self._times[k]
            self._stamps.pop(k, None)
        live = set(self._stamps.values())
        self._snapshots = {g: ref for g, ref in self._snapshots.items() if g in live}
        self._generation += 1
        self._snapshots[self._generation] = waypoints.copy()
        if dropped:
            _logger.debug("Dropped %d warm starts after waypoint change", len(dropped))
        return bool(dropped)


# ---- Engine ----


class SweptSdfEngine:
    """Swept-volume SDF queries of one robot along one (rebindable) trajectory.

    Args:
        index: robot distance index.
        trajectory: current trajectory.
        options: search options.
        cache: warm-start cache; a fresh one by default.
    """

    def __init__(
        self,
        index: MeshDistanceIndex,
        trajectory: Trajectory,
        options: Optional[SweepOptions] = None,
        cache: Optional[WarmStartCache] = None,
        gravity: float = flatness.GRAVITY,
    ):
        self.index = index
        self.options = options or SweepOptions()
        self.cache = cache if cache is not None else WarmStartCache()
        self.gravity = gravity
        self.radius = index.mesh.circumscribed_radius
        self.motion: Optional[MotionOracle] = None
        self._stride: Optional[float] = None
        self.bind(trajectory)

    def __repr__(self) -> str:
        return f"{type(self).__name__}(motion={self.motion!r}, cached={len(self.cache)})"

    def bind(self, trajectory: Trajectory) -> None:
        """Point the engine at a new trajectory, keeping warm starts when it moved little."""
        self.motion = MotionOracle(trajectory, self.gravity)
        self._stride = None
        self.cache.invalidate_if_moved(trajectory.waypoints, self.radius)

    @property
    def seed_stride(self) -> float:
        """Seed stride in seconds.

        Without an explicit ``seed_stride`` option the stride covers half a body
        radius of travel at the larger of ``v_max`` and the peak surface speed
        ``|v| + |omega| r`` of the bound trajectory.
        """
        if self.options.seed_stride is not None:
            return self.options.seed_stride
        if self._stride is None:
            motion, options = self.motion, self.options
            sample = motion.sample(np.linspace(motion.t_min, motion.t_max, 4 * options.min_seed_samples + 1))
            speed = np.linalg.norm(sample.v, axis=1) + np.linalg.norm(sample.omega, axis=1) * self.radius
            peak = max(options.v_max, float(speed.max()))
            self._stride = default_seed_stride(self.radius, peak, motion.t_max - motion.t_min, options.min_seed_samples)
        return self._stride

    def swept_sdf(self, x_ob, key: Optional[int] = None) -> SweptQueryResult:
        """Query one point; with a ``key`` the warm-start cache is read and updated."""
        keys = None if key is None else [key]
        return self.query_many(np.reshape(x_ob, (1, 3)), keys)[0]

    def query_many(self, points, keys=None, threads: int = 1, t_init=None) -> SweptBatch:
        """Query many points.

        Args:
            points: ``(n, 3)`` obstacle points.
            keys: obstacle ids for the warm-start cache; no caching without them.
            threads: worker threads; points are split into contiguous chunks, each
                with a private copy of the relevant cache entries, merged back in
                chunk order.
            t_init: explicit start times overriding cache and seeding.
        """
        pts = np.asarray(points, dtype=np.float64).reshape(-1, 3)
        keys = None if keys is None else np.asarray(keys).reshape(-1)
        if keys is not None and len(keys) != len(pts):
            raise InputError("need one key per point")
        if t_init is not None:
            t_init = np.asarray(t_init, dtype=np.float64).reshape(-1) * np.ones(len(pts))
        threads = max(1, int(threads))
        stride = self.seed_stride
        if threads == 1 or len(pts) < 2 * threads:
            return self._query_chunk(pts, keys, self.cache, t_init, stride)

        chunks = [c for c in np.array_split(np.arange(len(pts)), threads) if c.size]
        caches = [self.cache.subset(keys[c]) if keys is not None else WarmStartCache() for c in chunks]
        with ThreadPoolExecutor(max_workers=threads) as pool:
            futures = [
                pool.submit(
                    self._query_chunk,
                    pts[c],
                    None if keys is None else keys[c],
                    cache,
                    None if t_init is None else t_init[c],
                    stride,
                )
                for c, cache in zip(chunks, caches)
            ]
            batches = [future.result() for future in futures]
        if keys is not None:
            for cache in caches:
                self.cache.merge(cache)
        return SweptBatch.concatenate(batches)

    def _query_chunk(self, pts, keys, cache, t_init, stride) -> SweptBatch:
        motion = self.motion
        if t_init is not None:
            start = np.clip(t_init, motion.t_min, motion.t_max)
            batch = argmin_times(self.index, motion, pts, start, self.options, stride)
        else:
            if keys is not None:
                start, hit = cache.lookup_many(keys, motion.t_min, motion.t_max)
            else:
                start, hit = np.full(len(pts), motion.t_min), np.zeros(len(pts), dtype=bool)
            warm, cold = np.flatnonzero(hit), np.flatnonzero(~hit)
            parts = []
            if warm.size:
                parts.append(argmin_times(self.index, motion, pts[warm], start[warm], self.options, stride))
            if cold.size:
                parts.append(argmin_times(self.index, motion, pts[cold], None, self.options, stride))
            batch = SweptBatch.concatenate(parts).take(np.argsort(np.concatenate([warm, cold]), kind="stable"))
            batch.seeded = ~hit
        if keys is not None:
            cache.update_many(keys, batch.t_star)
        return batch


def swept_sdf(engine: SweptSdfEngine, x_ob, key: Optional[int] = None) -> SweptQueryResult:
    return engine.swept_sdf(x_ob, key)


# ---- Obstacle culling ----


def select_obstacles(cloud, trajectory: Union[Trajectory, MotionOracle], inflation: float) -> np.ndarray:
    """Indices of cloud points inside some piece's position box grown by ``inflation``."""
    if isinstance(trajectory, MotionOracle):
        trajectory = trajectory.trajectory
    if not inflation >= 0:
        raise InputError(f"inflation must be non-negative, got {inflation!r}")
    pts = np.asarray(cloud, dtype=np.float64).reshape(-1, 3)
    if not len(pts):
        return np.zeros(0, dtype=np.intp)
    boxes = trajectory.piece_bounds()
    lo = boxes[:, 0] - inflation
    hi = boxes[:, 1] + inflation
    inside = np.zeros(len(pts), dtype=bool)
    for box_lo, box_hi in zip(lo, hi):
        inside |= np.all((pts >= box_lo) & (pts <= box_hi), axis=1)
    return np.flatnonzero(inside)


# ---- Grids ----


@dataclass(frozen=True)
class SweptGrid:
    """Node-centered samples of the swept SDF.

    ``values`` has shape ``(nz, ny, nx)`` so that x varies fastest in memory.
    """

    origin: np.ndarray
    spacing: float
    values: np.ndarray

    @property
    def shape(self) -> Tuple[int, int, int]:
        """``(nx, ny, nz)``."""
        nz, ny, nx = self.values.shape
        return nx, ny, nz

    def axis(self, k: int) -> np.ndarray:
        return self.origin[k] + self.spacing * np.arange(self.shape[k])

    def points(self) -> np.ndarray:
        """All node positions in storage order."""
        zz, yy, xx = np.meshgrid(self.axis(2), self.axis(1), self.axis(0), indexing="ij")
        return np.stack([xx.ravel(), yy.ravel(), zz.ravel()], axis=1)


def grid_shape(bounds, resolution: float) -> Tuple[np.ndarray, Tuple[int, int, int]]:
    bounds = np.asarray(bounds, dtype=np.float64).reshape(2, 3)
    if not (resolution > 0 and np.isfinite(resolution)):
        raise InputError(f"resolution must be positive, got {resolution!r}")
    if not np.all(np.isfinite(bounds)) or np.any(bounds[1] < bounds[0]):
        raise InputError("grid bounds must be finite with min <= max")
    counts = np.floor((bounds[1] - bounds[0]) / resolution + 1e-9).astype(int) + 1
    return bounds[0], tuple(int(c) for c in counts)


def sweep_grid(engine: SweptSdfEngine, bounds, resolution: float, threads: int = 1) -> SweptGrid:
    """Sample the swept SDF on a regular grid.

    z-slices are evaluated in order; every slice starts each node from the ``t*``
    of the node below it, and the first slice is seeded.
    """
    origin, (nx, ny, nz) = grid_shape(bounds, resolution)
    xs = origin[0] + resolution * np.arange(nx)
    ys = origin[1] + resolution * np.arange(ny)
    yy, xx = np.meshgrid(ys, xs, indexing="ij")
    values = np.zeros((nz, ny, nx))
    previous = None
    for k in range(nz):
        z = origin[2] + resolution * k
        plane = np.stack([xx.ravel(), yy.ravel(), np.full(xx.size, z)], axis=1)
        batch = engine.query_many(plane, threads=threads, t_init=previous)
        values[k] = batch.f_star.reshape(ny, nx)
        previous = batch.t_star
    _logger.info("Sampled %d x %d x %d swept-SDF grid", nx, ny, nz)
    return SweptGrid(origin, float(resolution), values)


_GRID_MAGIC = "SWEPT_SDF_GRID 1"


def write_grid(grid: SweptGrid, path: PathLike) -> None:
    """Text header, then little-endian float32 values with x fastest."""
    nx, ny, nz = grid.shape
    header = "\n".join(
        [
            _GRID_MAGIC,
            f"dimensions {nx} {ny} {nz}",
            "origin %.17g %.17g %.17g" % tuple(grid.origin),
            f"spacing {grid.spacing!r}",
            "data float32 little-endian x-fastest",
            "end_header",
        ]
    )
    Path(path).write_bytes(header.encode("ascii") + b"\n" + grid.values.astype("<f4").tobytes())


def read_grid(path: PathLike) -> SweptGrid:
    raw = Path(path).read_bytes()
    marker = b"end_header\n"
    split = raw.find(marker)
    if split < 0:
        raise InputError(f"{path}: missing grid header")
    fields = {}
    lines = raw[:split].decode("ascii").splitlines()
    if not lines or lines[0] != _GRID_MAGIC:
        raise InputError(f"{path}: not a swept SDF grid")
    for line in lines[1:]:
        key, _, rest = line.partition(" ")
        fields[key] = rest.split()
    try:
        nx, ny, nz = (int(v) for v in fields["dimensions"])
        origin = np.array([float(v) for v in fields["origin"]])
        spacing = float(fields["spacing"][0])
    except (KeyError, ValueError) as exc:
        raise InputError(f"{path}: malformed grid header: {exc}") from exc
    data = np.frombuffer(raw, dtype="<f4", offset=split + len(marker))
    if data.size != nx * ny * nz:
        raise InputError(f"{path}: expected {nx * ny * nz} values, found {data.size}")
    return SweptGrid(origin, spacing, data.astype(np.float64).reshape(nz, ny, nx))


def write_slice_csv(grid: SweptGrid, path: PathLike, z: float) -> pd.DataFrame:
    """Write the z-slice nearest to height ``z`` as ``x, y, z, f_star`` rows."""
    k = int(np.clip(np.rint((z - grid.origin[2]) / grid.spacing), 0, grid.shape[2] - 1))
    yy, xx = np.meshgrid(grid.axis(1), grid.axis(0), indexing="ij")
    frame = pd.DataFrame(
        {
            "x": xx.ravel(),
            "y": yy.ravel(),
            "z": np.full(xx.size, grid.axis(2)[k]),
            "f_star": grid.values[k].ravel(),
        }
    )
    frame.to_csv(path, index=False)
    return frame


# ---- Dense certifier ----


class ClearanceReport(NamedTuple):
    """Minimum body SDF over cloud points and time samples."""

    min_clearance: float
    point_index: int
    time: float
    checked_points: int
    samples: int

    def to_dict(self) -> dict:
        return {
            "min_clearance": self.min_clearance,
            "point_index": self.point_index,
            "time": self.time,
            "checked_points": self.checked_points,
            "samples": self.samples,
        }


def dense_clearance(
    index: MeshDistanceIndex,
    motion: MotionOracle,
    cloud,
    dt: float,
    cutoff: Optional[float] = None,
) -> ClearanceReport:
    """Brute-force clearance check at uniform time samples.

    Args:
        dt: sample interval; ``t_max`` is always sampled.
        cutoff: when given, points provably farther than ``cutoff`` from the body
            at all times are skipped; if every point is skipped the reported
            clearance is ``inf``.
    """
    if not dt > 0:
        raise InputError(f"dt must be positive, got {dt!r}")
    pts = np.asarray(cloud, dtype=np.float64).reshape(-1, 3)
    candidates = np.arange(len(pts))
    if cutoff is not None and len(pts):
        candidates = select_obstacles(pts, motion, index.mesh.circumscribed_radius + cutoff)
    times = seed_grid(motion, dt)
    best = (np.inf, -1, float("nan"))
    if candidates.size:
        subset = pts[candidates]
        per_call = max(1, _SAMPLE_BLOCK // len(subset))
        for lo in range(0, len(times), per_call):
            chunk = times[lo:lo + per_call]
            p, R = motion.pose(chunk)
            rel = np.einsum("sji,snj->sni", R, subset[None, :, :] - p[:, None, :])
            values = index.signed_distances(rel.reshape(-1, 3)).reshape(len(chunk), len(subset))
            flat = int(np.argmin(values))
            s, k = divmod(flat, len(subset))
            if values[s, k] < best[0]:
                best = (float(values[s, k]), int(candidates[k]), float(chunk[s]))
    _logger.info("Dense check: %d points x %d samples, clearance %.6g", candidates.size, len(times), best[0])
    return ClearanceReport(best[0], best[1], best[2], int(candidates.size), int(len(times)))
