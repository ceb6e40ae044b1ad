"""
Minimum-jerk piecewise-quintic trajectories.

A trajectory with ``M`` pieces is fixed by the ``M - 1`` interior waypoints, the
piece durations and the full start/end states (position, velocity, acceleration).
Its coefficients solve a banded linear system that clamps both ends, interpolates
every waypoint and keeps derivatives 0..4 continuous at each junction. That system
is also what :func:`propagate_grad` differentiates through, with one adjoint
solve.

Pieces are indexed from 0 and use the natural basis ``[1, t, ..., t**5]`` in local
time. Coefficients are stored as an ``(M, 6, 3)`` array.
"""
from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from math import factorial
from pathlib import Path
from typing import Optional, Tuple, Union

import numpy as np
from scipy.linalg import solve_banded

from swept_sdf.exceptions import TrajectoryError

_logger = logging.getLogger(__name__)
_logger.addHandler(logging.NullHandler())

DEGREE = 5
N_COEFFS = DEGREE + 1
LOWER_BANDWIDTH = 4
UPPER_BANDWIDTH = 2

PathLike = Union[str, Path]


def _vec3(value, name) -> np.ndarray:
    arr = np.array(value, dtype=np.float64).reshape(-1)
    if arr.shape != (3,) or not np.all(np.isfinite(arr)):
        raise TrajectoryError(f"{name} must be a finite 3-vector")
    return arr


@dataclass(frozen=True)
class BoundaryState:
    """Clamped position, velocity and acceleration at one end of a trajectory."""

    position: np.ndarray
    velocity: np.ndarray = field(default_factory=lambda: np.zeros(3))
    acceleration: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self):
        for name in ("position", "velocity", "acceleration"):
            arr = _vec3(getattr(self, name), name)
            arr.setflags(write=False)
            object.__setattr__(self, name, arr)

    def as_array(self) -> np.ndarray:
        """``(3, 3)`` rows of position, velocity, acceleration."""
        return np.stack([self.position, self.velocity, self.acceleration])

    def to_dict(self) -> dict:
        return {
            "position": self.position.tolist(),
            "velocity": self.velocity.tolist(),
            "acceleration": self.acceleration.tolist(),
        }

    @classmethod
    def from_dict(cls, data: dict) -> "BoundaryState":
        return cls(
            data["position"],
            data.get("velocity", (0.0, 0.0, 0.0)),
            data.get("acceleration", (0.0, 0.0, 0.0)),
        )


def basis(tau, order: int = 0) -> np.ndarray:
    """Derivative ``order`` of ``[1, t, ..., t**5]`` at local times ``tau``.

    Returns:
        numpy.ndarray: shape ``tau.shape + (6,)``.
    """
    tau = np.asarray(tau, dtype=np.float64)
    out = np.zeros(tau.shape + (N_COEFFS,))
    for n in range(order, N_COEFFS):
        out[..., n] = factorial(n) / factorial(n - order) * tau ** (n - order)
    return out


class _MincoSystem:
    """Sparse entries of the banded constraint matrix for a set of durations."""

    def __init__(self, durations: np.ndarray):
        m = len(durations)
        self.size = N_COEFFS * m
        rows, cols, vals = [], [], []
        # (row, piece, derivative order) of every row evaluated at the end of a piece
        self.end_rows = []

        def put(row, col, value):
            rows.append(row)
            cols.append(col)
            vals.append(value)

        for k in range(3):
            put(k, k, float(factorial(k)))
        for i in range(m - 1):
            base = N_COEFFS * i + 3
            end = [basis(durations[i], k) for k in range(5)]
            for n in range(N_COEFFS):
                put(base, N_COEFFS * i + n, end[0][n])
            self.end_rows.append((base, i, 0))
            for k in range(5):
                row = base + 1 + k
                for n in range(k, N_COEFFS):
                    put(row, N_COEFFS * i + n, end[k][n])
                put(row, N_COEFFS * (i + 1) + k, -float(factorial(k)))
                self.end_rows.append((row, i, k))
        for k in range(3):
            row = self.size - 3 + k
            end = basis(durations[m - 1], k)
            for n in range(k, N_COEFFS):
                put(row, N_COEFFS * (m - 1) + n, end[n])
            self.end_rows.append((row, m - 1, k))

        rows = np.array(rows)
        cols = np.array(cols)
        vals = np.array(vals)
        self.banded = np.zeros((LOWER_BANDWIDTH + UPPER_BANDWIDTH + 1, self.size))
        self.banded[UPPER_BANDWIDTH + rows - cols, cols] = vals
        self.banded_t = np.zeros((LOWER_BANDWIDTH + UPPER_BANDWIDTH + 1, self.size))
        self.banded_t[LOWER_BANDWIDTH + cols - rows, rows] = vals

    def solve(self, rhs):
        return solve_banded((LOWER_BANDWIDTH, UPPER_BANDWIDTH), self.banded, rhs)

    def solve_adjoint(self, rhs):
        return solve_banded((UPPER_BANDWIDTH, LOWER_BANDWIDTH), self.banded_t, rhs)


class Trajectory:
    """Piecewise-quintic trajectory in 3D.

    Args:
        coeffs: ``(M, 6, 3)`` coefficients in the local basis of each piece.
        durations: ``(M,)`` strictly positive piece durations in seconds.
        start, end: clamped boundary states; required for gradient propagation.
        minco: whether ``coeffs`` solve the minimum-jerk system for ``durations``,
            ``start``, ``end`` and the junction positions.
    """

    def __init__(
        self,
        coeffs,
        durations,
        start: Optional[BoundaryState] = None,
        end: Optional[BoundaryState] = None,
        minco: bool = False,
    ):
        coeffs = np.array(coeffs, dtype=np.float64)
        durations = np.array(durations, dtype=np.float64).reshape(-1)
        if coeffs.ndim != 3 or coeffs.shape[1:] != (N_COEFFS, 3):
            raise TrajectoryError(f"coefficients must have shape (M, 6, 3), got {coeffs.shape}")
        if len(durations) != len(coeffs) or len(durations) == 0:
            raise TrajectoryError("need one positive duration per piece")
        if not np.all(np.isfinite(durations)) or np.any(durations <= 0):
            raise TrajectoryError(f"non-positive duration in {durations.tolist()}")
        coeffs.setflags(write=False)
        durations.setflags(write=False)
        self.coeffs = coeffs
        self.durations = durations
        self.start = start
        self.end = end
        self.minco = bool(minco and start is not None and end is not None)
        self._offsets = np.concatenate([[0.0], np.cumsum(durations)[:-1]])
        self._cumulative = np.cumsum(durations)
        self._system = None

    @classmethod
    def from_coefficients(cls, coeffs, durations) -> "Trajectory":
        """Wrap raw coefficients (no gradient propagation)."""
        return cls(coeffs, durations)

    def __repr__(self) -> str:
        return f"{type(self).__name__}(pieces={self.pieces}, duration={self.total_duration:.6g})"

    @property
    def pieces(self) -> int:
        return len(self.durations)

    @property
    def total_duration(self) -> float:
        return float(self._cumulative[-1])

    @property
    def start_times(self) -> np.ndarray:
        return self._offsets

    @property
    def waypoints(self) -> np.ndarray:
        """Junction positions, ``(M - 1, 3)``."""
        return np.einsum("mn,mnd->md", basis(self.durations[:-1]), self.coeffs[:-1])

    @property
    def system(self) -> _MincoSystem:
        if self._system is None:
            self._system = _MincoSystem(self.durations)
        return self._system

    # ---- evaluation ----

    def _check_times(self, ts: np.ndarray):
        if ts.size and (np.any(~np.isfinite(ts)) or ts.min() < 0.0 or ts.max() > self.total_duration):
            raise TrajectoryError(f"time outside [0, {self.total_duration:.17g}]")

    def locate_many(self, ts) -> Tuple[np.ndarray, np.ndarray]:
        ts = np.asarray(ts, dtype=np.float64)
        self._check_times(ts)
        pieces = np.minimum(np.searchsorted(self._cumulative, ts, side="right"), self.pieces - 1)
        return pieces, ts - self._offsets[pieces]

    def locate_piece(self, t: float) -> Tuple[int, float]:
        """Piece index (0-based) and local time; ``t = T_total`` maps to the last piece."""
        pieces, local = self.locate_many(np.array([t]))
        return int(pieces[0]), float(local[0])

    def eval_many(self, ts, order: int = 0) -> np.ndarray:
        """Derivative ``order`` (0..5) at each time, ``(n, 3)``."""
        if not 0 <= order <= DEGREE:
            raise TrajectoryError(f"derivative order must be in 0..{DEGREE}, got {order}")
        pieces, local = self.locate_many(np.atleast_1d(ts))
        return np.einsum("in,ind->id", basis(local, order), self.coeffs[pieces])

    def eval(self, t: float, order: int = 0) -> np.ndarray:
        return self.eval_many(np.array([t], dtype=np.float64), order)[0]

    def eval_local(self, pieces, local, order: int = 0) -> np.ndarray:
        """Derivative ``order`` at local times of given pieces (no range check)."""
        return np.einsum("in,ind->id", basis(local, order), self.coeffs[pieces])

    def piece_bounds(self) -> np.ndarray:
        """Exact position AABB of every piece, ``(M, 2, 3)``."""
        out = np.zeros((self.pieces, 2, 3))
        derivative = np.arange(1, N_COEFFS)[:, None] * self.coeffs[:, 1:]
        for i, duration in enumerate(self.durations):
            for axis in range(3):
                roots = np.polynomial.polynomial.polyroots(derivative[i, :, axis])
                roots = roots.real[(np.abs(roots.imag) < 1e-12) & (roots.real > 0) & (roots.real < duration)]
                ts = np.concatenate([[0.0, duration], roots])
                values = basis(ts) @ self.coeffs[i, :, axis]
                out[i, 0, axis] = values.min()
                out[i, 1, axis] = values.max()
        return out

    # ---- serialization ----

    def to_dict(self) -> dict:
        data = {
            "pieces": self.pieces,
            "durations": self.durations.tolist(),
            "coeffs": self.coeffs.tolist(),
        }
        if self.start is not None and self.end is not None:
            data["boundary"] = {"start": self.start.to_dict(), "end": self.end.to_dict()}
        data["minco"] = self.minco
        return data

    @classmethod
    def from_dict(cls, data: dict) -> "Trajectory":
        try:
            coeffs = data["coeffs"]
            durations = data["durations"]
            pieces = int(data.get("pieces", len(durations)))
            boundary = data.get("boundary")
            start = BoundaryState.from_dict(boundary["start"]) if boundary else None
            end = BoundaryState.from_dict(boundary["end"]) if boundary else None
        except (KeyError, TypeError, ValueError) as exc:
            raise TrajectoryError(f"malformed trajectory document: {exc}") from exc
        if pieces != len(durations):
            raise TrajectoryError(f"document declares {pieces} pieces but has {len(durations)} durations")
        return cls(coeffs, durations, start, end, minco=bool(data.get("minco", boundary is not None)))

    def to_json(self) -> str:
        # json writes floats with repr, which round-trips doubles exactly
        return json.dumps(self.to_dict())

    @classmethod
    def from_json(cls, text: str) -> "Trajectory":
        try:
            data = json.loads(text)
        except json.JSONDecodeError as exc:
            raise TrajectoryError(f"invalid trajectory JSON: {exc}") from exc
        return cls.from_dict(data)

    def save(self, path: PathLike) -> None:
        Path(path).write_text(self.to_json())

    @classmethod
    def load(cls, path: PathLike) -> "Trajectory":
        try:
            text = Path(path).read_text()
        except OSError as exc:
            raise TrajectoryError(f"cannot read trajectory {path}: {exc}") from exc
        return cls.from_json(text)


def minco_construct(waypoints, durations, start: BoundaryState, end: BoundaryState) -> Trajectory:
    """Minimum-jerk trajectory through ``waypoints`` with the given piece durations.

    Args:
        waypoints: ``(M - 1, 3)`` interior waypoints.
        durations: ``(M,)`` positive durations.
        start, end: clamped boundary states.

    Returns:
        Trajectory: coefficients from one banded LU solve.

    Raises:
        TrajectoryError: bad shapes or non-positive durations.
    """
    durations = np.array(durations, dtype=np.float64).reshape(-1)
    m = len(durations)
    if m < 1:
        raise TrajectoryError("a trajectory needs at least one piece")
    if not np.all(np.isfinite(durations)) or np.any(durations <= 0):
        raise TrajectoryError(f"non-positive duration in {durations.tolist()}")
    waypoints = np.array(waypoints, dtype=np.float64).reshape(-1, 3) if m > 1 else np.zeros((0, 3))
    if waypoints.shape != (m - 1, 3):
        raise TrajectoryError(f"expected {m - 1} interior waypoints, got {len(waypoints)}")
    if not np.all(np.isfinite(waypoints)):
        raise TrajectoryError("waypoints must be finite")

    system = _MincoSystem(durations)
    rhs = np.zeros((system.size, 3))
    rhs[:3] = start.as_array()
    rhs[N_COEFFS * np.arange(m - 1) + 3] = waypoints
    rhs[-3:] = end.as_array()
    try:
        coeffs = system.solve(rhs)
    except np.linalg.LinAlgError as exc:
        raise TrajectoryError(f"singular trajectory system: {exc}") from exc
    traj = Trajectory(coeffs.reshape(m, N_COEFFS, 3), durations, start, end, minco=True)
    traj._system = system
    return traj


def propagate_grad(traj: Trajectory, grad_coeffs, grad_durations) -> Tuple[np.ndarray, np.ndarray]:
    """Pull gradients on coefficients back onto waypoints and durations.

    Args:
        traj: trajectory from :func:`minco_construct`.
        grad_coeffs: ``(M, 6, 3)`` gradient of a cost with respect to the coefficients.
        grad_durations: ``(M,)`` explicit gradient with respect to durations at fixed
            coefficients.

    Returns:
        tuple: ``(dH/dq, dH/dT)`` with shapes ``(M - 1, 3)`` and ``(M,)``.
    """
    if not traj.minco:
        raise TrajectoryError("gradient propagation needs a trajectory built by minco_construct")
    m = traj.pieces
    grad_coeffs = np.asarray(grad_coeffs, dtype=np.float64)
    grad_durations = np.asarray(grad_durations, dtype=np.float64).reshape(-1)
    if grad_coeffs.shape != (m, N_COEFFS, 3) or grad_durations.shape != (m,):
        raise TrajectoryError(
            f"gradient shapes {grad_coeffs.shape} and {grad_durations.shape} do not match {m} pieces"
        )
    adjoint = traj.system.solve_adjoint(grad_coeffs.reshape(-1, 3))
    grad_q = adjoint[N_COEFFS * np.arange(m - 1) + 3].copy()
    grad_T = grad_durations.copy()
    for row, piece, order in traj.system.end_rows:
        rate = basis(traj.durations[piece], order + 1) @ traj.coeffs[piece]
        grad_T[piece] -= adjoint[row] @ rate
    return grad_q, grad_T
