"""
Penalty terms of the trajectory optimization and their exact gradients.

The total cost is

    J = w_safety J_s + w_smooth J_m + w_feas J_d + w_time J_t

with ``J_s`` a cubic hinge on the swept-volume SDF of the selected obstacle points,
``J_m`` the integrated squared jerk, ``J_d`` cubic hinges on speed and thrust
sampled by the trapezoid rule and ``J_t`` the total duration. Every term returns
its gradient with respect to the coefficients and (explicitly) the durations;
:func:`total_cost` pulls both back to waypoints and durations through the
trajectory's linear system.
"""
from __future__ import annotations

import logging
from dataclasses import asdict, dataclass
from typing import NamedTuple, Optional

import numpy as np

from swept_sdf import flatness
from swept_sdf.exceptions import InputError
from swept_sdf.geometry import HESSIAN_STEP
from swept_sdf.sweep import AT_T_MAX, INTERIOR, SweptQueryResult, SweptSdfEngine
from swept_sdf.trajectory import N_COEFFS, Trajectory, basis, propagate_grad

_logger = logging.getLogger(__name__)
_logger.addHandler(logging.NullHandler())

_E3 = np.array([0.0, 0.0, 1.0])
_JERK_FACTORS = np.array([6.0, 24.0, 60.0])
_JERK_POWERS = np.arange(3)[:, None] + np.arange(3)[None, :] + 1


@dataclass(frozen=True)
class PlannerConfig:
    """Weights, limits and resolutions of the planning objective.

    Attributes:
        safety_weight, smoothness_weight, feasibility_weight, time_weight: penalty
            weights.
        safety_margin: required swept-SDF clearance ``s_thr`` in meters.
        v_max: speed limit in m/s.
        thrust_min, thrust_max: mass-normalized thrust limits in m/s^2.
        quadrature: trapezoid intervals per piece for the feasibility integral.
        inflation: obstacle-culling box inflation; ``None`` uses robot radius plus
            ``safety_margin``.
        segment_length: target length of one initial piece in meters.
        reselect_every: optimizer iterations between obstacle reselections.
        check_dt: time step of the final dense clearance check.
        degeneracy_tol: below this ``|K|`` the argmin-time gradients are zeroed.
        hessian_step: finite-difference step of the body SDF Hessian.
        include_tstar: assemble the safety gradient with explicit ``t*`` terms.
    """

    safety_weight: float = 1e4
    smoothness_weight: float = 1.0
    feasibility_weight: float = 1e3
    time_weight: float = 10.0
    safety_margin: float = 0.02
    v_max: float = 2.0
    thrust_min: float = 0.3 * flatness.GRAVITY
    thrust_max: float = flatness.GRAVITY + 3.0
    quadrature: int = 16
    inflation: Optional[float] = None
    segment_length: float = 1.0
    reselect_every: int = 10
    check_dt: float = 1e-3
    degeneracy_tol: float = 1e-9
    hessian_step: float = HESSIAN_STEP
    gravity: float = flatness.GRAVITY
    include_tstar: bool = True

    def __post_init__(self):
        for name in ("safety_weight", "smoothness_weight", "feasibility_weight", "time_weight"):
            if not getattr(self, name) >= 0:
                raise InputError(f"{name} must be non-negative, got {getattr(self, name)!r}")
        if not self.safety_margin > 0:
            raise InputError("safety_margin must be positive")
        if not self.v_max > 0:
            raise InputError("v_max must be positive")
        if not 0 < self.thrust_min < self.gravity < self.thrust_max:
            raise InputError("thrust limits must satisfy 0 < thrust_min < g < thrust_max")
        if self.quadrature < 8:
            raise InputError("quadrature needs at least 8 intervals per piece")
        if self.inflation is not None and not self.inflation >= 0:
            raise InputError("inflation must be non-negative")
        if not (self.segment_length > 0 and self.check_dt > 0 and self.hessian_step > 0):
            raise InputError("segment_length, check_dt and hessian_step must be positive")
        if self.reselect_every < 1:
            raise InputError("reselect_every must be at least 1")

    def inflation_for(self, radius: float) -> float:
        return self.inflation if self.inflation is not None else radius + self.safety_margin


class PenaltyTerm(NamedTuple):
    """Value of one penalty with gradients on coefficients and durations."""

    value: float
    grad_coeffs: np.ndarray
    grad_durations: np.ndarray


class SafetyTerm(NamedTuple):
    value: float
    grad_coeffs: np.ndarray
    grad_durations: np.ndarray
    active_obstacles: int
    boundary_argmin_count: int
    degenerate_count: int


class TstarGradients(NamedTuple):
    """Sensitivities of the argmin time to the flat state at ``t*``."""

    dp: np.ndarray
    dv: np.ndarray
    domega: np.ndarray
    dq: np.ndarray
    degenerate: np.ndarray


def _zeros(traj: Trajectory):
    return np.zeros((traj.pieces, N_COEFFS, 3)), np.zeros(traj.pieces)


def _tstar_partials(index, sample, x_ob, x_rel, grad, hessian_step, degeneracy_tol) -> TstarGradients:
    """Implicit-function derivatives of ``t*`` from ``df/dt(t*) = 0``."""
    R, v, a, omega = sample.R, sample.v, sample.a, sample.omega
    hess = index.sdf_hessians(x_rel, step=hessian_step)
    body_v = np.einsum("nji,nj->ni", R, v)
    body_a = np.einsum("nji,nj->ni", R, a)
    rate = -np.cross(omega, x_rel) - body_v
    omega_dot = flatness.body_rate_derivative(a, sample.j, sample.snap)
    rate_dot = (
        -np.cross(omega_dot, x_rel)
        + np.cross(omega, np.cross(omega, x_rel))
        + 2.0 * np.cross(omega, body_v)
        - body_a
    )
    h_rate = np.einsum("nij,nj->ni", hess, rate)
    curvature = np.einsum("ni,ni->n", rate, h_rate) + np.einsum("ni,ni->n", grad, rate_dot)

    dF_dp = np.einsum("nij,nj->ni", R, -h_rate - np.cross(omega, grad))
    dF_dv = -np.einsum("nij,nj->ni", R, grad)
    dF_domega = np.cross(grad, x_rel)
    dR = flatness.rotation_quaternion_jacobian(sample.quat)
    dRt_diff = np.einsum("nmkj,nk->nmj", dR, x_ob - sample.p)
    dRt_v = np.einsum("nmkj,nk->nmj", dR, v)
    dF_dq = np.einsum("nj,nmj->nm", h_rate, dRt_diff) + np.einsum(
        "nj,nmj->nm", grad, -np.cross(omega[:, None, :], dRt_diff) - dRt_v
    )

    degenerate = np.abs(curvature) < degeneracy_tol
    if degenerate.any():
        _logger.warning("Degenerate argmin curvature for %d obstacles; t* gradients zeroed", int(degenerate.sum()))
    scale = np.where(degenerate, 0.0, -1.0 / np.where(degenerate, 1.0, curvature))
    return TstarGradients(
        scale[:, None] * dF_dp,
        scale[:, None] * dF_dv,
        scale[:, None] * dF_domega,
        scale[:, None] * dF_dq,
        degenerate,
    )


def tstar_gradients(
    engine: SweptSdfEngine, result: SweptQueryResult, config: Optional[PlannerConfig] = None
) -> TstarGradients:
    """Derivatives of ``t*`` with respect to position, velocity, body rate and
    attitude quaternion at ``t*``, for an interior argmin.

    Raises:
        InputError: the argmin is pinned at a horizon end (its gradients are zero).
    """
    config = config or PlannerConfig()
    if not result.interior:
        raise InputError(f"argmin at {result.at_boundary}: t* gradients are zero there")
    sample = engine.motion.sample([result.t_star])
    x_rel = result.x_rel.reshape(1, 3)
    x_ob = sample.p + np.einsum("nij,nj->ni", sample.R, x_rel)
    out = _tstar_partials(
        engine.index, sample, x_ob, x_rel, result.grad_body.reshape(1, 3), config.hessian_step, config.degeneracy_tol
    )
    return TstarGradients(*(arr[0] for arr in out))


def safety_cost(
    engine: Optional[SweptSdfEngine],
    cloud,
    selected=None,
    config: Optional[PlannerConfig] = None,
    include_tstar: Optional[bool] = None,
    threads: int = 1,
) -> SafetyTerm:
    """Cubic hinge ``sum max(s_thr - f*, 0)^3`` over the selected obstacles.

    The gradient of each ``f*`` combines the partial derivatives at fixed ``t*``
    (translation and rotation of the body) with ``df/dt * dt*/dzeta`` for interior
    argmins when ``include_tstar`` is set; rotation and body-rate parts go through
    the flatness Jacobians onto acceleration and jerk.
    """
    config = config or PlannerConfig()
    include_tstar = config.include_tstar if include_tstar is None else include_tstar
    if engine is None:
        raise InputError("safety cost needs a swept SDF engine")
    traj = engine.motion.trajectory
    grad_c, grad_T = _zeros(traj)
    pts = np.asarray(cloud, dtype=np.float64).reshape(-1, 3)
    keys = np.arange(len(pts)) if selected is None else np.asarray(selected, dtype=np.intp)
    if not keys.size:
        return SafetyTerm(0.0, grad_c, grad_T, 0, 0, 0)

    batch = engine.query_many(pts[keys], keys=keys, threads=threads)
    violation = config.safety_margin - batch.f_star
    idx = np.flatnonzero(violation > 0)
    boundary_count = int(np.count_nonzero(batch.boundary[idx] != INTERIOR))
    if not idx.size:
        return SafetyTerm(0.0, grad_c, grad_T, 0, 0, 0)
    value = float(np.sum(violation[idx] ** 3))
    weight = -3.0 * violation[idx] ** 2

    ts = batch.t_star[idx]
    sample = engine.motion.sample(ts)
    x_ob = pts[keys[idx]]
    x_rel = batch.x_rel[idx]
    grad = batch.grad_body[idx]
    fdot = batch.f_dot[idx]

    g_p = -np.einsum("nij,nj->ni", sample.R, grad)
    dR = flatness.rotation_quaternion_jacobian(sample.quat)
    g_q = np.einsum("nj,nmkj,nk->nm", grad, dR, x_ob - sample.p)
    g_v = np.zeros_like(g_p)
    g_w = np.zeros_like(g_p)

    degenerate = 0
    if include_tstar:
        interior = np.flatnonzero(batch.boundary[idx] == INTERIOR)
        if interior.size:
            sub = type(sample)(*(arr[interior] for arr in sample))
            dts = _tstar_partials(
                engine.index, sub, x_ob[interior], x_rel[interior], grad[interior],
                config.hessian_step, config.degeneracy_tol,
            )
            rate = fdot[interior, None]
            g_p[interior] += rate * dts.dp
            g_v[interior] += rate * dts.dv
            g_w[interior] += rate * dts.domega
            g_q[interior] += rate * dts.dq
            degenerate = int(dts.degenerate.sum())

    jac = flatness.attitude_jacobians(sample.a, sample.j, config.gravity)
    g_a = np.einsum("nm,nmk->nk", g_q, jac.dq_da) + np.einsum("ni,nik->nk", g_w, jac.domega_da)
    g_j = np.einsum("ni,nik->nk", g_w, jac.domega_dj)

    pieces, local = traj.locate_many(ts)
    for order, g in enumerate((g_p, g_v, g_a, g_j)):
        contrib = weight[:, None, None] * basis(local, order)[:, :, None] * g[:, None, :]
        np.add.at(grad_c, pieces, contrib)

    # at fixed absolute t*, lengthening an earlier piece moves t* back in local time
    shift = weight * (
        np.einsum("ni,ni->n", g_p, sample.v)
        + np.einsum("ni,ni->n", g_v, sample.a)
        + np.einsum("ni,ni->n", g_a, sample.j)
        + np.einsum("ni,ni->n", g_j, sample.snap)
    )
    per_piece = np.bincount(pieces, weights=shift, minlength=traj.pieces)
    grad_T -= per_piece.sum() - np.cumsum(per_piece)
    # an argmin pinned at the end of the horizon follows the total duration
    pinned = batch.boundary[idx] == AT_T_MAX
    if pinned.any():
        grad_T += float(np.sum(weight[pinned] * fdot[pinned]))

    return SafetyTerm(value, grad_c, grad_T, int(idx.size), boundary_count, degenerate)


def smoothness_cost(traj: Trajectory) -> PenaltyTerm:
    """Integrated squared jerk in closed form, ``sum_i c_i^T Q(T_i) c_i``."""
    jerk_coeffs = traj.coeffs[:, 3:, :]
    factors = np.outer(_JERK_FACTORS, _JERK_FACTORS)
    gram = factors * traj.durations[:, None, None] ** _JERK_POWERS / _JERK_POWERS
    weighted = np.einsum("imn,ind->imd", gram, jerk_coeffs)
    value = float(np.einsum("imd,imd->", jerk_coeffs, weighted))
    grad_c, _ = _zeros(traj)
    grad_c[:, 3:, :] = 2.0 * weighted
    end_jerk = traj.eval_local(np.arange(traj.pieces), traj.durations, 3)
    return PenaltyTerm(value, grad_c, np.einsum("id,id->i", end_jerk, end_jerk))


def feasibility_cost(traj: Trajectory, config: Optional[PlannerConfig] = None) -> PenaltyTerm:
    """Trapezoid-rule integral of cubic hinges on ``|v|^2 - v_max^2`` and on thrust
    outside ``[thrust_min, thrust_max]``."""
    config = config or PlannerConfig()
    kappa = config.quadrature
    fractions = np.arange(kappa + 1) / kappa
    rule = np.full(kappa + 1, 1.0 / kappa)
    rule[[0, -1]] *= 0.5
    pieces = np.repeat(np.arange(traj.pieces), kappa + 1)
    local = (traj.durations[:, None] * fractions).ravel()
    frac = np.tile(fractions, traj.pieces)
    weights = (traj.durations[:, None] * rule).ravel()

    v = traj.eval_local(pieces, local, 1)
    a = traj.eval_local(pieces, local, 2)
    j = traj.eval_local(pieces, local, 3)
    speed = np.einsum("nd,nd->n", v, v) - config.v_max ** 2
    force = a + config.gravity * _E3
    thrust = np.linalg.norm(force, axis=1)
    axis = force / np.maximum(thrust, np.finfo(float).tiny)[:, None]
    over = thrust - config.thrust_max
    under = config.thrust_min - thrust

    def hinge(x):
        return np.maximum(x, 0.0) ** 3, 3.0 * np.maximum(x, 0.0) ** 2

    pen_v, dpen_v = hinge(speed)
    pen_hi, dpen_hi = hinge(over)
    pen_lo, dpen_lo = hinge(under)
    penalty = pen_v + pen_hi + pen_lo
    value = float(np.sum(weights * penalty))

    d_v = (2.0 * dpen_v)[:, None] * v
    d_a = (dpen_hi - dpen_lo)[:, None] * axis
    grad_c, _ = _zeros(traj)
    contrib = weights[:, None, None] * (
        basis(local, 1)[:, :, None] * d_v[:, None, :] + basis(local, 2)[:, :, None] * d_a[:, None, :]
    )
    np.add.at(grad_c, pieces, contrib)

    # nodes sit at fixed fractions of each piece, weights scale with its duration
    along = np.einsum("nd,nd->n", d_v, a) + np.einsum("nd,nd->n", d_a, j)
    per_node = weights * penalty / traj.durations[pieces] + weights * along * frac
    grad_T = np.bincount(pieces, weights=per_node, minlength=traj.pieces)
    return PenaltyTerm(value, grad_c, grad_T)


def time_cost(traj: Trajectory) -> PenaltyTerm:
    grad_c, _ = _zeros(traj)
    return PenaltyTerm(float(np.sum(traj.durations)), grad_c, np.ones(traj.pieces))


@dataclass(frozen=True)
class CostReport:
    """Weighted total cost with its components and gradients on ``(q, T)``."""

    total: float
    safety: float
    smoothness: float
    feasibility: float
    time: float
    grad_q: np.ndarray
    grad_T: np.ndarray
    active_obstacles: int = 0
    boundary_argmin_count: int = 0
    degenerate_count: int = 0

    def to_dict(self, include_gradients: bool = False) -> dict:
        data = asdict(self)
        data.pop("grad_q")
        data.pop("grad_T")
        data["grad_norm"] = float(np.sqrt(np.sum(self.grad_q ** 2) + np.sum(self.grad_T ** 2)))
        if include_gradients:
            data["grad_q"] = self.grad_q.tolist()
            data["grad_T"] = self.grad_T.tolist()
        return data


def total_cost(
    engine: Optional[SweptSdfEngine],
    traj: Trajectory,
    config: Optional[PlannerConfig] = None,
    cloud=None,
    selected=None,
    threads: int = 1,
    include_tstar: Optional[bool] = None,
) -> CostReport:
    """Weighted sum of all penalties with gradients on waypoints and durations.

    Without an engine or obstacle points the safety term is zero.
    """
    config = config or PlannerConfig()
    has_obstacles = cloud is not None and np.asarray(cloud).size and (selected is None or len(selected))
    if engine is not None and has_obstacles:
        if engine.motion.trajectory is not traj:
            engine.bind(traj)
        safety = safety_cost(engine, cloud, selected, config, include_tstar, threads)
    else:
        grad_c, grad_T = _zeros(traj)
        safety = SafetyTerm(0.0, grad_c, grad_T, 0, 0, 0)
    smooth = smoothness_cost(traj)
    feasible = feasibility_cost(traj, config)
    duration = time_cost(traj)

    weights = (config.safety_weight, config.smoothness_weight, config.feasibility_weight, config.time_weight)
    terms = (safety, smooth, feasible, duration)
    total = sum(w * term.value for w, term in zip(weights, terms))
    grad_c = sum(w * term.grad_coeffs for w, term in zip(weights, terms))
    grad_T = sum(w * term.grad_durations for w, term in zip(weights, terms))
    grad_q, grad_T = propagate_grad(traj, grad_c, grad_T)
    return CostReport(
        total=float(total),
        safety=safety.value,
        smoothness=smooth.value,
        feasibility=feasible.value,
        time=duration.value,
        grad_q=grad_q,
        grad_T=grad_T,
        active_obstacles=safety.active_obstacles,
        boundary_argmin_count=safety.boundary_argmin_count,
        degenerate_count=safety.degenerate_count,
    )
