"""
Quadrotor differential flatness with zero yaw.

The body z-axis follows the mass-normalized thrust ``f = a + g e3``. The attitude
is the shortest rotation taking ``e3`` onto ``z = f / |f|``:

    q = [1 + z_z, -z_y, z_x, 0] / sqrt(2 (1 + z_z))

so hovering gives the identity and ``w >= 0`` always. Body rates follow from the
rate of change of ``z``, itself a function of jerk. Every function broadcasts over
leading dimensions of ``(..., 3)`` inputs.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import NamedTuple

import numpy as np

from swept_sdf.exceptions import FlatnessSingularityError, InputError

_logger = logging.getLogger(__name__)
_logger.addHandler(logging.NullHandler())

GRAVITY = 9.81
THRUST_EPS = 0.1
# z pointing straight down has no shortest rotation from e3
_TILT_EPS = 1e-9

_E3 = np.array([0.0, 0.0, 1.0])


def hat(v: np.ndarray) -> np.ndarray:
    """Cross-product matrices of ``(..., 3)`` vectors."""
    zero = np.zeros(v.shape[:-1])
    return np.stack(
        [
            np.stack([zero, -v[..., 2], v[..., 1]], axis=-1),
            np.stack([v[..., 2], zero, -v[..., 0]], axis=-1),
            np.stack([-v[..., 1], v[..., 0], zero], axis=-1),
        ],
        axis=-2,
    )


class _Frame(NamedTuple):
    z: np.ndarray
    z_dot: np.ndarray
    norm: np.ndarray
    projector: np.ndarray  # (I - z z^T) / |f|


def _frame(a, j=None, gravity: float = GRAVITY) -> _Frame:
    a = np.asarray(a, dtype=np.float64)
    f = a + gravity * _E3
    norm = np.linalg.norm(f, axis=-1)
    if np.any(norm <= THRUST_EPS):
        raise FlatnessSingularityError(
            f"flatness singularity: |a + g e3| = {float(np.min(norm)):.3g} <= {THRUST_EPS}"
        )
    z = f / norm[..., None]
    if np.any(1.0 + z[..., 2] <= _TILT_EPS):
        raise FlatnessSingularityError("flatness singularity: thrust points straight down")
    projector = (np.eye(3) - z[..., :, None] * z[..., None, :]) / norm[..., None, None]
    if j is None:
        z_dot = np.zeros_like(z)
    else:
        z_dot = np.einsum("...ij,...j->...i", projector, np.asarray(j, dtype=np.float64))
    return _Frame(z, z_dot, norm, projector)


def thrust(a, gravity: float = GRAVITY) -> np.ndarray:
    """Mass-normalized thrust magnitude ``|a + g e3|`` (no singularity check)."""
    return np.linalg.norm(np.asarray(a, dtype=np.float64) + gravity * _E3, axis=-1)


def rotation_from_quaternion(q) -> np.ndarray:
    """Rotation matrix of a ``[w, x, y, z]`` quaternion (renormalized first)."""
    q = np.asarray(q, dtype=np.float64)
    norm = np.linalg.norm(q, axis=-1)
    if np.any(norm == 0.0):
        raise InputError("zero quaternion has no rotation")
    w, x, y, z = np.moveaxis(q / norm[..., None], -1, 0)
    return np.stack(
        [
            np.stack([1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)], axis=-1),
            np.stack([2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)], axis=-1),
            np.stack([2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)], axis=-1),
        ],
        axis=-2,
    )


def rotation_quaternion_jacobian(q) -> np.ndarray:
    """Derivative of the rotation matrix polynomial in ``q``, shape ``(..., 4, 3, 3)``.

    Entry ``[..., m, :, :]`` is ``dR/dq_m``. No renormalization is applied, so the
    result is exact for unit quaternions.
    """
    q = np.asarray(q, dtype=np.float64)
    w, x, y, z = np.moveaxis(q, -1, 0)
    zero = np.zeros_like(w)

    def mat(rows):
        return 2.0 * np.stack([np.stack(row, axis=-1) for row in rows], axis=-2)

    d_w = mat([[zero, -z, y], [z, zero, -x], [-y, x, zero]])
    d_x = mat([[zero, y, z], [y, -2 * x, -w], [z, w, -2 * x]])
    d_y = mat([[-2 * y, x, w], [x, zero, z], [-w, z, -2 * y]])
    d_z = mat([[-2 * z, -w, x], [w, -2 * z, y], [x, y, zero]])
    return np.stack([d_w, d_x, d_y, d_z], axis=-3)


def _tilt_quaternion(z: np.ndarray) -> np.ndarray:
    scale = np.sqrt(2.0 * (1.0 + z[..., 2]))
    u = np.stack([1.0 + z[..., 2], -z[..., 1], z[..., 0], np.zeros(z.shape[:-1])], axis=-1)
    return u / scale[..., None]


def flat_to_attitude(a, yaw: float = 0.0, gravity: float = GRAVITY) -> np.ndarray:
    """Attitude quaternion ``[w, x, y, z]`` (``w >= 0``) for acceleration ``a``.

    Args:
        a: ``(..., 3)`` accelerations in m/s^2.
        yaw: heading about world z in radians.

    Raises:
        FlatnessSingularityError: ``|a + g e3| <= THRUST_EPS``.
    """
    tilt = _tilt_quaternion(_frame(a, gravity=gravity).z)
    if yaw == 0.0:
        return tilt
    # tilt (x) yaw-about-z keeps the body z-axis while turning the heading
    c, s = np.cos(0.5 * yaw), np.sin(0.5 * yaw)
    w, x, y, _ = np.moveaxis(tilt, -1, 0)
    quat = np.stack([w * c, x * c + y * s, y * c - x * s, w * s], axis=-1)
    return np.where(quat[..., :1] < 0, -quat, quat)


def _omega_from_frame(frame: _Frame) -> np.ndarray:
    z, zd = frame.z, frame.z_dot
    k = 1.0 / (1.0 + z[..., 2])
    return np.stack(
        [
            -zd[..., 1] + z[..., 1] * zd[..., 2] * k,
            zd[..., 0] - z[..., 0] * zd[..., 2] * k,
            (z[..., 1] * zd[..., 0] - z[..., 0] * zd[..., 1]) * k,
        ],
        axis=-1,
    )


def flat_to_omega(a, j, yaw_rate: float = 0.0, gravity: float = GRAVITY) -> np.ndarray:
    """Body rate ``omega`` with ``dR/dt = R hat(omega)`` for zero yaw."""
    omega = _omega_from_frame(_frame(a, j, gravity))
    if yaw_rate:
        omega[..., 2] += yaw_rate
    return omega


class AttitudeJacobians(NamedTuple):
    """Derivatives of the flat map outputs with respect to acceleration and jerk."""

    dq_da: np.ndarray  # (..., 4, 3)
    dq_dj: np.ndarray  # (..., 4, 3), identically zero
    domega_da: np.ndarray  # (..., 3, 3)
    domega_dj: np.ndarray  # (..., 3, 3)
    dthrust_da: np.ndarray  # (..., 3)


def attitude_jacobians(a, j, gravity: float = GRAVITY) -> AttitudeJacobians:
    """Analytic Jacobians of quaternion, body rate and thrust."""
    frame = _frame(a, j, gravity)
    z, zd, norm, proj = frame
    jerk = np.asarray(j, dtype=np.float64) * np.ones_like(z)
    shape = z.shape[:-1]
    zero = np.zeros(shape)
    one = np.ones(shape)
    k = 1.0 / (1.0 + z[..., 2])
    k2 = k * k

    domega_dz = np.stack(
        [
            np.stack([zero, zd[..., 2] * k, -z[..., 1] * zd[..., 2] * k2], axis=-1),
            np.stack([-zd[..., 2] * k, zero, z[..., 0] * zd[..., 2] * k2], axis=-1),
            np.stack(
                [-zd[..., 1] * k, zd[..., 0] * k, -(z[..., 1] * zd[..., 0] - z[..., 0] * zd[..., 1]) * k2],
                axis=-1,
            ),
        ],
        axis=-2,
    )
    domega_dzd = np.stack(
        [
            np.stack([zero, -one, z[..., 1] * k], axis=-1),
            np.stack([one, zero, -z[..., 0] * k], axis=-1),
            np.stack([z[..., 1] * k, -z[..., 0] * k, zero], axis=-1),
        ],
        axis=-2,
    )
    # derivative of z_dot = (I - z z^T) j / |f| with respect to f at fixed j
    zj = np.einsum("...i,...i->...", z, jerk)
    outer_zj = z[..., :, None] * jerk[..., None, :]
    dzd_df = -(
        np.einsum("...ij,...jk->...ik", zj[..., None, None] * np.eye(3) + outer_zj, proj)
        + zd[..., :, None] * z[..., None, :]
    ) / norm[..., None, None]

    domega_da = np.einsum("...ij,...jk->...ik", domega_dz, proj) + np.einsum(
        "...ij,...jk->...ik", domega_dzd, dzd_df
    )
    domega_dj = np.einsum("...ij,...jk->...ik", domega_dzd, proj)

    scale = np.sqrt(2.0 * (1.0 + z[..., 2]))
    u = np.stack([1.0 + z[..., 2], -z[..., 1], z[..., 0], zero], axis=-1)
    du_dz = np.zeros(shape + (4, 3))
    du_dz[..., 0, 2] = 1.0
    du_dz[..., 1, 1] = -1.0
    du_dz[..., 2, 0] = 1.0
    dq_dz = du_dz / scale[..., None, None] - u[..., :, None] * _E3 / scale[..., None, None] ** 3
    dq_da = np.einsum("...ij,...jk->...ik", dq_dz, proj)
    return AttitudeJacobians(dq_da, np.zeros_like(dq_da), domega_da, domega_dj, z.copy())


def body_rate_derivative(a, j, snap, gravity: float = GRAVITY) -> np.ndarray:
    """Time derivative of the body rate given snap (the derivative of jerk)."""
    jac = attitude_jacobians(a, j, gravity)
    return np.einsum("...ij,...j->...i", jac.domega_da, np.asarray(j, dtype=np.float64)) + np.einsum(
        "...ij,...j->...i", jac.domega_dj, np.asarray(snap, dtype=np.float64)
    )


@dataclass(frozen=True)
class FlatState:
    """Full quadrotor state recovered from flat outputs at one or many instants."""

    p: np.ndarray
    v: np.ndarray
    a: np.ndarray
    j: np.ndarray
    quat: np.ndarray
    R: np.ndarray
    omega: np.ndarray
    thrust: np.ndarray


def flat_state(p, v, a, j, gravity: float = GRAVITY) -> FlatState:
    frame = _frame(a, j, gravity)
    quat = _tilt_quaternion(frame.z)
    return FlatState(
        p=np.asarray(p, dtype=np.float64),
        v=np.asarray(v, dtype=np.float64),
        a=np.asarray(a, dtype=np.float64),
        j=np.asarray(j, dtype=np.float64),
        quat=quat,
        R=rotation_from_quaternion(quat),
        omega=_omega_from_frame(frame),
        thrust=frame.norm,
    )
