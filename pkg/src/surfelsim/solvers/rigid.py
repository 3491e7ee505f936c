"""Shape-matching rigid body dynamics.

A rigid body is a particle set; every step integrates particles freely,
then projects them onto the best-fit rigid transform of the rest shape
(Mueller-style shape matching).  Velocities are recomputed from the
realized position change, which keeps momentum bookkeeping exact and
makes resting contact settle to literally zero velocity.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ..errors import DegenerateGeometryError
from ..geometry import matrix_to_quat, polar_rotation

_CONTACT_TOL = 1e-4


@dataclass
class RigidState:
    rest_positions: np.ndarray
    positions: np.ndarray
    velocities: np.ndarray
    masses: np.ndarray

    def __post_init__(self):
        self.rest_positions = np.asarray(self.rest_positions, dtype=np.float64)
        self.positions = np.asarray(self.positions, dtype=np.float64)
        self.velocities = np.asarray(self.velocities, dtype=np.float64)
        self.masses = np.asarray(self.masses, dtype=np.float64)
        if not (self.masses > 0).all():
            raise ValueError("rigid particle masses must be positive")
        self.rest_center = np.average(self.rest_positions, axis=0, weights=self.masses)

    def copy(self) -> "RigidState":
        return RigidState(
            self.rest_positions.copy(),
            self.positions.copy(),
            self.velocities.copy(),
            self.masses.copy(),
        )


def _fit_rotation(dr: np.ndarray, dx: np.ndarray, masses: np.ndarray) -> np.ndarray:
    # Collinear rest shapes leave the rotation about the line free.
    sv = np.linalg.svd(dr, compute_uv=False)
    if len(dr) < 3 or sv[1] < 1e-9 * max(sv[0], 1e-30):
        raise DegenerateGeometryError(
            "shape_match needs at least 3 non-collinear particles"
        )
    a_pq = (masses[:, None] * dx).T @ dr
    return polar_rotation(a_pq)


def shape_match(rest: np.ndarray, current: np.ndarray, masses: np.ndarray):
    """Best-fit rigid transform from rest to current positions.

    Returns (quaternion, translation) with current ~ R @ rest + t.  The
    rotation comes from the polar decomposition of the mass-weighted
    covariance, so it is always a proper rotation.
    """
    rest = np.asarray(rest, dtype=np.float64)
    current = np.asarray(current, dtype=np.float64)
    masses = np.asarray(masses, dtype=np.float64)
    r_bar = np.average(rest, axis=0, weights=masses)
    x_bar = np.average(current, axis=0, weights=masses)
    rot = _fit_rotation(rest - r_bar, current - x_bar, masses)
    return matrix_to_quat(rot), x_bar - rot @ r_bar


def _goal_positions(state: RigidState, predicted: np.ndarray):
    masses = state.masses
    x_bar = np.average(predicted, axis=0, weights=masses)
    dr = state.rest_positions - state.rest_center
    rot = _fit_rotation(dr, predicted - x_bar, masses)
    return dr @ rot.T + x_bar, rot


def rigid_step(state: RigidState, forces: np.ndarray, dt: float,
               boundary=None, friction: float = 0.0) -> RigidState:
    """Advance one substep; optionally resolve body-level boundary contact.

    Without a boundary this is plain shape matching: integrate, project
    onto the rigid fit, recompute velocities from the position delta
    (total momentum then changes by exactly sum(f)*dt).  With a boundary
    the whole body is translated out of the deepest penetration before
    the velocity recompute, so a body at rest on the floor ends the step
    with exactly zero velocity, and Coulomb friction drains tangential
    momentum in proportion to the resolved normal motion.
    """
    out = state.copy()
    vel = out.velocities + forces / out.masses[:, None] * dt
    if not vel.any():
        # Nothing can move; skip the fit so rest states stay bit-exact.
        return out
    predicted = out.positions + vel * dt
    goals, _ = _goal_positions(out, predicted)
    new_v = None

    if boundary is not None:
        d, n = boundary.query(goals)
        if (d < 0.0).any():
            deepest = int(np.argmin(d))
            n_hat = n[deepest]
            goals = goals - d[deepest] * n_hat
            new_v = (goals - out.positions) / dt
            if friction > 0.0:
                w = out.masses
                v_pre = np.average((predicted - out.positions) / dt, axis=0, weights=w)
                v_post = np.average(new_v, axis=0, weights=w)
                vn_removed = max(0.0, float((v_post - v_pre) @ n_hat))
                v_t = v_post - (v_post @ n_hat) * n_hat
                t_speed = float(np.linalg.norm(v_t))
                if vn_removed > 0.0 and t_speed > 1e-12:
                    scale = max(0.0, 1.0 - friction * vn_removed / t_speed)
                    new_v = new_v - (1.0 - scale) * v_t

    out.velocities = (goals - out.positions) / dt if new_v is None else new_v
    out.positions = goals
    return out


def resolve_collisions(state: RigidState, boundary, k: float = 0.1) -> RigidState:
    """Project penetrating particles to the surface and filter velocities.

    Per particle: clamp the inward normal velocity to zero and scale the
    tangential velocity by a Coulomb factor proportional to the removed
    normal speed.  k = 0 leaves tangential velocities untouched.
    """
    out = state.copy()
    d, n = boundary.query(out.positions)
    pen = d < 0.0
    if not pen.any():
        return out
    idx = np.where(pen)[0]
    out.positions[idx] -= d[idx, None] * n[idx]

    v = out.velocities[idx]
    vn = np.einsum("ij,ij->i", v, n[idx])
    inward = np.where(vn < 0.0)[0]
    if inward.size:
        j = idx[inward]
        removed = -vn[inward]
        v_t = out.velocities[j] - vn[inward, None] * n[j]  # inward normal part zeroed
        t_speed = np.linalg.norm(v_t, axis=1)
        safe = np.where(t_speed < 1e-12, 1.0, t_speed)
        scale = np.where(t_speed < 1e-12, 0.0, np.maximum(0.0, 1.0 - k * removed / safe))
        out.velocities[j] = v_t * scale[:, None]
    return out
