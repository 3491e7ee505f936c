"""Shape matching, rigid stepping, collision response."""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from surfelsim.errors import DegenerateGeometryError
from surfelsim.geometry import quat_to_matrix
from surfelsim.sdf import PlaneSdf
from surfelsim.solvers.rigid import RigidState, resolve_collisions, rigid_step, shape_match


def cube_particles(n_side=4, spacing=0.02, center=(0, 0, 0)):
    ax = (np.arange(n_side) - (n_side - 1) / 2) * spacing
    pts = np.stack(np.meshgrid(ax, ax, ax, indexing="ij"), axis=-1).reshape(-1, 3)
    return pts + np.asarray(center, dtype=float)


def make_state(pts, velocity=(0, 0, 0)):
    n = len(pts)
    return RigidState(
        rest_positions=pts.copy(),
        positions=pts.copy(),
        velocities=np.tile(np.asarray(velocity, dtype=float), (n, 1)),
        masses=np.full(n, 0.01),
    )


# ------------------------------------------------------------ shape_match


def test_shape_match_pure_translation():
    rest = cube_particles()
    q, t = shape_match(rest, rest + (1.0, 2.0, 3.0), np.ones(len(rest)))
    np.testing.assert_allclose(q, [1, 0, 0, 0], atol=1e-12)
    np.testing.assert_allclose(t, [1, 2, 3], atol=1e-12)


def test_shape_match_recovers_90deg_rotation():
    rest = cube_particles()
    s = np.sqrt(0.5)
    q_true = np.array([s, 0, 0, s])  # 90 deg about z
    rotated = rest @ quat_to_matrix(q_true).T
    q, t = shape_match(rest, rotated, np.ones(len(rest)))
    np.testing.assert_allclose(q, q_true, atol=1e-6)
    np.testing.assert_allclose(t, 0.0, atol=1e-9)


def test_shape_match_noise_robust():
    rng = np.random.default_rng(11)
    rest = cube_particles(n_side=5)
    noisy = rest + rng.normal(scale=1e-3, size=rest.shape)
    q, _ = shape_match(rest, noisy, np.ones(len(rest)))
    r = quat_to_matrix(q)
    assert np.abs(r - np.eye(3)).max() < 1e-2


def test_shape_match_rejects_collinear():
    line = np.stack([np.linspace(0, 1, 8), np.zeros(8), np.zeros(8)], axis=1)
    with pytest.raises(DegenerateGeometryError):
        shape_match(line, line, np.ones(8))


@settings(deadline=None, max_examples=50)
@given(
    st.tuples(*[st.floats(min_value=-1, max_value=1, allow_nan=False) for _ in range(4)])
    .filter(lambda t: sum(x * x for x in t) > 1e-3),
    st.tuples(*[st.floats(min_value=-5, max_value=5, allow_nan=False) for _ in range(3)]),
)
def test_shape_match_recovers_any_rigid_transform(raw_q, trans):
    q_true = np.asarray(raw_q) / np.linalg.norm(raw_q)
    if q_true[0] < 0:
        q_true = -q_true
    rest = cube_particles()
    moved = rest @ quat_to_matrix(q_true).T + trans
    q, t = shape_match(rest, moved, np.ones(len(rest)))
    assert min(np.abs(q - q_true).max(), np.abs(q + q_true).max()) < 1e-6
    np.testing.assert_allclose(t, trans, atol=1e-6)


# ------------------------------------------------------------ rigid_step


def test_step_noop_without_forces():
    state = make_state(cube_particles(center=(0, 0, 1)))
    out = rigid_step(state, np.zeros_like(state.positions), 1e-3)
    np.testing.assert_allclose(out.positions, state.positions, atol=1e-12)
    np.testing.assert_allclose(out.velocities, 0.0, atol=1e-12)


def test_ballistic_drop_matches_half_g_t_squared():
    state = make_state(cube_particles(center=(0, 0, 10)))
    g = np.array([0, 0, -9.8])
    dt = 1e-3
    forces = state.masses[:, None] * g
    z0 = state.positions[:, 2].mean()
    for _ in range(1000):  # 1 second
        state = rigid_step(state, forces, dt)
    drop = z0 - state.positions[:, 2].mean()
    expected = 0.5 * 9.8 * 1.0**2
    assert abs(drop - expected) / expected < 0.01


def test_pure_torque_keeps_center_fixed():
    pts = cube_particles(n_side=3, spacing=0.1)
    state = make_state(pts)
    com0 = state.positions.mean(axis=0)
    dt = 1e-3
    for _ in range(200):
        forces = np.zeros_like(state.positions)
        left = state.positions[:, 0] < com0[0] - 0.04
        right = state.positions[:, 0] > com0[0] + 0.04
        forces[left, 1] = -0.05
        forces[right, 1] = 0.05
        # exactly opposite net force by construction (symmetric sets)
        state = rigid_step(state, forces, dt)
    com = state.positions.mean(axis=0)
    np.testing.assert_allclose(com, com0, atol=1e-6)
    # and it actually rotated
    q, _ = shape_match(state.rest_positions, state.positions, state.masses)
    assert abs(q[0]) < 0.9999


def test_momentum_changes_by_impulse():
    state = make_state(cube_particles(center=(0, 0, 5)), velocity=(0.3, -0.1, 0.2))
    rng = np.random.default_rng(4)
    forces = rng.normal(size=state.positions.shape) * 0.01
    dt = 1e-3
    p0 = (state.masses[:, None] * state.velocities).sum(axis=0)
    out = rigid_step(state, forces, dt)
    p1 = (out.masses[:, None] * out.velocities).sum(axis=0)
    np.testing.assert_allclose(p1 - p0, forces.sum(axis=0) * dt, atol=1e-12)


def test_force_free_flight_preserves_rigidity_and_momentum():
    state = make_state(cube_particles(center=(0, 0, 2)), velocity=(1.0, 0.5, 0.0))
    # seed some spin via one asymmetric kick
    forces = np.zeros_like(state.positions)
    forces[0] = (0, 0, 0.5)
    state = rigid_step(state, forces, 1e-3)
    p_ref = (state.masses[:, None] * state.velocities).sum(axis=0)
    zero = np.zeros_like(state.positions)
    for _ in range(500):
        state = rigid_step(state, zero, 1e-3)
    p_end = (state.masses[:, None] * state.velocities).sum(axis=0)
    assert np.abs(p_end - p_ref).max() < 1e-8
    d_rest = np.linalg.norm(state.rest_positions[0] - state.rest_positions[-1])
    d_now = np.linalg.norm(state.positions[0] - state.positions[-1])
    assert abs(d_now - d_rest) / d_rest < 1e-6


def test_resting_body_settles_to_zero_velocity():
    floor = PlaneSdf(point=(0, 0, 0), normal=(0, 0, 1))
    pts = cube_particles(n_side=4, spacing=0.02, center=(0, 0, 0.031))
    state = make_state(pts)
    g = np.array([0, 0, -9.8])
    dt = 1e-3
    for _ in range(300):
        forces = state.masses[:, None] * g
        state = rigid_step(state, forces, dt, boundary=floor, friction=0.1)
    speed = np.linalg.norm(state.velocities, axis=1).max()
    assert speed < 1e-10
    assert state.positions[:, 2].min() > -1e-4


# ------------------------------------------------------ resolve_collisions


def test_penetrating_particle_projected_out():
    floor = PlaneSdf(point=(0, 0, 0), normal=(0, 0, 1))
    pts = np.array([[0.0, 0.0, -0.01], [0.0, 0.0, 0.05], [0.1, 0.0, 0.05], [0.0, 0.1, 0.05]])
    state = RigidState(pts.copy(), pts.copy(), np.tile([0.0, 0.0, -1.0], (4, 1)),
                       np.ones(4))
    out = resolve_collisions(state, floor, k=0.0)
    assert out.positions[0, 2] >= -1e-4
    assert out.velocities[0, 2] == 0.0
    # untouched particle keeps its velocity
    np.testing.assert_array_equal(out.velocities[1], [0, 0, -1.0])


def test_frictionless_keeps_tangential_velocity():
    floor = PlaneSdf(point=(0, 0, 0), normal=(0, 0, 1))
    pts = np.array([[0.0, 0.0, -0.005], [0.1, 0.0, 0.05], [0.0, 0.1, 0.05]])
    vel = np.tile([0.7, -0.2, -0.5], (3, 1))
    state = RigidState(pts.copy(), pts.copy(), vel, np.ones(3))
    out = resolve_collisions(state, floor, k=0.0)
    np.testing.assert_allclose(out.velocities[0], [0.7, -0.2, 0.0], atol=1e-12)


def test_sliding_slab_decelerates_at_k_g():
    # One flat layer of particles on the floor: every particle is a
    # contact, so Coulomb friction must brake at k*g per unit time.
    floor = PlaneSdf(point=(0, 0, 0), normal=(0, 0, 1))
    ax = np.arange(5) * 0.02
    pts = np.stack(np.meshgrid(ax, ax, [0.0], indexing="ij"), axis=-1).reshape(-1, 3)
    state = make_state(pts, velocity=(1.0, 0, 0))
    g = np.array([0, 0, -9.8])
    k = 0.1
    dt = 1e-3
    steps = 400
    for _ in range(steps):
        forces = state.masses[:, None] * g
        vel = state.velocities + forces / state.masses[:, None] * dt
        state = RigidState(state.rest_positions, state.positions + vel * dt, vel,
                           state.masses)
        state = resolve_collisions(state, floor, k=k)
    v_end = state.velocities[:, 0].mean()
    expected = 1.0 - k * 9.8 * steps * dt
    assert v_end == pytest.approx(expected, abs=0.01)
