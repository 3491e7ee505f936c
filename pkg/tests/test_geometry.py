"""Quaternions, polar decomposition, camera frames."""

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from surfelsim.geometry import (
    look_at_matrix,
    matrix_to_quat,
    polar_rotation,
    quat_from_z_to,
    quat_multiply,
    quat_to_matrix,
    rotate_vectors,
)

unit_quats = (
    st.tuples(*[st.floats(min_value=-1, max_value=1, allow_nan=False) for _ in range(4)])
    .filter(lambda t: sum(x * x for x in t) > 1e-3)
    .map(lambda t: np.asarray(t) / np.linalg.norm(t))
)


def test_identity_quat_is_identity_matrix():
    np.testing.assert_allclose(quat_to_matrix(np.array([1.0, 0, 0, 0])), np.eye(3))


def test_quat_90deg_about_z():
    s = np.sqrt(0.5)
    q = np.array([s, 0, 0, s])
    r = quat_to_matrix(q)
    np.testing.assert_allclose(r @ [1, 0, 0], [0, 1, 0], atol=1e-12)


@given(unit_quats)
def test_quat_matrix_roundtrip(q):
    r = quat_to_matrix(q)
    q2 = matrix_to_quat(r)
    # q and -q encode the same rotation
    err = min(np.abs(q2 - q).max(), np.abs(q2 + q).max())
    assert err < 1e-7
    assert q2[0] >= 0  # canonical hemisphere


@given(unit_quats, unit_quats)
def test_quat_multiply_matches_matrix_product(qa, qb):
    lhs = quat_to_matrix(quat_multiply(qa, qb))
    rhs = quat_to_matrix(qa) @ quat_to_matrix(qb)
    np.testing.assert_allclose(lhs, rhs, atol=1e-9)


def test_polar_rotation_recovers_rotation():
    rng = np.random.default_rng(0)
    q = rng.normal(size=4)
    r = quat_to_matrix(q / np.linalg.norm(q))
    stretch = np.diag([1.5, 0.7, 1.1])
    np.testing.assert_allclose(polar_rotation(r @ stretch), r, atol=1e-10)


def test_polar_rotation_fixes_reflection():
    a = np.diag([1.0, 1.0, -1.0])
    r = polar_rotation(a)
    assert np.linalg.det(r) == pytest.approx(1.0)


def test_rotate_vectors_batch():
    s = np.sqrt(0.5)
    q = np.array([s, 0, 0, s])  # 90 deg about z
    vecs = np.array([[1.0, 0, 0], [0, 1.0, 0]])
    got = rotate_vectors(q, vecs)
    np.testing.assert_allclose(got, [[0, 1, 0], [-1, 0, 0]], atol=1e-12)


def test_look_at_centers_target():
    m = look_at_matrix((2.0, -1.0, 0.8), (0.1, 0.2, 0.3), (0, 0, 1))
    cam = m[:3, :3] @ np.array([0.1, 0.2, 0.3]) + m[:3, 3]
    assert cam[0] == pytest.approx(0.0, abs=1e-12)
    assert cam[1] == pytest.approx(0.0, abs=1e-12)
    assert cam[2] > 0  # target in front of the camera


def test_look_at_rejects_degenerate():
    with pytest.raises(ValueError):
        look_at_matrix((0, 0, 1), (0, 0, 0), up=(0, 0, 1))


def test_quat_from_z_to_aligns():
    targets = np.array([[1.0, 0, 0], [0, 1, 0], [0, 0, 1], [0, 0, -1], [1, 1, 1]])
    qs = quat_from_z_to(targets)
    for q, t in zip(qs, targets):
        z = quat_to_matrix(q) @ np.array([0.0, 0.0, 1.0])
        np.testing.assert_allclose(z, t / np.linalg.norm(t), atol=1e-9)
