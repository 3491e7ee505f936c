"""Signed distance boundaries: planes, point clouds, voxel grids."""

import numpy as np
import pytest

from surfelsim.scene.procedural import sample_sphere
from surfelsim.sdf import CompositeSdf, PlaneSdf, PointCloudSdf, VoxelSdf


def test_plane_distance_and_normal():
    floor = PlaneSdf(point=(0, 0, 0), normal=(0, 0, 1))
    d = floor.signed_distance(np.array([[0, 0, 0.5], [0, 0, -0.2]]))
    np.testing.assert_allclose(d, [0.5, -0.2])
    n = floor.normal(np.array([[3, 1, 0.1]]))
    np.testing.assert_allclose(n, [[0, 0, 1]])


def test_point_cloud_sdf_sphere_surface():
    pts, _ = sample_sphere(0.1, (0, 0, 0), 0.01)
    sdf = PointCloudSdf(pts, radius=0.005)
    probe = np.array([[0.2, 0.0, 0.0]])
    assert sdf.signed_distance(probe)[0] == pytest.approx(0.095, abs=2e-3)
    n = sdf.normal(probe)
    np.testing.assert_allclose(n[0], [1, 0, 0], atol=0.05)


def test_voxel_sdf_sphere_inside_outside():
    pts, _ = sample_sphere(0.1, (0, 0, 0), 0.01)
    sdf = VoxelSdf.from_surfels(pts, lo=(-0.2, -0.2, -0.2), hi=(0.2, 0.2, 0.2),
                               cell=0.01, support_below=False)
    probes = np.array([
        [0.0, 0.0, 0.0],    # center, deep inside
        [0.15, 0.0, 0.0],   # clearly outside
    ])
    d = sdf.signed_distance(probes)
    assert d[0] < -0.05
    assert 0.02 < d[1] < 0.08
    # outside the sphere the normal points away from it
    rng = np.random.default_rng(0)
    outside = rng.normal(size=(30, 3))
    outside = 0.14 * outside / np.linalg.norm(outside, axis=1, keepdims=True)
    n = sdf.normal(outside)
    radial = outside / 0.14
    dots = np.sum(n * radial, axis=1)
    assert np.median(dots) > 0.7
    assert dots.min() > 0.0


def test_voxel_normal_matches_finite_difference_direction():
    pts, _ = sample_sphere(0.1, (0, 0, 0), 0.01)
    sdf = VoxelSdf.from_surfels(pts, lo=(-0.2, -0.2, -0.2), hi=(0.2, 0.2, 0.2),
                               cell=0.01, support_below=False)
    rng = np.random.default_rng(1)
    probes = rng.uniform(-0.12, 0.12, size=(40, 3))
    d0, n0 = sdf.query(probes)
    eps = 1e-6
    fd = np.zeros_like(probes)
    for axis in range(3):
        shifted = probes.copy()
        shifted[:, axis] += eps
        fd[:, axis] = (sdf.signed_distance(shifted) - d0) / eps
    mag = np.linalg.norm(fd, axis=1)
    strong = mag > 0.3  # away from flat spots of the trilinear field
    assert strong.sum() > 10
    np.testing.assert_allclose(fd[strong] / mag[strong, None], n0[strong], atol=1e-5)


def test_composite_takes_pointwise_min():
    floor = PlaneSdf(point=(0, 0, 0), normal=(0, 0, 1))
    wall = PlaneSdf(point=(-0.5, 0, 0), normal=(1, 0, 0))
    both = CompositeSdf([floor, wall])
    probes = np.array([[0.0, 0.0, 0.3], [-0.45, 0.0, 2.0]])
    d = both.signed_distance(probes)
    np.testing.assert_allclose(d, [0.3, 0.05])
    n = both.normal(probes)
    np.testing.assert_allclose(n[0], [0, 0, 1])
    np.testing.assert_allclose(n[1], [1, 0, 0])
