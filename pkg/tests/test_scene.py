"""Scene construction, interior filling, binding, validation, file IO."""

import json
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from surfelsim.errors import NonWatertightError, SceneFormatError, SceneValidationError
from surfelsim.scene.fill import (
    bind_surfels,
    fill_interior,
    nearest_particles,
    particle_masses,
)
from surfelsim.scene.io import load_scene, save_scene, scene_from_json
from surfelsim.scene.procedural import (
    ProceduralSpec,
    cloth_grid,
    sample_box,
    sample_sphere,
)
from surfelsim.scene.types import Material, ObjectSurfels, SurfelCloud, undirected_edges
from surfelsim.scene.validate import validate_scene

from conftest import ball_scene


# ---------------------------------------------------------------- sampling


def test_sphere_surfel_count_matches_area_oracle():
    # Surface area / spacing^2 for r=0.1, h=0.01 gives 4*pi*100 ~ 1257.
    pts, normals = sample_sphere(0.1, (0, 0, 0), 0.01)
    expected = 4 * math.pi * 0.1**2 / 0.01**2
    assert abs(len(pts) - expected) / expected < 0.2
    assert len(pts) == 1257  # Fibonacci sampling rounds the oracle exactly
    radii = np.linalg.norm(pts, axis=1)
    np.testing.assert_allclose(radii, 0.1, rtol=1e-9)
    # normals point radially outward
    np.testing.assert_allclose(normals, pts / 0.1, atol=1e-12)


def test_box_sampling_covers_all_faces():
    pts, normals = sample_box((0.1, 0.1, 0.1), (0, 0, 0), 0.02)
    assert np.abs(np.abs(pts).max(axis=1) - 0.05).max() < 1e-12
    for axis in range(3):
        for sign in (-1.0, 1.0):
            face = np.isclose(pts[:, axis], sign * 0.05)
            assert face.sum() >= 25  # 6x6 grid minus shared edges


def test_cloth_grid_combinatorics():
    pts, edges, tris = cloth_grid((0, 0, 0), (0.9, 0, 0), (0, 0.9, 0), 10, 10)
    assert pts.shape == (100, 3)
    assert edges.shape == (180, 2)  # 9*10 horizontal + 10*9 vertical
    assert tris.shape == (162, 3)  # 81 quads, two triangles each


def test_stage_like_scene_validates_clean():
    scene = ball_scene()
    assert validate_scene(scene) == []
    assert len(scene.objects) == 1
    assert scene.objects[0].material.kind == "rigid"
    assert len(scene.background) > 0


def test_overlapping_object_rejected():
    with pytest.raises(SceneValidationError) as err:
        ball_scene(center=(0.0, 0.0, 0.0))  # half-buried in the ground plane
    assert "penetrat" in str(err.value)


# ---------------------------------------------------------------- filling


def test_fill_sphere_interior_count_within_oracle_band():
    scene = ball_scene(radius=0.1, spacing=1e-2, kind="elastic")
    obj = scene.objects[0]
    expected = (4.0 / 3.0) * math.pi * 0.1**3 / 1e-2**3  # ~4189 voxels
    n_int = obj.interior_positions.shape[0]
    assert abs(n_int - expected) / expected < 0.2


def test_fill_mass_within_quarter_of_true_volume():
    scene = ball_scene(radius=0.1, spacing=1e-2, kind="elastic")
    obj = scene.objects[0]
    total = particle_masses(obj, 1e-2).sum()
    true_mass = obj.material.density * (4.0 / 3.0) * math.pi * 0.1**3
    assert abs(total - true_mass) / true_mass < 0.25
    # the calibrated masses integrate the volume estimate exactly
    assert total == pytest.approx(obj.material.density * obj.estimated_volume)


def test_fill_particles_strictly_inside():
    scene = ball_scene(radius=0.1, center=(0.2, -0.1, 0.5), spacing=1e-2, kind="elastic")
    obj = scene.objects[0]
    r = np.linalg.norm(obj.interior_positions - (0.2, -0.1, 0.5), axis=1)
    assert r.max() < 0.1


def test_fill_is_idempotent():
    scene = ball_scene(kind="elastic")
    obj = scene.objects[0]
    again = fill_interior(obj, 2e-2)
    np.testing.assert_array_equal(obj.interior_positions, again.interior_positions)
    np.testing.assert_array_equal(obj.interior_velocities, again.interior_velocities)


def test_fill_cloth_passes_through():
    mat = Material.cloth()
    pts, edges, tris = cloth_grid((0, 0, 1), (0.3, 0, 0), (0, 0.3, 0), 5, 5)
    cloud = SurfelCloud.from_fields(pts)
    obj = ObjectSurfels(name="sheet", material=mat, cloud=cloud)
    out = fill_interior(obj, 1e-2)
    assert out.interior_positions.shape[0] == 0


def test_fill_open_surface_raises():
    pts, normals = sample_sphere(0.08, (0, 0, 0), 1e-2)
    keep = pts[:, 2] > 0.02  # open cup, flood fill leaks inside
    cloud = SurfelCloud.from_fields(pts[keep])
    obj = ObjectSurfels(name="cup", material=Material.rigid(), cloud=cloud)
    with pytest.raises(NonWatertightError) as err:
        fill_interior(obj, 1e-2)
    assert "cup" in str(err.value)


def test_fill_default_spacing_is_centimeter():
    import inspect

    sig = inspect.signature(ProceduralSpec)
    assert sig.parameters["particle_size"].default == 1e-2


# ---------------------------------------------------------------- binding


def test_binding_contains_self():
    scene = ball_scene(kind="elastic")
    obj = scene.objects[0]
    idx = np.arange(obj.n_surfels)
    assert (obj.binding == idx[:, None]).any(axis=1).all()


def test_binding_with_few_particles_uses_all():
    pts = np.array([[0, 0, 0], [0.01, 0, 0]], dtype=float)
    cloud = SurfelCloud.from_fields(pts)
    obj = ObjectSurfels(name="pair", material=Material.rigid(), cloud=cloud)
    obj.interior_positions = np.array([[0.005, 0, 0], [0.005, 0.01, 0], [0.0, 0.01, 0]])
    obj.interior_velocities = np.zeros_like(obj.interior_positions)
    out = bind_surfels(obj)
    assert out.binding.shape == (2, 5)
    assert sorted(out.binding[0]) == [0, 1, 2, 3, 4]


def brute_force_knn(queries, points, k):
    d = np.linalg.norm(queries[:, None, :] - points[None, :, :], axis=2)
    order = np.lexsort((np.broadcast_to(np.arange(len(points)), d.shape), d), axis=1)
    return order[:, :k]


def test_binding_matches_brute_force_oracle():
    rng = np.random.default_rng(7)
    points = rng.uniform(-1, 1, size=(1000, 3))
    queries = points[:50]
    got = nearest_particles(queries, points, 10)
    want = brute_force_knn(queries, points, 10)
    np.testing.assert_array_equal(got, want)


@settings(deadline=None, max_examples=40)
@given(
    n=st.integers(min_value=1, max_value=40),
    k=st.integers(min_value=1, max_value=12),
    seed=st.integers(min_value=0, max_value=2**31),
)
def test_nearest_particles_property(n, k, seed):
    rng = np.random.default_rng(seed)
    points = rng.uniform(-1, 1, size=(n, 3)).round(2)  # rounding forces ties
    queries = rng.uniform(-1, 1, size=(5, 3)).round(2)
    kk = min(k, n)
    got = nearest_particles(queries, points, kk)
    want = brute_force_knn(queries, points, kk)
    np.testing.assert_array_equal(got, want)


def test_binding_permutation_stable():
    rng = np.random.default_rng(3)
    scene = ball_scene(kind="elastic")
    obj = scene.objects[0]
    perm = rng.permutation(obj.interior_positions.shape[0])
    shuffled = obj.copy()
    shuffled.interior_positions = obj.interior_positions[perm]
    shuffled.interior_velocities = obj.interior_velocities[perm]
    rebound = bind_surfels(shuffled)
    # shuffled particle n+j sits where original particle n+perm[j] was
    n = obj.n_surfels
    back = np.concatenate([np.arange(n), n + perm])
    remapped = back[rebound.binding]
    np.testing.assert_array_equal(np.sort(remapped, axis=1), np.sort(obj.binding, axis=1))


# ---------------------------------------------------------------- validation


def test_validate_reports_nan_position():
    scene = ball_scene()
    scene.objects[0].cloud.positions[5, 1] = np.nan
    diags = validate_scene(scene)
    assert len(diags) == 1
    assert "surfel 5" in diags[0].message
    assert diags[0].field == "positions"


def test_validate_reports_asymmetric_edges():
    scene = ball_scene()
    scene.objects[0].edges = np.array([[0, 1]])  # missing the reverse
    diags = validate_scene(scene)
    assert len(diags) == 1
    assert "symmetric" in diags[0].message


def test_validate_reports_bad_material():
    scene = ball_scene(kind="elastic")
    scene.objects[0].material.poisson = 0.7
    diags = validate_scene(scene)
    assert any(d.field == "material.poisson" for d in diags)


def test_validate_empty_background():
    scene = ball_scene()
    scene.background = SurfelCloud.empty()
    diags = validate_scene(scene)
    assert any("empty" in d.message for d in diags)


# ---------------------------------------------------------------- file IO


def test_scene_roundtrip_exact(tmp_path):
    scene = ball_scene(kind="granular")
    path = tmp_path / "scene.json"
    save_scene(scene, path)
    loaded = load_scene(path)
    a, b = scene.objects[0], loaded.objects[0]
    np.testing.assert_array_equal(a.cloud.positions, b.cloud.positions)
    np.testing.assert_array_equal(a.cloud.orientations, b.cloud.orientations)
    np.testing.assert_array_equal(a.cloud.scales, b.cloud.scales)
    np.testing.assert_array_equal(a.velocities, b.velocities)
    np.testing.assert_array_equal(a.edges, b.edges)
    assert a.material == b.material
    np.testing.assert_array_equal(
        scene.camera.world_to_camera, loaded.camera.world_to_camera
    )
    np.testing.assert_array_equal(scene.background.positions, loaded.background.positions)


def test_scene_rejects_unknown_key(tmp_path):
    scene = ball_scene()
    path = tmp_path / "scene.json"
    save_scene(scene, path)
    data = json.loads(path.read_text())
    data["objects"][0]["frobnicate"] = 1
    with pytest.raises(SceneFormatError) as err:
        scene_from_json(data)
    assert "frobnicate" in str(err.value)


def test_scene_rejects_unknown_material_kind():
    with pytest.raises(SceneFormatError) as err:
        scene_from_json(
            {
                "camera": {"fx": 1, "fy": 1, "cx": 0, "cy": 0, "width": 2, "height": 2,
                           "world_to_camera": np.eye(4).tolist()},
                "background": [[0, 0, 0, 1, 0, 0, 0, 0.01, 0.01, 1, 0.5, 0.5, 0.5]],
                "objects": [{"kind": "jelly", "surfels": [[0, 0, 1, 1, 0, 0, 0, 0.01, 0.01, 1, 1, 0, 0]]}],
            }
        )
    assert "jelly" in str(err.value)


def test_procedural_object_in_scene_file():
    data = {
        "camera": {"fx": 600, "fy": 600, "cx": 360, "cy": 240, "width": 720, "height": 480,
                   "world_to_camera": np.eye(4).tolist()},
        "background": {"procedural": [{"primitive": "ground_plane", "size": 1.0}]},
        "objects": [
            {
                "kind": "rigid",
                "procedural": {"primitive": "sphere", "radius": 0.05, "center": [0, 0, 0.3]},
            }
        ],
        "particle_size": 0.02,
    }
    scene = scene_from_json(data)
    assert scene.objects[0].n_surfels > 30
    assert len(scene.background) > 100


def test_undirected_edges_helper():
    edges = np.array([[0, 1], [1, 0], [2, 3], [3, 2]])
    und = undirected_edges(edges)
    assert und.shape == (2, 2)
    assert (und[:, 0] < und[:, 1]).all()
