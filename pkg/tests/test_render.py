import numpy as np
import pytest

from surfelsim.errors import SceneFormatError, TopologyMismatchError
from surfelsim.render.io import (
    read_flo,
    read_pgm,
    read_ppm,
    write_flo,
    write_pgm,
    write_ppm,
)
from surfelsim.render.rasterizer import (
    _ALPHA_CAP,
    rasterize,
    rasterize_backward,
    render_scene,
    scene_splats,
)
from surfelsim.scene.procedural import ProceduralSpec, build_procedural_scene
from surfelsim.scene.types import Camera


def straight_camera(width=64, height=48, focal=100.0):
    # identity pose: camera at origin looking down +z
    return Camera(fx=focal, fy=focal, cx=width / 2, cy=height / 2,
                  width=width, height=height)


def one_splat(**over):
    args = dict(
        positions=np.array([[0.0, 0.0, 1.0]]),
        sizes=np.array([0.02]),
        opacities=np.array([0.8]),
        colors=np.array([[0.9, 0.2, 0.1]]),
        ids=np.array([0], dtype=np.int64),
    )
    args.update(over)
    return args


def splat_alpha(d2, sigma_px, opacity):
    # same formula as the kernel: half-pixel low-pass, continuous cutoff
    s2 = sigma_px**2 + 0.25
    r = 4.0 * np.sqrt(s2)
    a = opacity * (np.exp(-0.5 * d2 / s2) - np.exp(-0.5 * r * r / s2))
    return min(a, _ALPHA_CAP)


def test_single_splat_center_value():
    cam = straight_camera()
    res = rasterize(**one_splat(), camera=cam, n_objects=1, fill=(0.0, 0.0, 0.0))
    # nearest pixel center to the projected point (32, 24) is (32.5, 24.5)
    a = splat_alpha(0.5, 100.0 * 0.02 / 1.0, 0.8)
    np.testing.assert_allclose(res.rgb[24, 32], a * np.array([0.9, 0.2, 0.1]),
                               atol=1e-12)
    np.testing.assert_allclose(res.alpha[24, 32], a, atol=1e-12)
    # expected depth of a covered pixel is the splat depth
    np.testing.assert_allclose(res.expected_depth[24, 32], 1.0, atol=1e-12)
    assert res.flow is None


def test_fill_shows_through_transmittance():
    cam = straight_camera()
    res = rasterize(**one_splat(), camera=cam, n_objects=1, fill=(1.0, 1.0, 1.0))
    a = res.alpha[24, 32]
    expected = a * np.array([0.9, 0.2, 0.1]) + (1 - a)
    np.testing.assert_allclose(res.rgb[24, 32], expected, atol=1e-12)
    # far corner is pure fill
    np.testing.assert_allclose(res.rgb[0, 0], 1.0)


def test_front_splat_dominates_regardless_of_order():
    cam = straight_camera()
    pos = np.array([[0.0, 0.0, 1.0], [0.0, 0.0, 2.0]])
    colors = np.array([[1.0, 0.0, 0.0], [0.0, 0.0, 1.0]])
    sizes = np.array([0.02, 0.04])
    common = dict(opacities=np.array([0.7, 0.7]),
                  ids=np.array([0, 0], dtype=np.int64), camera=cam,
                  n_objects=1, fill=(0.0, 0.0, 0.0))
    a = rasterize(positions=pos, colors=colors, sizes=sizes, **common)
    b = rasterize(positions=pos[::-1].copy(), colors=colors[::-1].copy(),
                  sizes=sizes[::-1].copy(), **common)
    px = a.rgb[24, 32]
    assert px[0] > px[2] > 0.0  # red in front, blue leaks through
    np.testing.assert_allclose(a.rgb, b.rgb, atol=1e-14)


def test_behind_camera_is_culled():
    cam = straight_camera()
    res = rasterize(**one_splat(positions=np.array([[0.0, 0.0, -1.0]])),
                    camera=cam, n_objects=1, fill=(0.3, 0.3, 0.3))
    np.testing.assert_allclose(res.rgb, 0.3)
    assert res.alpha.max() == 0.0


def test_flow_zero_for_static_and_linear_for_shift():
    cam = straight_camera()
    args = one_splat()
    res = rasterize(**args, camera=cam, n_objects=1,
                    next_positions=args["positions"].copy())
    assert res.flow is not None
    assert np.all(res.flow == 0.0)

    shifted = args["positions"] + np.array([0.01, 0.0, 0.0])
    res = rasterize(**args, camera=cam, n_objects=1, next_positions=shifted)
    covered = res.alpha > 1e-6
    # flow is alpha-weighted, so normalize before comparing: 0.01 m at
    # z=1 under f=100 is exactly one pixel
    u = res.flow[:, :, 0][covered] / res.alpha[covered]
    np.testing.assert_allclose(u, 1.0, atol=1e-9)


def test_flow_needs_matching_counts():
    cam = straight_camera()
    args = one_splat()
    with pytest.raises(TopologyMismatchError):
        rasterize(**args, camera=cam, n_objects=1,
                  next_positions=np.zeros((3, 3)))


def test_masks_split_by_object():
    cam = straight_camera()
    pos = np.array([[-0.1, 0.0, 1.0], [0.1, 0.0, 1.0]])
    res = rasterize(
        positions=pos, sizes=np.array([0.03, 0.03]),
        opacities=np.array([1.0, 1.0]),
        colors=np.array([[1.0, 0.0, 0.0], [0.0, 1.0, 0.0]]),
        ids=np.array([0, 1], dtype=np.int64),
        camera=cam, n_objects=2,
    )
    m = res.masks()
    assert m.shape[0] == 2
    assert m[0].any() and m[1].any()
    assert not (m[0] & m[1]).any()  # disjoint splats, disjoint masks
    ys, xs = np.nonzero(m[0])
    assert xs.mean() < cam.cx < np.nonzero(m[1])[1].mean()


def test_background_splats_are_not_in_masks():
    cam = straight_camera()
    res = rasterize(**one_splat(ids=np.array([-1], dtype=np.int64)),
                    camera=cam, n_objects=1)
    assert res.object_alpha.max() == 0.0
    assert res.alpha.max() > 0.5  # it still renders


def test_rasterize_is_deterministic():
    rng = np.random.default_rng(4)
    cam = straight_camera()
    n = 40
    args = dict(
        positions=rng.normal(scale=0.2, size=(n, 3)) + [0, 0, 1.5],
        sizes=rng.uniform(0.01, 0.05, n),
        opacities=rng.uniform(0.2, 1.0, n),
        colors=rng.uniform(size=(n, 3)),
        ids=rng.integers(0, 2, n),
        camera=cam, n_objects=2,
    )
    a = rasterize(**args)
    b = rasterize(**args)
    assert np.array_equal(a.rgb, b.rgb)
    assert np.array_equal(a.depth, b.depth)


# ---------------------------------------------------------- gradients


@pytest.fixture(scope="module")
def grad_problem():
    rng = np.random.default_rng(1)
    cam = straight_camera(width=64, height=48, focal=60.0)
    n = 12
    args = dict(
        positions=rng.normal(scale=0.2, size=(n, 3)) + [0, 0, 1.2],
        sizes=rng.uniform(0.05, 0.15, n),
        opacities=rng.uniform(0.3, 0.9, n),
        colors=rng.uniform(0.1, 0.9, size=(n, 3)),
        ids=np.zeros(n, dtype=np.int64),
    )
    d_rgb = rng.normal(size=(48, 64, 3))
    return cam, args, d_rgb


def test_position_gradients_match_finite_differences(grad_problem):
    cam, args, d_rgb = grad_problem
    res = rasterize(**args, camera=cam, n_objects=1)
    g_pos, _ = rasterize_backward(args["positions"], args["sizes"],
                                  args["opacities"], args["colors"],
                                  args["ids"], cam, res.rgb, d_rgb)

    def loss(p):
        out = rasterize(p, args["sizes"], args["opacities"], args["colors"],
                        args["ids"], cam, 1)
        return float(np.sum(d_rgb * out.rgb))

    h = 1e-5
    worst = 0.0
    for i in range(len(args["positions"])):
        for k in range(3):
            dp = args["positions"].copy()
            dp[i, k] += h
            dm = args["positions"].copy()
            dm[i, k] -= h
            fd = (loss(dp) - loss(dm)) / (2 * h)
            denom = max(abs(fd), abs(g_pos[i, k]), 1e-4)
            worst = max(worst, abs(fd - g_pos[i, k]) / denom)
    assert worst < 1e-3


def test_color_gradients_match_finite_differences(grad_problem):
    cam, args, d_rgb = grad_problem
    res = rasterize(**args, camera=cam, n_objects=1)
    _, g_col = rasterize_backward(args["positions"], args["sizes"],
                                  args["opacities"], args["colors"],
                                  args["ids"], cam, res.rgb, d_rgb)

    def loss(c):
        out = rasterize(args["positions"], args["sizes"], args["opacities"],
                        c, args["ids"], cam, 1)
        return float(np.sum(d_rgb * out.rgb))

    h = 1e-6
    worst = 0.0
    for i in range(len(args["colors"])):
        for k in range(3):
            dc = args["colors"].copy()
            dc[i, k] += h
            dm = args["colors"].copy()
            dm[i, k] -= h
            fd = (loss(dc) - loss(dm)) / (2 * h)
            denom = max(abs(fd), abs(g_col[i, k]), 1e-6)
            worst = max(worst, abs(fd - g_col[i, k]) / denom)
    assert worst < 1e-6


# ------------------------------------------------------------- scenes


def test_render_scene_uses_scene_camera():
    spec = ProceduralSpec(
        background=[{"primitive": "ground_plane", "size": [0.5, 0.5]}],
        objects=[{
            "primitive": "sphere", "name": "ball",
            "center": [0.0, 0.0, 0.1], "radius": 0.05,
            "color": [0.9, 0.2, 0.1],
            "material": {"kind": "rigid"},
        }],
        particle_size=0.02, seed=2)
    scene = build_procedural_scene(spec)
    res = render_scene(scene)
    assert res.rgb.shape == (scene.camera.height, scene.camera.width, 3)
    assert res.masks()[0].any()  # the ball is visible
    sp = scene_splats(scene)
    assert (sp.ids == -1).sum() == len(scene.background)


# ------------------------------------------------------------ file io


def test_ppm_roundtrip_on_grid_values(tmp_path):
    rng = np.random.default_rng(0)
    img = rng.integers(0, 256, size=(5, 7, 3)) / 255.0
    write_ppm(tmp_path / "x.ppm", img)
    back = read_ppm(tmp_path / "x.ppm")
    np.testing.assert_allclose(back, img, atol=1e-12)


def test_pgm_roundtrip_and_clipping(tmp_path):
    img = np.array([[0.0, 1.0], [2.0, -1.0]])
    write_pgm(tmp_path / "x.pgm", img)
    back = read_pgm(tmp_path / "x.pgm")
    np.testing.assert_allclose(back, [[0.0, 1.0], [1.0, 0.0]])


def test_flo_roundtrip_exact(tmp_path):
    rng = np.random.default_rng(3)
    flow = rng.normal(scale=10, size=(6, 4, 2)).astype(np.float32).astype(np.float64)
    write_flo(tmp_path / "x.flo", flow)
    back = read_flo(tmp_path / "x.flo")
    assert np.array_equal(back, flow)


def test_image_readers_reject_garbage(tmp_path):
    (tmp_path / "bad.ppm").write_bytes(b"P5\n2 2\n255\n" + b"\x00" * 4)
    with pytest.raises(SceneFormatError):
        read_ppm(tmp_path / "bad.ppm")
    (tmp_path / "bad.flo").write_bytes(b"\x00" * 12)
    with pytest.raises(SceneFormatError):
        read_flo(tmp_path / "bad.flo")
    (tmp_path / "cut.flo").write_bytes(b"")
    with pytest.raises(SceneFormatError):
        read_flo(tmp_path / "cut.flo")
