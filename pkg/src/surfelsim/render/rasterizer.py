"""Differentiable splat rasterizer.

Every surfel becomes an isotropic screen-space Gaussian: center at the
projected position, standard deviation focal * scale / depth plus a
half-pixel low-pass so sub-pixel splats still cover their pixel.  Splats
are composited front to back with per-pixel transmittance; whatever
transmittance is left goes to a constant fill color.

The same pass also accumulates expected depth, per-object alpha (for
masks), and screen-space motion toward a second set of positions (for
optical flow).  A replay-based backward pass returns exact gradients of
an image loss with respect to splat world positions and colors.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from numba import njit

from ..errors import TopologyMismatchError
from ..scene.types import Camera, Scene

# splats never brighten a pixel they cannot darken: alpha is capped just
# below 1 so transmittance stays positive and the backward pass finite
_ALPHA_CAP = 1.0 - 1e-9

# pixels with transmittance below this are considered opaque and skipped
_T_FLOOR = 1e-6

# Gaussians are cut off at 4 sigma, and windows capped so one splat
# never rasterizes more than ~160 px across.  The cutoff value is
# subtracted from the weight so splats fade to exactly zero at the
# boundary instead of stepping off it; without that the image is a
# discontinuous function of splat position and finite-difference
# gradient checks pick up the jumps.
_CUTOFF_SIGMA = 4.0
_MAX_RADIUS_PX = 80.0

_NEAR_PLANE = 1e-4


@dataclass
class RenderResult:
    """One rasterized frame; flow is None unless a next frame was given."""

    rgb: np.ndarray          # (H, W, 3) in [0, 1]
    alpha: np.ndarray        # (H, W) coverage = 1 - final transmittance
    depth: np.ndarray        # (H, W) alpha-weighted camera z accumulator
    object_alpha: np.ndarray # (n_objects, H, W) per-object coverage
    flow: np.ndarray | None  # (H, W, 2) pixels toward the next frame

    @property
    def expected_depth(self) -> np.ndarray:
        """Depth normalized by coverage; empty pixels read 0."""
        return np.where(self.alpha > 1e-12, self.depth / np.maximum(self.alpha, 1e-12), 0.0)

    def masks(self, threshold: float = 0.5) -> np.ndarray:
        return self.object_alpha >= threshold


@dataclass
class Splats:
    """Raster input arrays; `ids` is the object index, -1 for background."""

    positions: np.ndarray
    sizes: np.ndarray      # world-space radius per splat
    opacities: np.ndarray
    colors: np.ndarray
    ids: np.ndarray
    n_objects: int


def scene_splats(scene: Scene) -> Splats:
    clouds = [scene.background] + [o.cloud for o in scene.objects]
    ids = [np.full(len(scene.background), -1, dtype=np.int64)]
    for i, obj in enumerate(scene.objects):
        ids.append(np.full(obj.n_surfels, i, dtype=np.int64))
    return Splats(
        positions=np.vstack([c.positions for c in clouds]),
        sizes=np.concatenate([c.scales.mean(axis=1) for c in clouds]),
        opacities=np.concatenate([c.opacities for c in clouds]),
        colors=np.vstack([c.colors for c in clouds]),
        ids=np.concatenate(ids),
        n_objects=len(scene.objects),
    )


@njit(cache=True)
def _forward(order, u, v, z, s2, opac, colors, ids, motion,
             rgb, alpha_T, depth, obj_alpha, flow, height, width):
    for oi in range(order.shape[0]):
        i = order[oi]
        r = _CUTOFF_SIGMA * np.sqrt(s2[i])
        if r > _MAX_RADIUS_PX:
            r = _MAX_RADIUS_PX
        x0 = int(np.floor(u[i] - r + 0.5))
        x1 = int(np.floor(u[i] + r + 0.5)) + 1
        y0 = int(np.floor(v[i] - r + 0.5))
        y1 = int(np.floor(v[i] + r + 0.5)) + 1
        if x0 < 0:
            x0 = 0
        if y0 < 0:
            y0 = 0
        if x1 > width:
            x1 = width
        if y1 > height:
            y1 = height
        tail = np.exp(-0.5 * r * r / s2[i])
        for py in range(y0, y1):
            dy = py + 0.5 - v[i]
            for px in range(x0, x1):
                T = alpha_T[py, px]
                if T < _T_FLOOR:
                    continue
                dx = px + 0.5 - u[i]
                d2 = dx * dx + dy * dy
                if d2 > r * r:
                    continue
                a = opac[i] * (np.exp(-0.5 * d2 / s2[i]) - tail)
                if a <= 0.0:
                    continue
                if a > _ALPHA_CAP:
                    a = _ALPHA_CAP
                w = T * a
                rgb[py, px, 0] += w * colors[i, 0]
                rgb[py, px, 1] += w * colors[i, 1]
                rgb[py, px, 2] += w * colors[i, 2]
                depth[py, px] += w * z[i]
                if ids[i] >= 0:
                    obj_alpha[ids[i], py, px] += w
                flow[py, px, 0] += w * motion[i, 0]
                flow[py, px, 1] += w * motion[i, 1]
                alpha_T[py, px] = T * (1.0 - a)


@njit(cache=True)
def _backward(order, u, v, z, s2, opac, colors, ids, rgb_total, d_rgb,
              height, width, g_u, g_v, g_s2, g_color):
    # replay the exact forward compositing; A accumulates color laid down
    # so far so the suffix S (everything behind the current splat,
    # including the fill) is rgb_total - A
    trans = np.ones((height, width))
    acc = np.zeros((height, width, 3))
    for oi in range(order.shape[0]):
        i = order[oi]
        r = _CUTOFF_SIGMA * np.sqrt(s2[i])
        if r > _MAX_RADIUS_PX:
            r = _MAX_RADIUS_PX
        x0 = int(np.floor(u[i] - r + 0.5))
        x1 = int(np.floor(u[i] + r + 0.5)) + 1
        y0 = int(np.floor(v[i] - r + 0.5))
        y1 = int(np.floor(v[i] + r + 0.5)) + 1
        if x0 < 0:
            x0 = 0
        if y0 < 0:
            y0 = 0
        if x1 > width:
            x1 = width
        if y1 > height:
            y1 = height
        uncapped = _CUTOFF_SIGMA * np.sqrt(s2[i]) <= _MAX_RADIUS_PX
        tail = np.exp(-0.5 * r * r / s2[i])
        for py in range(y0, y1):
            dy = py + 0.5 - v[i]
            for px in range(x0, x1):
                T = trans[py, px]
                if T < _T_FLOOR:
                    continue
                dx = px + 0.5 - u[i]
                d2 = dx * dx + dy * dy
                if d2 > r * r:
                    continue
                w = np.exp(-0.5 * d2 / s2[i])
                a = opac[i] * (w - tail)
                if a <= 0.0:
                    continue
                clamped = a > _ALPHA_CAP
                if clamped:
                    a = _ALPHA_CAP
                dl_da = 0.0
                for ch in range(3):
                    contrib = T * a * colors[i, ch]
                    acc[py, px, ch] += contrib
                    suffix = rgb_total[py, px, ch] - acc[py, px, ch]
                    g_color[i, ch] += T * a * d_rgb[py, px, ch]
                    dl_da += d_rgb[py, px, ch] * (
                        T * colors[i, ch] - suffix / (1.0 - a)
                    )
                if not clamped:
                    g_u[i] += dl_da * opac[i] * w * dx / s2[i]
                    g_v[i] += dl_da * opac[i] * w * dy / s2[i]
                    # when the window is the full 4 sigma the subtracted
                    # tail is a constant exp(-8); under the radius cap it
                    # varies with s2 and contributes to the gradient
                    g_tail = 0.0 if uncapped else tail * 0.5 * r * r / (s2[i] * s2[i])
                    g_s2[i] += dl_da * opac[i] * (
                        w * 0.5 * d2 / (s2[i] * s2[i]) - g_tail
                    )
                trans[py, px] = T * (1.0 - a)


def _prepare(positions, sizes, camera: Camera):
    cam = camera.to_camera(positions)
    z = cam[:, 2]
    safe = np.where(np.abs(z) < 1e-12, 1e-12, z)
    u = camera.fx * cam[:, 0] / safe + camera.cx
    v = camera.fy * cam[:, 1] / safe + camera.cy
    focal = 0.5 * (camera.fx + camera.fy)
    sigma = focal * sizes / safe
    s2 = sigma * sigma + 0.25  # half-pixel low-pass
    visible = z > _NEAR_PLANE
    order = np.argsort(np.where(visible, z, np.inf), kind="stable")
    order = order[: int(visible.sum())].astype(np.int64)
    return cam, u, v, z, s2, order


def rasterize(positions, sizes, opacities, colors, ids, camera: Camera,
              n_objects: int, fill=(1.0, 1.0, 1.0),
              next_positions=None) -> RenderResult:
    """Composite splats into an image; see the module docstring.

    `next_positions` (same shape as positions) switches on flow output:
    each splat contributes its screen-space motion toward where it sits
    in the next frame.
    """
    positions = np.asarray(positions, dtype=np.float64)
    H, W = camera.height, camera.width
    _, u, v, z, s2, order = _prepare(positions, sizes, camera)

    if next_positions is not None:
        next_positions = np.asarray(next_positions, dtype=np.float64)
        if next_positions.shape != positions.shape:
            raise TopologyMismatchError(
                f"flow needs matching splat sets, got {positions.shape[0]} "
                f"now vs {next_positions.shape[0]} next"
            )
        uv_next, _ = camera.project(next_positions)
        motion = np.stack([uv_next[:, 0] - u, uv_next[:, 1] - v], axis=1)
    else:
        motion = np.zeros((positions.shape[0], 2))

    rgb = np.zeros((H, W, 3))
    alpha_T = np.ones((H, W))
    depth = np.zeros((H, W))
    obj_alpha = np.zeros((max(n_objects, 1), H, W))
    flow = np.zeros((H, W, 2))
    _forward(order, u, v, z, s2,
             np.asarray(opacities, dtype=np.float64),
             np.asarray(colors, dtype=np.float64),
             np.asarray(ids, dtype=np.int64), motion,
             rgb, alpha_T, depth, obj_alpha, flow, H, W)
    rgb += alpha_T[:, :, None] * np.asarray(fill, dtype=np.float64)
    return RenderResult(
        rgb=rgb,
        alpha=1.0 - alpha_T,
        depth=depth,
        object_alpha=obj_alpha[:n_objects] if n_objects else obj_alpha[:0],
        flow=flow if next_positions is not None else None,
    )


def rasterize_backward(positions, sizes, opacities, colors, ids,
                       camera: Camera, rgb_total, d_rgb):
    """Gradients of sum(d_rgb * rgb) w.r.t. splat positions and colors.

    `rgb_total` must be the rgb of a forward `rasterize` call with the
    same inputs; the backward pass replays that compositing to recover
    per-splat transmittance.
    """
    positions = np.asarray(positions, dtype=np.float64)
    H, W = camera.height, camera.width
    cam, u, v, z, s2, order = _prepare(positions, sizes, camera)

    n = positions.shape[0]
    g_u = np.zeros(n)
    g_v = np.zeros(n)
    g_s2 = np.zeros(n)
    g_color = np.zeros((n, 3))
    _backward(order, u, v, z, s2,
              np.asarray(opacities, dtype=np.float64),
              np.asarray(colors, dtype=np.float64),
              np.asarray(ids, dtype=np.int64),
              np.asarray(rgb_total, dtype=np.float64),
              np.asarray(d_rgb, dtype=np.float64), H, W,
              g_u, g_v, g_s2, g_color)

    # chain screen-space gradients back to camera space, then world space
    safe = np.where(np.abs(z) < 1e-12, 1e-12, z)
    sigma2 = s2 - 0.25
    g_cam = np.zeros((n, 3))
    g_cam[:, 0] = g_u * camera.fx / safe
    g_cam[:, 1] = g_v * camera.fy / safe
    g_cam[:, 2] = (
        -g_u * camera.fx * cam[:, 0] / safe**2
        - g_v * camera.fy * cam[:, 1] / safe**2
        - g_s2 * 2.0 * sigma2 / safe
    )
    rot = camera.world_to_camera[:3, :3]
    g_pos = g_cam @ rot
    return g_pos, g_color


def render_scene(scene: Scene, next_scene: Scene | None = None,
                 camera: Camera | None = None,
                 fill=(1.0, 1.0, 1.0)) -> RenderResult:
    """Rasterize a scene with its own camera (or an override)."""
    cam = camera if camera is not None else scene.camera
    sp = scene_splats(scene)
    next_positions = None
    if next_scene is not None:
        nxt = scene_splats(next_scene)
        if nxt.positions.shape != sp.positions.shape:
            raise TopologyMismatchError(
                f"next frame has {nxt.positions.shape[0]} splats, "
                f"this one {sp.positions.shape[0]}"
            )
        next_positions = nxt.positions
    return rasterize(sp.positions, sp.sizes, sp.opacities, sp.colors, sp.ids,
                     cam, sp.n_objects, fill=fill, next_positions=next_positions)
