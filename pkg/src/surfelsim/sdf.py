"""Signed-distance boundaries used for collision handling.

Three flavors cover the pipeline's needs: an analytic plane, a voxelized
field built from background surfels, and a point-cloud pseudo-SDF used
when one object's particles act as a frozen collider for another.
"""

from __future__ import annotations

import numpy as np
from scipy import ndimage
from scipy.spatial import cKDTree


class Boundary:
    """Interface: signed distance is positive outside, negative inside."""

    def signed_distance(self, points: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def normal(self, points: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def query(self, points: np.ndarray):
        return self.signed_distance(points), self.normal(points)


class PlaneSdf(Boundary):
    def __init__(self, point=(0.0, 0.0, 0.0), normal=(0.0, 0.0, 1.0)):
        self.point = np.asarray(point, dtype=np.float64)
        n = np.asarray(normal, dtype=np.float64)
        self.n = n / np.linalg.norm(n)

    def signed_distance(self, points):
        points = np.atleast_2d(points)
        return (points - self.point) @ self.n

    def normal(self, points):
        points = np.atleast_2d(points)
        return np.broadcast_to(self.n, points.shape).copy()


class PointCloudSdf(Boundary):
    """Distance to a particle cloud minus a contact radius.

    Unsigned by construction: it cannot see "inside" the cloud deeper
    than the radius, which is fine for the thin contact layers it is
    used for (frozen cross-object colliders).
    """

    def __init__(self, points: np.ndarray, radius: float):
        self.points = np.asarray(points, dtype=np.float64)
        self.radius = float(radius)
        self._tree = cKDTree(self.points)

    def aabb(self):
        """Bounds of the region where the distance can be negative."""
        return self.points.min(axis=0) - self.radius, self.points.max(axis=0) + self.radius

    def query(self, points):
        points = np.atleast_2d(points)
        dist, idx = self._tree.query(points, k=1)
        delta = points - self.points[idx]
        norms = np.linalg.norm(delta, axis=1)
        safe = np.where(norms < 1e-12, 1.0, norms)
        normals = delta / safe[:, None]
        normals[norms < 1e-12] = (0.0, 0.0, 1.0)
        return dist - self.radius, normals

    def signed_distance(self, points):
        return self.query(points)[0]

    def normal(self, points):
        return self.query(points)[1]


class VoxelSdf(Boundary):
    """Trilinearly interpolated signed distance on a regular voxel grid.

    Values live at voxel centers, in meters.  Queries outside the grid
    are clamped to the border cell, which keeps far-away queries safely
    positive as long as the grid covers the simulation domain.
    """

    def __init__(self, values: np.ndarray, origin, cell: float):
        self.values = np.asarray(values, dtype=np.float64)
        self.origin = np.asarray(origin, dtype=np.float64)
        self.cell = float(cell)

    @classmethod
    def from_surfels(cls, positions, lo, hi, cell, mark_radius=None,
                     support_below=True):
        """Build a solid-below field from a surfel shell.

        Voxels near surfel positions are marked occupied; air is what a
        6-connected flood from the top face can reach, everything else
        is solid.  With `support_below` (the default) every voxel under
        an occupied one is also solid, so a ground plane or tank floor
        supports from below even when the grid extends past its rim and
        the flood could sneak around the sides.  Pass False for free
        floating shells that things should be able to pass under.
        """
        positions = np.asarray(positions, dtype=np.float64)
        lo = np.asarray(lo, dtype=np.float64)
        hi = np.asarray(hi, dtype=np.float64)
        cell = float(cell)
        if mark_radius is None:
            mark_radius = 0.87 * cell  # just over half a cell diagonal
        dims = np.maximum(np.ceil((hi - lo) / cell).astype(int) + 1, 2)
        occupied = np.zeros(tuple(dims), dtype=bool)

        # Stamp the 2x2x2 center neighborhood of each surfel that falls
        # within the marking radius; a sample spacing <= cell then gives
        # a leak-proof shell.
        g = (positions - lo) / cell - 0.5
        base = np.floor(g).astype(int)
        for dx in (0, 1):
            for dy in (0, 1):
                for dz in (0, 1):
                    corner = base + (dx, dy, dz)
                    centers = lo + (corner + 0.5) * cell
                    near = np.linalg.norm(centers - positions, axis=1) <= mark_radius
                    ok = near & np.all((corner >= 0) & (corner < dims), axis=1)
                    c = corner[ok]
                    occupied[c[:, 0], c[:, 1], c[:, 2]] = True

        if support_below:
            occupied = np.maximum.accumulate(occupied[:, :, ::-1], axis=2)[:, :, ::-1]
        air = cls._flood_air(occupied)
        solid = ~air
        return cls(cls._signed_from_mask(solid, cell), lo, cell)

    @staticmethod
    def _flood_air(occupied: np.ndarray) -> np.ndarray:
        free = ~occupied
        seeds = np.zeros_like(free)
        seeds[:, :, -1] = free[:, :, -1]  # top face (+z) is outside air
        if not seeds.any():
            return np.zeros_like(free)
        structure = ndimage.generate_binary_structure(3, 1)  # 6-connectivity
        labels, _ = ndimage.label(free, structure=structure)
        air_labels = np.unique(labels[seeds])
        air_labels = air_labels[air_labels != 0]
        return np.isin(labels, air_labels)

    @staticmethod
    def _signed_from_mask(solid: np.ndarray, cell: float) -> np.ndarray:
        if solid.all():
            return np.full(solid.shape, -cell)
        if not solid.any():
            return np.full(solid.shape, cell)
        # Half-cell offset so adjacent air/solid centers read +-cell/2;
        # without it the field has slope ~2 across the interface and
        # collision response overshoots (penetrations read twice as deep).
        d_out = ndimage.distance_transform_edt(~solid)
        d_in = ndimage.distance_transform_edt(solid)
        return np.where(solid, (0.5 - d_in) * cell, (d_out - 0.5) * cell)

    def _grid_coords(self, points):
        points = np.atleast_2d(points)
        g = (points - self.origin) / self.cell - 0.5
        dims = np.array(self.values.shape)
        return np.clip(g, 0.0, dims - 1.000001)

    def signed_distance(self, points):
        return self.query(points)[0]

    def normal(self, points):
        return self.query(points)[1]

    def query(self, points):
        g = self._grid_coords(points)
        i0 = np.floor(g).astype(int)
        dims = np.array(self.values.shape)
        i0 = np.minimum(i0, dims - 2)
        f = g - i0
        v = self.values
        c = {}
        for dx in (0, 1):
            for dy in (0, 1):
                for dz in (0, 1):
                    c[(dx, dy, dz)] = v[i0[:, 0] + dx, i0[:, 1] + dy, i0[:, 2] + dz]
        wx, wy, wz = f[:, 0], f[:, 1], f[:, 2]

        def lerp(a, b, t):
            return a * (1 - t) + b * t

        # Interpolate z, then y, then x; keep partials for the gradient.
        v00 = lerp(c[0, 0, 0], c[0, 0, 1], wz)
        v01 = lerp(c[0, 1, 0], c[0, 1, 1], wz)
        v10 = lerp(c[1, 0, 0], c[1, 0, 1], wz)
        v11 = lerp(c[1, 1, 0], c[1, 1, 1], wz)
        v0 = lerp(v00, v01, wy)
        v1 = lerp(v10, v11, wy)
        sd = lerp(v0, v1, wx)

        dx = (v1 - v0) / self.cell
        dy = lerp(v01 - v00, v11 - v10, wx) / self.cell
        dz0 = lerp(c[0, 0, 1] - c[0, 0, 0], c[0, 1, 1] - c[0, 1, 0], wy)
        dz1 = lerp(c[1, 0, 1] - c[1, 0, 0], c[1, 1, 1] - c[1, 1, 0], wy)
        dz = lerp(dz0, dz1, wx) / self.cell
        grad = np.stack([dx, dy, dz], axis=1)
        norms = np.linalg.norm(grad, axis=1)
        safe = np.where(norms < 1e-12, 1.0, norms)
        normals = grad / safe[:, None]
        normals[norms < 1e-12] = (0.0, 0.0, 1.0)
        return sd, normals


class CompositeSdf(Boundary):
    """Pointwise minimum over component boundaries."""

    def __init__(self, parts):
        self.parts = list(parts)
        if not self.parts:
            raise ValueError("CompositeSdf needs at least one part")

    def query(self, points):
        points = np.atleast_2d(points)
        best_sd = None
        best_n = None
        for part in self.parts:
            sd, n = part.query(points)
            if best_sd is None:
                best_sd, best_n = sd.copy(), n.copy()
            else:
                closer = sd < best_sd
                best_sd[closer] = sd[closer]
                best_n[closer] = n[closer]
        return best_sd, best_n

    def signed_distance(self, points):
        return self.query(points)[0]

    def normal(self, points):
        return self.query(points)[1]
