"""Interior particle filling and surfel-to-particle binding.

Volumetric objects are turned into full particle sets by voxelizing
their surfel shell at the particle size, flood-filling from outside to
find enclosed voxels, and placing one jittered particle per interior
voxel.  Surfels themselves double as surface particles, so the particle
set of an object is [surfels..., interior...].
"""

from __future__ import annotations

import numpy as np
from scipy import ndimage

from ..errors import NonWatertightError
from .types import BINDING_SIZE, ObjectSurfels, VOLUMETRIC_KINDS


def _stamp_shell(positions, lo, dims, cell, mark_radius):
    """Occupancy mask with voxels near any of the given points set."""
    occupied = np.zeros(tuple(dims), dtype=bool)
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
    return occupied


def interior_voxel_mask(positions, cell, normals=None, mark_radius=None, margin=0.35):
    """Voxels strictly enclosed by a surfel shell.

    The shell is stamped thick (mark_radius) so the outside flood fill
    cannot leak through sampling gaps; the interior is then refined
    with the signed distance to the nearest surfel so the thick stamp
    does not eat into the enclosed volume.  Without normals an unsigned
    half-cell margin is used instead.

    Returns (interior, lo, volume_voxels) where volume_voxels counts
    every unflooded voxel whose center lies behind the surface, i.e. a
    voxelized estimate of the enclosed volume.
    """
    positions = np.asarray(positions, dtype=np.float64)
    cell = float(cell)
    if mark_radius is None:
        mark_radius = 0.87 * cell
    lo = positions.min(axis=0) - 2.0 * cell
    hi = positions.max(axis=0) + 2.0 * cell
    dims = np.maximum(np.ceil((hi - lo) / cell).astype(int) + 1, 3)
    occupied = _stamp_shell(positions, lo, dims, cell, mark_radius)

    free = ~occupied
    structure = ndimage.generate_binary_structure(3, 1)
    labels, _ = ndimage.label(free, structure=structure)
    border_labels = np.unique(
        np.concatenate(
            [
                labels[0, :, :].ravel(),
                labels[-1, :, :].ravel(),
                labels[:, 0, :].ravel(),
                labels[:, -1, :].ravel(),
                labels[:, :, 0].ravel(),
                labels[:, :, -1].ravel(),
            ]
        )
    )
    border_labels = border_labels[border_labels != 0]
    outside = np.isin(labels, border_labels)

    # A voxel touching outside air sits on an open rim, not inside a
    # closed shell; dropping those makes open surfaces come up empty
    # instead of keeping the back side of their own stamp.
    near_air = ndimage.binary_dilation(outside, structure=structure)
    candidates = np.argwhere(~outside & ~near_air)
    if candidates.shape[0] == 0:
        return np.zeros(tuple(dims), dtype=bool), lo, 0

    from scipy.spatial import cKDTree

    centers = lo + (candidates + 0.5) * cell
    k = min(6, positions.shape[0])
    dist, idx = cKDTree(positions).query(centers, k=k)
    dist = dist.reshape(len(centers), k)
    idx = idx.reshape(len(centers), k)
    if normals is not None:
        # Max over nearby tangent planes: a point counts as inside only
        # if every local plane agrees, which keeps voxels just outside
        # edges and corners (where the nearest surfel's normal is
        # uninformative) from slipping in.
        normals = np.asarray(normals, dtype=np.float64)
        delta = centers[:, None, :] - positions[idx]
        per_plane = np.einsum("nkj,nkj->nk", delta, normals[idx])
        per_plane[dist > 2.5 * cell] = -np.inf  # only trust close planes
        per_plane[:, 0] = np.where(
            np.isfinite(per_plane[:, 0]),
            per_plane[:, 0],
            np.einsum("nj,nj->n", centers - positions[idx[:, 0]], normals[idx[:, 0]]),
        )
        signed = per_plane.max(axis=1)
    else:
        # No orientation information: treat the surfel layer itself as
        # the surface and require a half-cell clearance.
        signed = dist[:, 0] - 0.5 * cell

    interior = np.zeros(tuple(dims), dtype=bool)
    keep = signed < -margin * cell
    ok = candidates[keep]
    interior[ok[:, 0], ok[:, 1], ok[:, 2]] = True
    volume_voxels = int((signed < 0).sum())
    return interior, lo, volume_voxels


def fill_interior(obj: ObjectSurfels, particle_size: float, seed: int = 0) -> ObjectSurfels:
    """Return a copy of obj with interior particles populated.

    Idempotent: an object that already has interior particles is
    returned unchanged (copied), so re-filling cannot duplicate mass.
    Thin materials (cloth) pass through untouched.  Raises
    NonWatertightError when the flood fill encloses no voxels.
    """
    if obj.material.kind not in VOLUMETRIC_KINDS:
        return obj.copy()
    out = obj.copy()
    if out.interior_positions.shape[0] > 0:
        return out

    cell = float(particle_size)
    from ..geometry import quat_to_matrix

    normals = quat_to_matrix(out.cloud.orientations)[:, :, 2]
    interior, lo, volume_voxels = interior_voxel_mask(out.cloud.positions, cell, normals=normals)
    n_interior = int(interior.sum())
    if n_interior == 0:
        raise NonWatertightError(
            f"object '{obj.name}': surfel shell is not watertight at resolution {cell} "
            "(flood fill found no enclosed voxels)"
        )

    idx = np.argwhere(interior)
    centers = lo + (idx + 0.5) * cell
    rng = np.random.default_rng(seed)
    jitter = rng.uniform(-0.25 * cell, 0.25 * cell, size=centers.shape)
    out.interior_positions = centers + jitter
    if len(out.cloud) > 0:
        mean_v = out.velocities.mean(axis=0)
    else:
        mean_v = np.zeros(3)
    out.interior_velocities = np.tile(mean_v, (n_interior, 1))
    out.estimated_volume = volume_voxels * cell**3
    return out


def particle_masses(obj: ObjectSurfels, particle_size: float) -> np.ndarray:
    """Per-particle mass, (n_particles,).

    Volumetric objects spread rho * estimated_volume uniformly over all
    particles so the body's total mass matches its volume regardless of
    how thick the sampled shell is.  Thin objects (cloth) fall back to a
    cubic-cell mass per surfel.
    """
    n = obj.n_particles
    rho = obj.material.density
    vol = obj.estimated_volume
    if vol is not None and vol > 0.0 and n > 0:
        return np.full(n, rho * vol / n)
    return np.full(n, rho * float(particle_size) ** 3)


def nearest_particles(queries: np.ndarray, points: np.ndarray, k: int, chunk: int = 256) -> np.ndarray:
    """Exact k-nearest indices, ties broken by ascending point index."""
    queries = np.asarray(queries, dtype=np.float64)
    points = np.asarray(points, dtype=np.float64)
    m = points.shape[0]
    k = min(k, m)
    # Candidate pool with slack so equal-distance runs at the cutoff
    # still get resolved by index order.
    cand = min(m, max(k + 22, 32))
    out = np.empty((queries.shape[0], k), dtype=np.int64)
    p_sq = (points**2).sum(axis=1)
    for s in range(0, queries.shape[0], chunk):
        q = queries[s : s + chunk]
        d2 = (q**2).sum(axis=1)[:, None] - 2.0 * (q @ points.T) + p_sq[None, :]
        np.maximum(d2, 0.0, out=d2)
        if cand < m:
            part = np.argpartition(d2, cand - 1, axis=1)[:, :cand]
        else:
            part = np.broadcast_to(np.arange(m), (q.shape[0], m))
        pd = np.take_along_axis(d2, part, axis=1)
        order = np.lexsort((part, pd), axis=1)[:, :k]
        out[s : s + chunk] = np.take_along_axis(part, order, axis=1)
    return out


def bind_surfels(obj: ObjectSurfels, k: int = BINDING_SIZE) -> ObjectSurfels:
    """Attach each surfel to its k nearest particles (surfels included).

    A surfel coincides with its own surface particle, so index i always
    appears in binding row i.
    """
    out = obj.copy()
    particles = out.particle_positions()
    if particles.shape[0] == 0:
        raise ValueError(f"bind_surfels: object '{obj.name}' has no particles")
    out.binding = nearest_particles(out.cloud.positions, particles, k)
    return out
