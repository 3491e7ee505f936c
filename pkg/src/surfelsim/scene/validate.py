"""Scene validation: one diagnostic per violated field."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .types import MATERIAL_KINDS, Scene, SurfelCloud


@dataclass
class Diagnostic:
    location: str
    field: str
    message: str

    def __str__(self):
        return f"{self.location}.{self.field}: {self.message}"


def _finite(arr):
    return np.isfinite(np.asarray(arr, dtype=np.float64)).all()


def _check_cloud(cloud: SurfelCloud, where: str, out: list):
    n = len(cloud)
    for field_name, arr, shape in (
        ("positions", cloud.positions, (n, 3)),
        ("orientations", cloud.orientations, (n, 4)),
        ("scales", cloud.scales, (n, 2)),
        ("opacities", cloud.opacities, (n,)),
        ("colors", cloud.colors, (n, 3)),
    ):
        if arr.shape != shape:
            out.append(Diagnostic(where, field_name, f"shape {arr.shape} != {shape}"))
            continue
        if not _finite(arr):
            rows = np.unique(np.argwhere(~np.isfinite(np.atleast_2d(arr.T).T))[:, 0])
            listed = ", ".join(map(str, rows[:5])) + (", ..." if rows.size > 5 else "")
            out.append(Diagnostic(where, field_name, f"NaN or Inf at surfel {listed}"))
            continue
        if field_name == "orientations" and n:
            norms = np.linalg.norm(arr, axis=1)
            if np.abs(norms - 1.0).max() > 1e-6:
                out.append(Diagnostic(where, field_name, "quaternions are not unit-norm"))
        if field_name == "scales" and n and arr.min() <= 0:
            out.append(Diagnostic(where, field_name, "non-positive scale"))
        if field_name == "opacities" and n and (arr.min() < 0 or arr.max() > 1):
            out.append(Diagnostic(where, field_name, "opacity outside [0, 1]"))
        if field_name == "colors" and n and (arr.min() < 0 or arr.max() > 1):
            out.append(Diagnostic(where, field_name, "color outside [0, 1]"))


def _check_material(mat, where: str, out: list):
    if mat.kind not in MATERIAL_KINDS:
        out.append(Diagnostic(where, "material.kind", f"unknown kind '{mat.kind}'"))
        return
    if not mat.density > 0:
        out.append(Diagnostic(where, "material.density", "must be positive"))
    if mat.kind in ("elastic", "liquid", "granular"):
        if not mat.youngs_modulus > 0:
            out.append(Diagnostic(where, "material.youngs_modulus", "must be positive"))
        if not 0.0 <= mat.poisson < 0.5:
            out.append(Diagnostic(where, "material.poisson", "must lie in [0, 0.5)"))
    if mat.kind == "rigid" and mat.friction < 0:
        out.append(Diagnostic(where, "material.friction", "must be non-negative"))
    if mat.kind == "granular" and not 0.0 < mat.friction_angle_deg < 90.0:
        out.append(Diagnostic(where, "material.friction_angle_deg", "must lie in (0, 90)"))
    if mat.kind == "cloth":
        if mat.stretch_compliance < 0:
            out.append(Diagnostic(where, "material.stretch_compliance", "must be non-negative"))
        if mat.bending_compliance < 0:
            out.append(Diagnostic(where, "material.bending_compliance", "must be non-negative"))
    if mat.kind == "smoke" and mat.viscosity < 0:
        out.append(Diagnostic(where, "material.viscosity", "must be non-negative"))


def validate_scene(scene: Scene) -> list[Diagnostic]:
    """Collect structural problems; an empty list means the scene is sound."""
    out: list[Diagnostic] = []

    cam = scene.camera
    if cam is None:
        out.append(Diagnostic("camera", "camera", "missing"))
    else:
        if cam.width <= 0 or cam.height <= 0:
            out.append(Diagnostic("camera", "size", "width and height must be positive"))
        if cam.fx <= 0 or cam.fy <= 0:
            out.append(Diagnostic("camera", "focal", "fx and fy must be positive"))
        pose = np.asarray(cam.world_to_camera)
        if pose.shape != (4, 4) or not _finite(pose):
            out.append(Diagnostic("camera", "world_to_camera", "must be a finite 4x4 matrix"))
        else:
            r = pose[:3, :3]
            if np.abs(r @ r.T - np.eye(3)).max() > 1e-5:
                out.append(Diagnostic("camera", "world_to_camera", "rotation block not orthonormal"))

    if len(scene.background) == 0:
        out.append(Diagnostic("background", "surfels", "background is empty"))
    _check_cloud(scene.background, "background", out)

    for i, obj in enumerate(scene.objects):
        where = f"objects[{i}]"
        n = obj.n_surfels
        if n == 0:
            out.append(Diagnostic(where, "surfels", "object has no surfels"))
            continue
        _check_cloud(obj.cloud, where, out)
        _check_material(obj.material, where, out)

        if obj.velocities.shape != (n, 3):
            out.append(Diagnostic(where, "velocities", f"shape {obj.velocities.shape} != {(n, 3)}"))
        elif not _finite(obj.velocities):
            out.append(Diagnostic(where, "velocities", "contains NaN or Inf"))

        edges = obj.edges
        if edges.shape[0]:
            if edges.min() < 0 or edges.max() >= n:
                out.append(Diagnostic(where, "edges", "index out of range"))
            elif (edges[:, 0] == edges[:, 1]).any():
                out.append(Diagnostic(where, "edges", "self-loop on the diagonal"))
            else:
                fwd = set(map(tuple, edges.tolist()))
                if any((j, i2) not in fwd for i2, j in fwd):
                    out.append(Diagnostic(where, "edges", "adjacency is not symmetric"))

        if obj.triangles.shape[0] and (obj.triangles.min() < 0 or obj.triangles.max() >= n):
            out.append(Diagnostic(where, "triangles", "index out of range"))

        m = obj.n_particles
        if obj.interior_positions.shape[0]:
            if not _finite(obj.interior_positions) or not _finite(obj.interior_velocities):
                out.append(Diagnostic(where, "interior_particles", "contains NaN or Inf"))
            if obj.interior_velocities.shape != obj.interior_positions.shape:
                out.append(Diagnostic(where, "interior_particles", "position/velocity shape mismatch"))

        if obj.binding is not None:
            b = obj.binding
            if b.ndim != 2 or b.shape[0] != n:
                out.append(Diagnostic(where, "binding", f"shape {b.shape} != ({n}, k)"))
            elif b.shape[1] != min(10, m):
                out.append(Diagnostic(where, "binding", f"expected {min(10, m)} entries per surfel"))
            elif b.min() < 0 or b.max() >= m:
                out.append(Diagnostic(where, "binding", "particle index out of range"))

        if obj.pinned.shape[0] and (obj.pinned.min() < 0 or obj.pinned.max() >= n):
            out.append(Diagnostic(where, "pinned", "surfel index out of range"))

    return out
