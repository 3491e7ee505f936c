"""Scene data model: cameras, materials, surfel clouds, objects.

A scene is a camera, a static background surfel cloud, and a list of
dynamic objects.  Each object carries its render surfels plus the
simulation-side extras (interior particles, edge connectivity, particle
binding) that the solvers and the surfel updater need.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from ..geometry import look_at_matrix

MATERIAL_KINDS = ("rigid", "elastic", "liquid", "granular", "cloth", "smoke")

# Which solver family advances each material kind.
SOLVER_OF_KIND = {
    "rigid": "rigid",
    "elastic": "mpm",
    "liquid": "mpm",
    "granular": "mpm",
    "cloth": "pbd",
    "smoke": "pbd",
}

# Kinds whose surfels enclose a volume that must be particle-filled.
VOLUMETRIC_KINDS = ("rigid", "elastic", "liquid", "granular", "smoke")

BINDING_SIZE = 10


@dataclass
class Camera:
    """Pinhole camera with a world-to-camera extrinsic."""

    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int
    world_to_camera: np.ndarray = field(default_factory=lambda: np.eye(4))

    @classmethod
    def look_at(cls, eye, target, *, width, height, focal, up=(0.0, 0.0, 1.0)):
        return cls(
            fx=float(focal),
            fy=float(focal),
            cx=width / 2.0,
            cy=height / 2.0,
            width=int(width),
            height=int(height),
            world_to_camera=look_at_matrix(eye, target, up),
        )

    def to_camera(self, points: np.ndarray) -> np.ndarray:
        points = np.atleast_2d(np.asarray(points, dtype=np.float64))
        m = self.world_to_camera
        return points @ m[:3, :3].T + m[:3, 3]

    def project(self, points: np.ndarray):
        """Project world points to pixel coordinates.

        Returns (uv, depth) where uv is (N, 2) in pixels and depth the
        camera-space z.  Points at or behind the camera plane get depth
        <= 0 and their uv is not meaningful.
        """
        cam = self.to_camera(points)
        z = cam[:, 2]
        safe = np.where(np.abs(z) < 1e-12, 1e-12, z)
        u = self.fx * cam[:, 0] / safe + self.cx
        v = self.fy * cam[:, 1] / safe + self.cy
        return np.stack([u, v], axis=1), z

    def copy(self) -> "Camera":
        return replace(self, world_to_camera=self.world_to_camera.copy())


@dataclass
class Material:
    """Per-object physical parameters; only the fields for `kind` are used."""

    kind: str
    density: float = 1000.0
    youngs_modulus: float = 3e5
    poisson: float = 0.2
    friction: float = 0.1
    friction_angle_deg: float = 45.0
    stretch_compliance: float = 1e-7
    bending_compliance: float = 1e-5
    viscosity: float = 0.1

    @classmethod
    def rigid(cls, density=1000.0, friction=0.1):
        return cls(kind="rigid", density=density, friction=friction)

    @classmethod
    def elastic(cls, density=1000.0, youngs_modulus=3e5, poisson=0.2, friction=0.1):
        return cls(kind="elastic", density=density, youngs_modulus=youngs_modulus,
                   poisson=poisson, friction=friction)

    @classmethod
    def liquid(cls, density=1000.0, youngs_modulus=1e7, poisson=0.2):
        return cls(kind="liquid", density=density, youngs_modulus=youngs_modulus, poisson=poisson)

    @classmethod
    def granular(cls, density=1000.0, youngs_modulus=1e6, poisson=0.2, friction_angle_deg=45.0):
        return cls(
            kind="granular",
            density=density,
            youngs_modulus=youngs_modulus,
            poisson=poisson,
            friction_angle_deg=friction_angle_deg,
        )

    @classmethod
    def cloth(cls, density=200.0, stretch_compliance=1e-7, bending_compliance=1e-5):
        return cls(
            kind="cloth",
            density=density,
            stretch_compliance=stretch_compliance,
            bending_compliance=bending_compliance,
        )

    @classmethod
    def smoke(cls, density=1.0, viscosity=0.1):
        return cls(kind="smoke", density=density, viscosity=viscosity)

    def lame(self):
        """(mu, lam) Lame parameters from Young's modulus and Poisson ratio."""
        e, nu = self.youngs_modulus, self.poisson
        mu = e / (2.0 * (1.0 + nu))
        lam = e * nu / ((1.0 + nu) * (1.0 - 2.0 * nu))
        return mu, lam

    def bulk_modulus(self):
        return self.youngs_modulus / (3.0 * (1.0 - 2.0 * self.poisson))


@dataclass
class Surfel:
    """A single oriented Gaussian surface element."""

    position: np.ndarray
    orientation: np.ndarray  # unit quaternion, scalar first
    scale: np.ndarray  # two tangential extents, meters
    opacity: float
    color: np.ndarray  # rgb in [0, 1]


@dataclass
class SurfelCloud:
    """Struct-of-arrays surfel storage; all arrays share leading dim N."""

    positions: np.ndarray
    orientations: np.ndarray
    scales: np.ndarray
    opacities: np.ndarray
    colors: np.ndarray

    def __len__(self):
        return self.positions.shape[0]

    def at(self, i: int) -> Surfel:
        return Surfel(
            position=self.positions[i],
            orientation=self.orientations[i],
            scale=self.scales[i],
            opacity=float(self.opacities[i]),
            color=self.colors[i],
        )

    def copy(self) -> "SurfelCloud":
        return SurfelCloud(
            self.positions.copy(),
            self.orientations.copy(),
            self.scales.copy(),
            self.opacities.copy(),
            self.colors.copy(),
        )

    @classmethod
    def empty(cls) -> "SurfelCloud":
        return cls(
            np.zeros((0, 3)), np.zeros((0, 4)), np.zeros((0, 2)), np.zeros(0), np.zeros((0, 3))
        )

    @classmethod
    def from_fields(cls, positions, orientations=None, scales=None, opacities=None, colors=None):
        positions = np.asarray(positions, dtype=np.float64).reshape(-1, 3)
        n = positions.shape[0]
        if orientations is None:
            orientations = np.tile(np.array([1.0, 0.0, 0.0, 0.0]), (n, 1))
        if scales is None:
            scales = np.full((n, 2), 0.01)
        if opacities is None:
            opacities = np.ones(n)
        if colors is None:
            colors = np.full((n, 3), 0.5)
        return cls(
            positions,
            np.asarray(orientations, dtype=np.float64).reshape(n, 4),
            np.asarray(scales, dtype=np.float64).reshape(n, 2),
            np.asarray(opacities, dtype=np.float64).reshape(n),
            np.asarray(colors, dtype=np.float64).reshape(n, 3),
        )

    @staticmethod
    def concat(clouds) -> "SurfelCloud":
        clouds = list(clouds)
        if not clouds:
            return SurfelCloud.empty()
        return SurfelCloud(
            np.vstack([c.positions for c in clouds]),
            np.vstack([c.orientations for c in clouds]),
            np.vstack([c.scales for c in clouds]),
            np.concatenate([c.opacities for c in clouds]),
            np.vstack([c.colors for c in clouds]),
        )

    def to_rows(self) -> np.ndarray:
        """Flatten to (N, 13) rows: position, quaternion, scale, opacity, color."""
        return np.hstack(
            [self.positions, self.orientations, self.scales, self.opacities[:, None], self.colors]
        )

    @classmethod
    def from_rows(cls, rows) -> "SurfelCloud":
        rows = np.asarray(rows, dtype=np.float64).reshape(-1, 13)
        return cls(
            rows[:, 0:3].copy(),
            rows[:, 3:7].copy(),
            rows[:, 7:9].copy(),
            rows[:, 9].copy(),
            rows[:, 10:13].copy(),
        )


def symmetric_edges(pairs: np.ndarray) -> np.ndarray:
    """Expand undirected (i, j) pairs to the symmetric directed form."""
    pairs = np.asarray(pairs, dtype=np.int64).reshape(-1, 2)
    if pairs.shape[0] == 0:
        return pairs
    both = np.vstack([pairs, pairs[:, ::-1]])
    return np.unique(both, axis=0)


def undirected_edges(edges: np.ndarray) -> np.ndarray:
    """Unique i < j pairs from a directed edge array."""
    edges = np.asarray(edges, dtype=np.int64).reshape(-1, 2)
    if edges.shape[0] == 0:
        return edges
    lo = np.minimum(edges[:, 0], edges[:, 1])
    hi = np.maximum(edges[:, 0], edges[:, 1])
    return np.unique(np.stack([lo, hi], axis=1), axis=0)


@dataclass
class ObjectSurfels:
    """One dynamic object: render surfels plus simulation state.

    The full particle set of an object is the surfel positions followed
    by the interior particles, in that order; `binding` indexes into it.
    Edges are stored as directed index pairs whose adjacency must be
    symmetric (both (i, j) and (j, i) present).
    """

    name: str
    material: Material
    cloud: SurfelCloud
    velocities: np.ndarray | None = None  # per-surfel, (N, 3)
    edges: np.ndarray = field(default_factory=lambda: np.zeros((0, 2), dtype=np.int64))
    triangles: np.ndarray = field(default_factory=lambda: np.zeros((0, 3), dtype=np.int64))
    interior_positions: np.ndarray = field(default_factory=lambda: np.zeros((0, 3)))
    interior_velocities: np.ndarray = field(default_factory=lambda: np.zeros((0, 3)))
    binding: np.ndarray | None = None  # (N, K) particle indices
    pinned: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.int64))
    gravity_enabled: bool = True
    estimated_volume: float | None = None  # from the voxel fill, meters^3

    def __post_init__(self):
        if self.velocities is None:
            self.velocities = np.zeros((len(self.cloud), 3))

    @property
    def n_surfels(self) -> int:
        return len(self.cloud)

    @property
    def n_particles(self) -> int:
        return len(self.cloud) + self.interior_positions.shape[0]

    def particle_positions(self) -> np.ndarray:
        return np.vstack([self.cloud.positions, self.interior_positions])

    def particle_velocities(self) -> np.ndarray:
        return np.vstack([self.velocities, self.interior_velocities])

    def copy(self) -> "ObjectSurfels":
        return ObjectSurfels(
            name=self.name,
            material=replace(self.material),
            cloud=self.cloud.copy(),
            velocities=self.velocities.copy(),
            edges=self.edges.copy(),
            triangles=self.triangles.copy(),
            interior_positions=self.interior_positions.copy(),
            interior_velocities=self.interior_velocities.copy(),
            binding=None if self.binding is None else self.binding.copy(),
            pinned=self.pinned.copy(),
            gravity_enabled=self.gravity_enabled,
            estimated_volume=self.estimated_volume,
        )


@dataclass
class Scene:
    """Camera + static background surfels + dynamic objects."""

    camera: Camera
    background: SurfelCloud
    objects: list[ObjectSurfels] = field(default_factory=list)

    def copy(self) -> "Scene":
        return Scene(
            camera=self.camera.copy(),
            background=self.background.copy(),
            objects=[o.copy() for o in self.objects],
        )

    def all_surfels(self) -> SurfelCloud:
        return SurfelCloud.concat([self.background] + [o.cloud for o in self.objects])

    def bounds(self, pad_fraction: float = 0.0):
        """Axis-aligned bounds over all surfels and interior particles."""
        pts = [self.background.positions] + [o.particle_positions() for o in self.objects]
        pts = np.vstack([p for p in pts if p.shape[0]])
        lo = pts.min(axis=0)
        hi = pts.max(axis=0)
        if pad_fraction:
            span = np.maximum(hi - lo, 1e-6)
            lo = lo - pad_fraction * span
            hi = hi + pad_fraction * span
        return lo, hi
