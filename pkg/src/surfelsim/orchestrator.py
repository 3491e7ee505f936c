"""Steps every scene object with its material's solver and collects the
coarse trajectory.

Coupling model: within each substep every object advances against a
frozen view of the world.  The background is a static voxel SDF shared
by all solvers; other objects appear as point-cloud SDF colliders
rebuilt from their positions at the start of the substep.  Coupling is
one-way across stiffness classes: rigid, elastic, and granular bodies
block everything, while liquid, smoke, and cloth yield (a falling ball
pushes water aside instead of resting on its surface).

MPM objects keep the static background inside the grid solve (its node
field is cached) and see dynamic colliders as velocity clamps on the
grid nodes they overlap.  Velocities change but positions are never
teleported, so compression shows up in the deformation gradient and
tracked volumes stay honest.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from .actions import ActionSet, eval_point_force, wind_acceleration
from .errors import SurfelSimError
from .geometry import quat_multiply, quat_normalize, rotate_vectors
from .scene.fill import bind_surfels, fill_interior, particle_masses
from .scene.types import ObjectSurfels, Scene, SOLVER_OF_KIND
from .sdf import CompositeSdf, PointCloudSdf, VoxelSdf
from .solvers import mpm, pbd
from .solvers.rigid import RigidState, rigid_step, shape_match

# Kinds whose particle sets act as colliders for other objects; softer
# kinds (liquid, smoke, cloth) yield to them and never block.
BLOCKING_KINDS = ("rigid", "elastic", "granular")

PBD_ITERATIONS = 10

# Colliders only matter within a couple of particle radii; skip building
# them when bounding boxes are farther apart than this many particle sizes.
_BROAD_PHASE_MARGIN = 4.0


@dataclass
class SimConfig:
    """Global stepping parameters; one simulated second is 100 steps."""

    step_time: float = 1e-2
    substeps: int = 10
    total_steps: int = 960
    frame_stride: int = 20
    particle_size: float = 1e-2
    grid_resolution: int = 128

    def __post_init__(self):
        for name in ("step_time", "particle_size"):
            if not getattr(self, name) > 0:
                raise ValueError(f"SimConfig.{name} must be positive")
        for name in ("substeps", "total_steps", "frame_stride", "grid_resolution"):
            value = getattr(self, name)
            if not (isinstance(value, (int, np.integer)) and value > 0):
                raise ValueError(f"SimConfig.{name} must be a positive integer")
        if self.total_steps % self.frame_stride != 0:
            raise ValueError(
                f"total_steps ({self.total_steps}) must be divisible by "
                f"frame_stride ({self.frame_stride})"
            )

    @property
    def n_frames(self) -> int:
        return self.total_steps // self.frame_stride + 1

    @property
    def frame_time(self) -> float:
        return self.step_time * self.frame_stride


@dataclass(frozen=True)
class ParticleSnapshot:
    """Full particle state of one object at one frame."""

    positions: np.ndarray
    velocities: np.ndarray


@dataclass
class CoarseTrajectory:
    """Physics output: scene snapshots plus raw per-object particle states.

    Snapshot surfels are the smoothed (binding-averaged) render state;
    `particles[k][i]` is the exact solver state of object i at frame k,
    which is what the physics metrics read.
    """

    frames: list
    particles: list
    times: np.ndarray
    config: SimConfig

    @property
    def n_frames(self) -> int:
        return len(self.frames)


def prepare_scene(scene: Scene, config: SimConfig) -> Scene:
    """Copy a scene and make it simulation-ready (filled and bound).

    Idempotent: a scene that already has interior particles and bindings
    comes back as a plain copy.
    """
    out = scene.copy()
    for i, obj in enumerate(out.objects):
        obj = fill_interior(obj, config.particle_size, seed=i)
        if obj.binding is None:
            obj = bind_surfels(obj)
        out.objects[i] = obj
    return out


def update_surfels_from_particles(obj: ObjectSurfels, rest: ObjectSurfels) -> ObjectSurfels:
    """Rebuild render surfels from the current particle state.

    `rest` is the object at its reference configuration (frame 0).
    Deformable surfels move by the mean displacement of their bound
    particles; rigid surfels follow the best-fit rigid transform of the
    whole particle set, composing orientations with its rotation.  All
    non-dynamics attributes (scales, opacities, colors, edges) are taken
    from `rest` unchanged.
    """
    cur_p = obj.particle_positions()
    cur_v = obj.particle_velocities()
    out = rest.copy()
    out.interior_positions = obj.interior_positions.copy()
    out.interior_velocities = obj.interior_velocities.copy()

    if obj.material.kind == "rigid":
        if np.array_equal(cur_p, rest.particle_positions()):
            # nothing moved: skip the fit so rest frames stay bit-exact
            out.velocities = obj.velocities.copy()
            return out
        ones = np.ones(len(cur_p))
        q, t = shape_match(rest.particle_positions(), cur_p, ones)
        out.cloud.positions = rotate_vectors(q, rest.cloud.positions) + t
        out.cloud.orientations = quat_normalize(
            quat_multiply(q, rest.cloud.orientations)
        )
        out.velocities = obj.velocities.copy()
        return out

    if rest.binding is None:
        raise ValueError(f"object '{obj.name}' has no surfel binding")
    rows = rest.binding
    disp = cur_p - rest.particle_positions()
    out.cloud.positions = rest.cloud.positions + disp[rows].mean(axis=1)
    out.velocities = cur_v[rows].mean(axis=1)
    return out


class _ObjectSim:
    """Solver state and dispatch for one object."""

    def __init__(self, index, obj, config):
        self.index = index
        self.obj = obj
        self.kind = obj.material.kind
        self.solver = SOLVER_OF_KIND[self.kind]
        self.masses = particle_masses(obj, config.particle_size)
        pos = obj.particle_positions()
        vel = obj.particle_velocities()
        self.grid = None

        if self.solver == "rigid":
            self.state = RigidState(pos.copy(), pos.copy(), vel.copy(), self.masses)
        elif self.solver == "mpm":
            n = len(pos)
            vol = obj.estimated_volume
            per = vol / n if vol else config.particle_size**3
            self.state = mpm.MpmParticles.from_points(
                pos, vel, self.masses, np.full(n, per)
            )
        elif self.kind == "cloth":
            self.state = pbd.PbdState.for_cloth(
                pos, vel, self.masses, obj.edges, obj.triangles,
                obj.material, pinned=obj.pinned,
            )
        else:  # smoke
            self.state = pbd.PbdState.for_smoke(pos, vel, config.particle_size)

    @property
    def positions(self):
        return self.state.positions

    @property
    def velocities(self):
        return self.state.velocities

    def advance(self, dt, gravity, wind, point_force, background, colliders):
        """One substep under gravity + wind (per mass) + point forces (N)."""
        mat = self.obj.material
        if self.solver == "rigid":
            forces = self.masses[:, None] * (gravity + wind) + point_force
            boundary = _compose(background, colliders)
            self.state = rigid_step(self.state, forces, dt, boundary, mat.friction)
            return

        if self.solver == "mpm":
            extra = self.masses[:, None] * wind + point_force
            if not extra.any():
                extra = None
            self.state = mpm.mpm_step(
                self.state, self.grid, mat, external_accel=gravity,
                boundary=background, dt=dt, particle_forces=extra,
                colliders=colliders,
            )
            return

        accel = gravity + wind + point_force / self.masses[:, None]
        xsph = mat.viscosity if self.kind == "smoke" else 0.0
        self.state = pbd.pbd_step(
            self.state, accel, _compose(background, colliders),
            dt=dt, substeps=1, iterations=PBD_ITERATIONS, xsph=xsph,
        )


def _compose(background, colliders):
    parts = ([background] if background is not None else []) + list(colliders)
    if not parts:
        return None
    if len(parts) == 1:
        return parts[0]
    return CompositeSdf(parts)


def _aabbs_near(lo_a, hi_a, lo_b, hi_b, margin):
    return bool(np.all(lo_a - margin <= hi_b) and np.all(lo_b - margin <= hi_a))


class Simulation:
    """Mutable stepping context holding per-object solver state.

    The working scene always carries the raw particle state (surfel
    positions are the surface particles themselves); the binding-smoothed
    render surfels are produced by `snapshot_scene`.
    """

    def __init__(self, scene: Scene, actions: ActionSet | None = None,
                 config: SimConfig | None = None, start_time: float = 0.0):
        self.config = config if config is not None else SimConfig()
        self.actions = actions if actions is not None else ActionSet()
        self.scene = prepare_scene(scene, self.config)
        self.rest_objects = [obj.copy() for obj in self.scene.objects]
        self.time = float(start_time)
        self.step_index = 0

        lo, hi = self.scene.bounds()
        pad = np.maximum(0.5 * (hi - lo), 10 * self.config.particle_size)
        self.domain = (lo - pad, hi + pad)

        if len(self.scene.background):
            span = float(np.max(self.domain[1] - self.domain[0]))
            cell = max(span / self.config.grid_resolution, self.config.particle_size)
            self.background_sdf = VoxelSdf.from_surfels(
                self.scene.background.positions, self.domain[0], self.domain[1], cell
            )
        else:
            self.background_sdf = None

        self.sims = [
            _ObjectSim(i, obj, self.config) for i, obj in enumerate(self.scene.objects)
        ]
        for sim in self.sims:
            if sim.solver == "mpm":
                sim.grid = mpm.MpmGrid.for_domain(
                    self.domain[0], self.domain[1], self.config.grid_resolution
                )

    def step(self):
        """Advance the whole scene by one step (config.substeps substeps)."""
        cfg = self.config
        h_sub = cfg.step_time / cfg.substeps
        margin = _BROAD_PHASE_MARGIN * cfg.particle_size

        for sub in range(cfg.substeps):
            t_sub = self.time + sub * h_sub
            boxes = [
                (s.positions.min(axis=0), s.positions.max(axis=0)) for s in self.sims
            ]
            frozen = [s.positions.copy() if s.kind in BLOCKING_KINDS else None
                      for s in self.sims]
            collider_cache = {}

            def collider(j):
                if j not in collider_cache:
                    collider_cache[j] = PointCloudSdf(frozen[j], cfg.particle_size)
                return collider_cache[j]

            for i, sim in enumerate(self.sims):
                obj = sim.obj
                n = len(sim.positions)
                gravity = (
                    np.asarray(self.actions.gravity, dtype=np.float64)
                    if obj.gravity_enabled else np.zeros(3)
                )
                wind = (
                    wind_acceleration(self.actions, sim.positions, t_sub)
                    if self.actions.winds else np.zeros((n, 3))
                )
                point = np.zeros((n, 3))
                for pf in self.actions.point_forces:
                    if pf.object_index != i:
                        continue
                    f = eval_point_force(pf, t_sub)
                    if not f.any():
                        continue
                    row = obj.binding[pf.anchor_index]
                    point[row] += f / len(row)

                near = [
                    collider(j)
                    for j in range(len(self.sims))
                    if j != i and frozen[j] is not None
                    and _aabbs_near(*boxes[i], *boxes[j], margin)
                ]
                try:
                    sim.advance(h_sub, gravity, wind, point, self.background_sdf, near)
                except SurfelSimError as e:
                    raise type(e)(f"object {i} ('{obj.name}'): {e}") from e

        for sim in self.sims:
            self._write_back(sim)
        self.time += cfg.step_time
        self.step_index += 1

    def _write_back(self, sim):
        obj = sim.obj
        n_s = obj.n_surfels
        pos, vel = sim.positions, sim.velocities
        obj.cloud.positions[...] = pos[:n_s]
        obj.velocities[...] = vel[:n_s]
        obj.interior_positions[...] = pos[n_s:]
        obj.interior_velocities[...] = vel[n_s:]

    def snapshot_scene(self) -> Scene:
        """Render-ready scene: smoothed surfels, shared static background."""
        objects = [
            update_surfels_from_particles(obj, rest)
            for obj, rest in zip(self.scene.objects, self.rest_objects)
        ]
        return Scene(
            camera=self.scene.camera.copy() if self.scene.camera else None,
            background=self.scene.background,
            objects=objects,
        )

    def snapshot_particles(self) -> list:
        return [
            ParticleSnapshot(s.positions.copy(), s.velocities.copy())
            for s in self.sims
        ]


def step_scene(scene: Scene, actions: ActionSet | None = None,
               config: SimConfig | None = None, t: int = 0) -> Scene:
    """Advance a scene by a single step and return the new scene.

    Stateless convenience wrapper: the returned scene carries raw
    particle state, so repeated calls chain exactly for rigid and PBD
    materials.  MPM materials re-reference their deformation gradient
    each call; multi-step MPM runs should use `Simulation` or
    `run_simulation`, which keep solver state across steps.
    """
    config = config if config is not None else SimConfig()
    sim = Simulation(scene, actions, config, start_time=t * config.step_time)
    sim.step()
    return sim.scene


def run_simulation(scene: Scene, actions: ActionSet | None = None,
                   config: SimConfig | None = None) -> CoarseTrajectory:
    """Run the full coarse simulation, snapshotting every frame_stride steps."""
    config = config if config is not None else SimConfig()
    sim = Simulation(scene, actions, config)

    frames = [sim.scene.copy()]
    particles = [sim.snapshot_particles()]
    times = [0.0]
    for step in range(config.total_steps):
        sim.step()
        if (step + 1) % config.frame_stride == 0:
            frames.append(sim.snapshot_scene())
            particles.append(sim.snapshot_particles())
            times.append(sim.time)
    return CoarseTrajectory(frames, particles, np.asarray(times), config)
