"""Binary trajectory storage: one blob per frame per object plus an index.

A trajectory directory contains:

    manifest.json            times, object names, config, file index
    scene_0.json             full frame-0 scene (camera, background, materials)
    frame_0000_obj00.wply    animated state of object 0 at frame 0
    frame_0000_obj01.wply    ...

Only what changes per frame goes into the binary files; everything
static (colors, scales, topology, camera) lives once in scene_0.json.

A .wply file is little-endian: a 16-byte header (magic ``WPLY``,
version, surfel count, particle count) followed by float32 arrays in
fixed order: surfel positions (n_s, 3), surfel orientations (n_s, 4),
particle positions (n_p, 3), particle velocities (n_p, 3).  Per-surfel
velocities are not stored: rendering needs positions of consecutive
frames and the physics metrics read the particle arrays.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

from .errors import SceneFormatError
from .orchestrator import CoarseTrajectory, ParticleSnapshot, SimConfig
from .scene.io import load_scene, save_scene

MAGIC = b"WPLY"
VERSION = 1
_HEADER = struct.Struct("<4sIII")


def _frame_name(frame: int, obj: int) -> str:
    return f"frame_{frame:04d}_obj{obj:02d}.wply"


def write_wply(path, surfel_positions, surfel_orientations,
               particle_positions, particle_velocities):
    surfel_positions = np.ascontiguousarray(surfel_positions, dtype="<f4")
    surfel_orientations = np.ascontiguousarray(surfel_orientations, dtype="<f4")
    particle_positions = np.ascontiguousarray(particle_positions, dtype="<f4")
    particle_velocities = np.ascontiguousarray(particle_velocities, dtype="<f4")
    n_s = surfel_positions.shape[0]
    n_p = particle_positions.shape[0]
    if surfel_orientations.shape != (n_s, 4):
        raise ValueError("orientation array does not match the surfel count")
    if particle_velocities.shape != (n_p, 3):
        raise ValueError("velocity array does not match the particle count")
    with open(path, "wb") as fh:
        fh.write(_HEADER.pack(MAGIC, VERSION, n_s, n_p))
        fh.write(surfel_positions.tobytes())
        fh.write(surfel_orientations.tobytes())
        fh.write(particle_positions.tobytes())
        fh.write(particle_velocities.tobytes())


def read_wply(path):
    """Returns (surfel positions, orientations, particle positions, velocities)."""
    blob = Path(path).read_bytes()
    if len(blob) < _HEADER.size:
        raise SceneFormatError(f"{path}: too short for a wply header")
    magic, version, n_s, n_p = _HEADER.unpack_from(blob)
    if magic != MAGIC:
        raise SceneFormatError(f"{path}: bad magic {magic!r}")
    if version != VERSION:
        raise SceneFormatError(f"{path}: unsupported wply version {version}")
    counts = (3 * n_s, 4 * n_s, 3 * n_p, 3 * n_p)
    expected = _HEADER.size + 4 * sum(counts)
    if len(blob) != expected:
        raise SceneFormatError(
            f"{path}: expected {expected} bytes for {n_s} surfels and "
            f"{n_p} particles, found {len(blob)}"
        )
    arrays = []
    offset = _HEADER.size
    for count, cols in zip(counts, (3, 4, 3, 3)):
        a = np.frombuffer(blob, dtype="<f4", count=count, offset=offset)
        arrays.append(a.astype(np.float64).reshape(-1, cols))
        offset += 4 * count
    return tuple(arrays)


def save_trajectory(traj: CoarseTrajectory, dirpath) -> Path:
    """Write a trajectory directory; returns its path."""
    root = Path(dirpath)
    root.mkdir(parents=True, exist_ok=True)
    save_scene(traj.frames[0], root / "scene_0.json")

    index = []
    for k, (frame, snaps) in enumerate(zip(traj.frames, traj.particles)):
        row = []
        for i, (obj, snap) in enumerate(zip(frame.objects, snaps)):
            name = _frame_name(k, i)
            write_wply(root / name, obj.cloud.positions, obj.cloud.orientations,
                       snap.positions, snap.velocities)
            row.append(name)
        index.append(row)

    cfg = traj.config
    manifest = {
        "format": "wply-trajectory",
        "version": VERSION,
        "times": np.asarray(traj.times, dtype=float).tolist(),
        "objects": [obj.name for obj in traj.frames[0].objects],
        "config": {
            "step_time": cfg.step_time,
            "substeps": cfg.substeps,
            "total_steps": cfg.total_steps,
            "frame_stride": cfg.frame_stride,
            "particle_size": cfg.particle_size,
            "grid_resolution": cfg.grid_resolution,
        },
        "frames": index,
    }
    with open(root / "manifest.json", "w", encoding="utf-8") as fh:
        json.dump(manifest, fh, indent=1)
    return root


def load_trajectory(dirpath) -> CoarseTrajectory:
    """Rebuild a trajectory from a directory written by `save_trajectory`.

    Frames come back as copies of the stored frame-0 scene with per-frame
    surfel positions and orientations swapped in; interior particles and
    bindings are not reconstructed (the particle state lives in the
    snapshots), so loaded frames are for rendering and metrics, not for
    restarting a simulation mid-run.
    """
    root = Path(dirpath)
    manifest_path = root / "manifest.json"
    if not manifest_path.exists():
        raise SceneFormatError(f"{root}: no manifest.json, not a trajectory directory")
    with open(manifest_path, "r", encoding="utf-8") as fh:
        manifest = json.load(fh)
    if manifest.get("format") != "wply-trajectory":
        raise SceneFormatError(f"{root}: manifest format is not 'wply-trajectory'")

    config = SimConfig(**manifest["config"])
    base = load_scene(root / "scene_0.json", particle_size=config.particle_size)
    names = manifest["objects"]
    if len(base.objects) != len(names):
        raise SceneFormatError(
            f"{root}: scene_0.json has {len(base.objects)} objects, "
            f"manifest lists {len(names)}"
        )

    frames = []
    particles = []
    for row in manifest["frames"]:
        scene = base.copy()
        snaps = []
        for obj, name in zip(scene.objects, row):
            s_pos, s_orient, p_pos, p_vel = read_wply(root / name)
            if s_pos.shape[0] != obj.n_surfels:
                raise SceneFormatError(
                    f"{root / name}: surfel count {s_pos.shape[0]} does not "
                    f"match scene_0.json ({obj.n_surfels})"
                )
            obj.cloud.positions = s_pos
            obj.cloud.orientations = s_orient
            snaps.append(ParticleSnapshot(p_pos, p_vel))
        frames.append(scene)
        particles.append(snaps)

    times = np.asarray(manifest["times"], dtype=np.float64)
    if len(times) != len(frames):
        raise SceneFormatError(
            f"{root}: manifest lists {len(times)} times for {len(frames)} frames"
        )
    return CoarseTrajectory(frames, particles, times, config)
