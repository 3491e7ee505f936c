"""Render a coarse trajectory to a video directory, one frame at a time."""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np

from .io import VIDEO_FPS, write_flo, write_pgm, write_ppm
from .rasterizer import render_scene


def render_trajectory(traj, dirpath, fill=(1.0, 1.0, 1.0), fps=VIDEO_FPS,
                      write_masks=True, write_depth=True) -> Path:
    """Rasterize every frame; each carries flow toward the next frame.

    The last frame has no successor and therefore no flow file.  Frames
    are rendered and written one at a time; only the depth maps are held
    back so they can share one normalization over the whole clip.
    """
    root = Path(dirpath)
    root.mkdir(parents=True, exist_ok=True)
    frames = traj.frames
    entries = []
    depths = []
    height = width = 0
    for k, frame in enumerate(frames):
        nxt = frames[k + 1] if k + 1 < len(frames) else None
        r = render_scene(frame, next_scene=nxt, fill=fill)
        height, width = r.rgb.shape[:2]
        entry = {"rgb": f"rgb_{k:04d}.ppm"}
        write_ppm(root / entry["rgb"], r.rgb)
        if r.flow is not None:
            entry["flow"] = f"flow_{k:04d}.flo"
            write_flo(root / entry["flow"], r.flow)
        if write_masks:
            entry["masks"] = []
            for i, mask in enumerate(r.masks()):
                name = f"mask_{k:04d}_obj{i:02d}.pgm"
                write_pgm(root / name, mask.astype(np.float64))
                entry["masks"].append(name)
        if write_depth:
            entry["depth"] = f"depth_{k:04d}.pgm"
            depths.append(r.expected_depth)
        entries.append(entry)

    if write_depth and depths:
        hi = max(float(d.max()) for d in depths)
        scale = hi if hi > 0 else 1.0
        for entry, d in zip(entries, depths):
            write_pgm(root / entry["depth"], d / scale)

    manifest = {
        "format": "surfel-video",
        "fps": fps,
        "width": width,
        "height": height,
        "frames": entries,
        "times": np.asarray(traj.times, dtype=float).tolist(),
    }
    with open(root / "video.json", "w", encoding="utf-8") as fh:
        json.dump(manifest, fh, indent=1)
    return root
