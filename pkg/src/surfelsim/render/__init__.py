from .io import (
    load_video_manifest,
    read_flo,
    read_pgm,
    read_ppm,
    save_video,
    write_flo,
    write_pgm,
    write_ppm,
)
from .rasterizer import (
    RenderResult,
    Splats,
    rasterize,
    rasterize_backward,
    render_scene,
    scene_splats,
)
from .video import render_trajectory

__all__ = [
    "RenderResult",
    "Splats",
    "load_video_manifest",
    "rasterize",
    "rasterize_backward",
    "read_flo",
    "read_pgm",
    "read_ppm",
    "render_scene",
    "render_trajectory",
    "save_video",
    "scene_splats",
    "write_flo",
    "write_pgm",
    "write_ppm",
]
