"""Image, depth, mask and flow files, plus the video directory layout.

Formats are the simple binary classics so nothing outside numpy is
needed: PPM (P6) for color, PGM (P5) for grayscale/masks, and the
Middlebury .flo layout for optical flow.  A rendered video is a
directory of numbered frames with a small JSON manifest.
"""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np

from ..errors import SceneFormatError

FLO_MAGIC = 202021.25
VIDEO_FPS = 5  # one frame per 0.2 s of simulated time


def write_ppm(path, rgb):
    """8-bit binary PPM from float rgb in [0, 1]."""
    rgb = np.asarray(rgb)
    if rgb.ndim != 3 or rgb.shape[2] != 3:
        raise ValueError(f"expected (H, W, 3) rgb, got {rgb.shape}")
    data = (np.clip(rgb, 0.0, 1.0) * 255.0 + 0.5).astype(np.uint8)
    h, w = data.shape[:2]
    with open(path, "wb") as fh:
        fh.write(f"P6\n{w} {h}\n255\n".encode("ascii"))
        fh.write(data.tobytes())


def read_ppm(path):
    with open(path, "rb") as fh:
        blob = fh.read()
    magic, w, h, maxval, offset = _pnm_header(blob, path)
    if magic != b"P6":
        raise SceneFormatError(f"{path}: not a binary PPM (magic {magic!r})")
    n = w * h * 3
    if len(blob) - offset < n:
        raise SceneFormatError(f"{path}: truncated pixel data")
    data = np.frombuffer(blob, dtype=np.uint8, count=n, offset=offset)
    return data.reshape(h, w, 3).astype(np.float64) / maxval


def write_pgm(path, gray):
    """8-bit binary PGM from float values in [0, 1]."""
    gray = np.asarray(gray)
    if gray.ndim != 2:
        raise ValueError(f"expected (H, W) grayscale, got {gray.shape}")
    data = (np.clip(gray, 0.0, 1.0) * 255.0 + 0.5).astype(np.uint8)
    h, w = data.shape
    with open(path, "wb") as fh:
        fh.write(f"P5\n{w} {h}\n255\n".encode("ascii"))
        fh.write(data.tobytes())


def read_pgm(path):
    with open(path, "rb") as fh:
        blob = fh.read()
    magic, w, h, maxval, offset = _pnm_header(blob, path)
    if magic != b"P5":
        raise SceneFormatError(f"{path}: not a binary PGM (magic {magic!r})")
    n = w * h
    if len(blob) - offset < n:
        raise SceneFormatError(f"{path}: truncated pixel data")
    data = np.frombuffer(blob, dtype=np.uint8, count=n, offset=offset)
    return data.reshape(h, w).astype(np.float64) / maxval


def _pnm_header(blob, path):
    # magic, width, height, maxval separated by whitespace; '#' comments
    fields = []
    i = 0
    magic = blob[:2]
    i = 2
    while len(fields) < 3:
        while i < len(blob) and blob[i : i + 1].isspace():
            i += 1
        if i < len(blob) and blob[i : i + 1] == b"#":
            while i < len(blob) and blob[i : i + 1] != b"\n":
                i += 1
            continue
        start = i
        while i < len(blob) and not blob[i : i + 1].isspace():
            i += 1
        if start == i:
            raise SceneFormatError(f"{path}: malformed header")
        fields.append(blob[start:i])
    i += 1  # single whitespace after maxval
    try:
        w, h, maxval = (int(f) for f in fields)
    except ValueError as e:
        raise SceneFormatError(f"{path}: malformed header") from e
    if w <= 0 or h <= 0 or maxval <= 0:
        raise SceneFormatError(f"{path}: bad dimensions {w}x{h} maxval {maxval}")
    return magic, w, h, maxval, i


def write_flo(path, flow):
    """Middlebury optical flow: magic, int32 w/h, float32 (u, v) pairs."""
    flow = np.asarray(flow)
    if flow.ndim != 3 or flow.shape[2] != 2:
        raise ValueError(f"expected (H, W, 2) flow, got {flow.shape}")
    h, w = flow.shape[:2]
    with open(path, "wb") as fh:
        np.array([FLO_MAGIC], dtype="<f4").tofile(fh)
        np.array([w, h], dtype="<i4").tofile(fh)
        fh.write(np.ascontiguousarray(flow, dtype="<f4").tobytes())


def read_flo(path):
    with open(path, "rb") as fh:
        blob = fh.read()
    if len(blob) < 12:
        raise SceneFormatError(f"{path}: too short for a flow header")
    magic = np.frombuffer(blob, dtype="<f4", count=1)[0]
    if magic != np.float32(FLO_MAGIC):
        raise SceneFormatError(f"{path}: bad flow magic {magic}")
    w, h = np.frombuffer(blob, dtype="<i4", count=2, offset=4)
    n = int(w) * int(h) * 2
    if len(blob) != 12 + 4 * n:
        raise SceneFormatError(f"{path}: expected {12 + 4 * n} bytes, found {len(blob)}")
    data = np.frombuffer(blob, dtype="<f4", count=n, offset=12)
    return data.reshape(int(h), int(w), 2).astype(np.float64)


def save_video(dirpath, results, times=None, fps=VIDEO_FPS,
               write_masks=True, write_depth=True) -> Path:
    """Write RenderResults as a frame directory with a manifest.

    Layout: rgb_0000.ppm per frame, flow_0000.flo for frames that carry
    flow, mask_0000_objNN.pgm per object, depth_0000.pgm normalized over
    the whole clip, and video.json tying it together.
    """
    root = Path(dirpath)
    root.mkdir(parents=True, exist_ok=True)
    results = list(results)

    depth_hi = 0.0
    if write_depth:
        for r in results:
            if r.alpha.max() > 1e-12:
                depth_hi = max(depth_hi, float(r.expected_depth.max()))
    entries = []
    for k, r in enumerate(results):
        entry = {"rgb": f"rgb_{k:04d}.ppm"}
        write_ppm(root / entry["rgb"], r.rgb)
        if r.flow is not None:
            entry["flow"] = f"flow_{k:04d}.flo"
            write_flo(root / entry["flow"], r.flow)
        if write_depth:
            entry["depth"] = f"depth_{k:04d}.pgm"
            scale = depth_hi if depth_hi > 0 else 1.0
            write_pgm(root / entry["depth"], r.expected_depth / scale)
        if write_masks:
            entry["masks"] = []
            for i, mask in enumerate(r.masks()):
                name = f"mask_{k:04d}_obj{i:02d}.pgm"
                write_pgm(root / name, mask.astype(np.float64))
                entry["masks"].append(name)
        entries.append(entry)

    h, w = results[0].rgb.shape[:2] if results else (0, 0)
    manifest = {
        "format": "surfel-video",
        "fps": fps,
        "width": w,
        "height": h,
        "frames": entries,
    }
    if times is not None:
        manifest["times"] = np.asarray(times, dtype=float).tolist()
    with open(root / "video.json", "w", encoding="utf-8") as fh:
        json.dump(manifest, fh, indent=1)
    return root


def load_video_manifest(dirpath) -> dict:
    path = Path(dirpath) / "video.json"
    if not path.exists():
        raise SceneFormatError(f"{dirpath}: no video.json manifest")
    with open(path, "r", encoding="utf-8") as fh:
        manifest = json.load(fh)
    if manifest.get("format") != "surfel-video":
        raise SceneFormatError(f"{dirpath}: manifest format is not 'surfel-video'")
    return manifest
