"""Flow-warped noise.

A video generator run from independent per-frame noise invents its own
motion. Transporting the first frame's noise along the rendered optical
flow gives the sampler noise whose temporal correlation already agrees
with the simulated motion, which is most of what steers it.

Transport must not change the per-pixel law: every output pixel below is
exactly one unit Gaussian draw, either carried from a source pixel or
freshly sampled into a hole, so the marginal stays standard normal no
matter what the flow does.
"""

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from ..errors import SceneFormatError
from ..trajectory_io import read_wply, write_wply


@dataclass(frozen=True)
class StructuredNoise:
    tensor: np.ndarray  # (frames, height, width, 3)
    seed: int


def warp_noise(noise, flow, rng):
    """Push noise values forward along flow (pixels), one frame step.

    Each source pixel lands on round(source + flow). When several sources
    collide, the one that moved farthest wins (ties: lowest row-major
    source index). Pixels nobody landed on get fresh draws from rng.
    """
    noise = np.asarray(noise, dtype=np.float64)
    flow = np.asarray(flow, dtype=np.float64)
    h, w = noise.shape[:2]
    if flow.shape != (h, w, 2):
        raise ValueError(f"flow shape {flow.shape} does not match noise {noise.shape}")
    if not np.isfinite(flow).all():
        raise ValueError("flow contains non-finite values")

    gx, gy = np.meshgrid(np.arange(w), np.arange(h))
    tx = np.rint(gx + flow[:, :, 0]).astype(np.int64).ravel()
    ty = np.rint(gy + flow[:, :, 1]).astype(np.int64).ravel()
    inside = (tx >= 0) & (tx < w) & (ty >= 0) & (ty < h)
    src = np.nonzero(inside)[0]
    tgt = ty[src] * w + tx[src]
    mag = np.hypot(flow[:, :, 0], flow[:, :, 1]).ravel()[src]

    # scatter in ascending-magnitude order so the biggest mover is written
    # last and wins; -src breaks magnitude ties in favor of the lowest index
    order = np.lexsort((-src, mag))

    flat = noise.reshape(h * w, -1)
    out = np.empty_like(flat)
    out[tgt[order]] = flat[src[order]]
    written = np.zeros(h * w, dtype=bool)
    written[tgt] = True
    holes = np.nonzero(~written)[0]
    out[holes] = rng.standard_normal((holes.size, flat.shape[1]))
    return out.reshape(noise.shape)


def build_structured_noise(flows, gamma, seed):
    """Noise tensor for a clip: frame 0 fresh, the rest warped along flow.

    flows is (T, H, W, 2), frame t's flow pointing at frame t+1; the result
    has T+1 frames. The warp chain itself stays pure; each emitted frame
    past the first is mixed as sqrt(1-gamma)*warped + sqrt(gamma)*fresh,
    which keeps unit variance while letting gamma dial correlation down.
    """
    flows = np.asarray(flows, dtype=np.float64)
    if flows.ndim != 4 or flows.shape[-1] != 2:
        raise ValueError(f"flows must be (T, H, W, 2), got {flows.shape}")
    if not 0.0 <= gamma <= 1.0:
        raise ValueError(f"gamma must be in [0, 1], got {gamma}")
    t_total, h, w = flows.shape[:3]
    rng = np.random.default_rng(seed)
    out = np.empty((t_total + 1, h, w, 3))
    warped = rng.standard_normal((h, w, 3))
    out[0] = warped
    keep = np.sqrt(1.0 - gamma)
    mix = np.sqrt(gamma)
    for t in range(t_total):
        warped = warp_noise(warped, flows[t], rng)
        # fresh is drawn even at gamma 0 so the stream stays aligned and
        # the warped chain is identical across gamma values for one seed
        fresh = rng.standard_normal((h, w, 3))
        out[t + 1] = keep * warped + mix * fresh
    return StructuredNoise(tensor=out, seed=int(seed))


def dump_noise(dirpath, noise):
    """Write a noise tensor out for inspection, one wply file per frame."""
    dirpath = Path(dirpath)
    dirpath.mkdir(parents=True, exist_ok=True)
    frames, h, w = noise.tensor.shape[:3]
    empty3 = np.zeros((0, 3))
    empty4 = np.zeros((0, 4))
    zeros = np.zeros((h * w, 3))
    for t in range(frames):
        write_wply(dirpath / f"noise_{t:04d}.wply", empty3, empty4,
                   noise.tensor[t].reshape(-1, 3), zeros)
    meta = {"frames": frames, "height": h, "width": w, "seed": noise.seed}
    (dirpath / "noise.json").write_text(json.dumps(meta, indent=1))


def load_noise(dirpath):
    dirpath = Path(dirpath)
    meta_path = dirpath / "noise.json"
    if not meta_path.is_file():
        raise SceneFormatError(f"{dirpath}: no noise.json")
    meta = json.loads(meta_path.read_text())
    h, w = meta["height"], meta["width"]
    out = np.empty((meta["frames"], h, w, 3))
    for t in range(meta["frames"]):
        _, _, values, _ = read_wply(dirpath / f"noise_{t:04d}.wply")
        if values.shape[0] != h * w:
            raise SceneFormatError(
                f"noise frame {t} has {values.shape[0]} values, expected {h * w}")
        out[t] = values.reshape(h, w, 3)
    return StructuredNoise(tensor=out, seed=int(meta["seed"]))
