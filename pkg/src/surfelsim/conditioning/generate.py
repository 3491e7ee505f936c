"""Two-level guided sampling around a pluggable denoiser.

The actual video generator is a black box behind DenoiserInterface. What
this module owns is the guidance math: start the sampler partway down the
schedule from a noised copy of the rendered video (so the large-scale
motion is fixed), then a few steps later re-pin the background pixels,
leaving the denoiser free only where the masks say things moved.
"""

from dataclasses import dataclass
from typing import Callable

import numpy as np

from ..errors import TopologyMismatchError
from .noise import build_structured_noise
from .schedule import DiffusionSchedule


@dataclass(frozen=True)
class DenoiserInterface:
    """One denoising step: (video at level s, s) -> video at level s-1."""

    name: str
    fn: Callable[[np.ndarray, int], np.ndarray]

    def __call__(self, video, s):
        out = np.asarray(self.fn(video, s))
        if out.shape != video.shape:
            raise TopologyMismatchError(
                f"denoiser '{self.name}' changed dimensions "
                f"{video.shape} -> {out.shape}")
        return out


def sampler_step(video, clean, schedule, s):
    """Deterministic sampler update from level s to s-1 given a clean guess.

    Splits the current state into its implied signal and noise parts and
    reassembles them with the next level's coefficients; at level 0 the
    noise coefficient is zero, so whatever residual is left dies there.
    """
    a_s = schedule.alpha[s]
    a_prev = schedule.alpha[s - 1]
    eps = (video - a_s * clean) / schedule.sigma(s)
    return a_prev * clean + schedule.sigma(s - 1) * eps


def make_oracle_denoiser(kind, schedule=None, target=None):
    """Test doubles for the real generator.

    toward_target: sampler step with the clean prediction pinned to a known
    video, so repeated application telescopes to exactly that video.
    identity_blend: treats its input as already clean, returning its
    projection onto [0, 1].
    """
    if kind == "toward_target":
        if schedule is None or target is None:
            raise ValueError("toward_target needs schedule= and target=")
        target = np.asarray(target, dtype=np.float64)

        def fn(video, s):
            return sampler_step(video, target, schedule, s)

        return DenoiserInterface(name="toward_target", fn=fn)
    if kind == "identity_blend":
        def fn(video, s):
            return np.clip(video, 0.0, 1.0)

        return DenoiserInterface(name="identity_blend", fn=fn)
    raise ValueError(f"unknown oracle denoiser kind '{kind}'")


def run_conditioned_generation(denoiser, schedule, video, flows, mask, seed):
    """Sample a video guided by a rendered clip, its flow, and object masks.

    video is the rendered clip (T+1, H, W, 3) in [0, 1]; flows (T, H, W, 2)
    in pixels; mask (T+1, H, W, 1 or 3), nonzero where objects are (those
    pixels stay with the denoiser, the rest get re-pinned at s2). Returns
    the finished clip clipped to [0, 1]. Deterministic in all arguments.
    """
    video = np.asarray(video, dtype=np.float64)
    flows = np.asarray(flows, dtype=np.float64)
    mask = np.asarray(mask)
    if video.ndim != 4 or video.shape[-1] != 3:
        raise TopologyMismatchError(f"video must be (T+1, H, W, 3), got {video.shape}")
    frames, h, w = video.shape[:3]
    if flows.shape != (frames - 1, h, w, 2):
        raise TopologyMismatchError(
            f"flows {flows.shape} do not match video {video.shape}; "
            f"expected {(frames - 1, h, w, 2)}")
    if mask.shape[:3] != (frames, h, w) or mask.ndim != 4 or mask.shape[3] not in (1, 3):
        raise TopologyMismatchError(
            f"mask {mask.shape} does not match video {video.shape}")
    if schedule.s1 >= schedule.steps:
        raise ValueError(
            f"s1={schedule.s1} must be below the schedule's top level "
            f"{schedule.steps} to leave room for the start of sampling")

    noise = build_structured_noise(flows, schedule.gamma, seed).tensor
    keep = mask > 0.5

    a1 = schedule.alpha[schedule.s1]
    state = a1 * video + schedule.sigma(schedule.s1) * noise
    for s in range(schedule.s1, 0, -1):
        state = denoiser(state, s)
        if s - 1 == schedule.s2:
            a2 = schedule.alpha[schedule.s2]
            pinned = a2 * video + schedule.sigma(schedule.s2) * noise
            state = np.where(keep, state, pinned)
    return np.clip(state, 0.0, 1.0)
