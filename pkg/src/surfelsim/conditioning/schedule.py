"""Noise schedule for the deterministic sampler.

The signal coefficient alpha[s] scales the clean video at noise level s,
with sqrt(1 - alpha^2) scaling the noise. Level 0 is clean (alpha 1) and
level `steps` is the noisiest the sampler visits. The actual pretrained
generator's schedule is whatever it is; everything downstream is written
against this array, so swapping in measured coefficients is a one-liner.
"""

from dataclasses import dataclass, field

import numpy as np

BETA_MIN = 0.02
BETA_MAX = 0.35


def scaled_linear_alpha(steps):
    """Signal coefficients from a scaled-linear variance schedule."""
    betas = np.linspace(np.sqrt(BETA_MIN), np.sqrt(BETA_MAX), steps) ** 2
    kept = np.cumprod(1.0 - betas)
    return np.concatenate(([1.0], np.sqrt(kept)))


@dataclass
class DiffusionSchedule:
    steps: int = 25
    s1: int = 21  # where the warped-noise video enters the sampler
    s2: int = 18  # where background pixels get pinned back to the render
    gamma: float = 0.4  # fresh-noise fraction mixed into the warped chain
    alpha: np.ndarray = field(default=None, repr=False)

    def __post_init__(self):
        if self.steps < 1:
            raise ValueError("schedule needs at least one step")
        if self.alpha is None:
            self.alpha = scaled_linear_alpha(self.steps)
        self.alpha = np.asarray(self.alpha, dtype=np.float64)
        if self.alpha.shape != (self.steps + 1,):
            raise ValueError(
                f"alpha must have {self.steps + 1} entries (levels 0..steps), "
                f"got shape {self.alpha.shape}")
        if self.alpha[0] != 1.0:
            raise ValueError("alpha[0] must be exactly 1 (level 0 is clean)")
        if not np.all(np.diff(self.alpha) < 0.0):
            raise ValueError("alpha must strictly decrease toward the noisy end")
        if self.alpha[-1] <= 0.0:
            raise ValueError("alpha must stay positive")
        if not 0 <= self.s2 < self.s1 <= self.steps:
            raise ValueError(
                f"need 0 <= s2 < s1 <= steps, got s1={self.s1} s2={self.s2} "
                f"steps={self.steps}")
        if not 0.0 <= self.gamma <= 1.0:
            raise ValueError(f"gamma must be in [0, 1], got {self.gamma}")

    def sigma(self, s):
        """Noise coefficient at level s (signal and noise are unit-variance)."""
        return float(np.sqrt(1.0 - self.alpha[s] ** 2))
