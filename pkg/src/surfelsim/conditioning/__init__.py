from .generate import (
    DenoiserInterface,
    make_oracle_denoiser,
    run_conditioned_generation,
    sampler_step,
)
from .noise import StructuredNoise, build_structured_noise, dump_noise, load_noise, warp_noise
from .schedule import DiffusionSchedule, scaled_linear_alpha

__all__ = [
    "DenoiserInterface",
    "DiffusionSchedule",
    "StructuredNoise",
    "build_structured_noise",
    "dump_noise",
    "load_noise",
    "make_oracle_denoiser",
    "run_conditioned_generation",
    "sampler_step",
    "scaled_linear_alpha",
    "warp_noise",
]
