"""Similarity-gated composition of low-rank adapters for diffusion models."""

from .composer import (
    GuidanceConfig,
    StepResult,
    TemperatureSchedule,
    adaptive_tau,
    compose_conditional,
    compose_step,
    compose_unconditional,
    guided_score,
    naive_compose,
    similarity_matrix,
    softmin_gate,
    topk_mask,
)
from .sampler import SamplerConfig, Trajectory, omega_trace, sample
from .score_models import (
    GaussianComponent,
    GaussianScoreModel,
    LowRankAdapter,
    NoiseSchedule,
    build_vp_schedule,
    composed_target,
    merge_adapters,
    similarity_probe,
)

__version__ = "0.1.0"

__all__ = [
    "__version__",
    "GaussianComponent",
    "GaussianScoreModel",
    "GuidanceConfig",
    "LowRankAdapter",
    "NoiseSchedule",
    "SamplerConfig",
    "StepResult",
    "TemperatureSchedule",
    "Trajectory",
    "adaptive_tau",
    "build_vp_schedule",
    "compose_conditional",
    "compose_step",
    "compose_unconditional",
    "composed_target",
    "guided_score",
    "merge_adapters",
    "naive_compose",
    "omega_trace",
    "sample",
    "similarity_matrix",
    "similarity_probe",
    "softmin_gate",
    "topk_mask",
]
