"""Reverse-diffusion loop driving the composer.

Trajectories are independent: trajectory ``i`` under seed ``s`` draws all of
its randomness from ``SeedSequence([s, i])``. Work is split into fixed-size
chunks, so the worker count never changes a single output bit.
"""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .composer import GuidanceConfig, compose_step, guided_score, naive_compose
from .errors import InvalidRange, MissingWeights
from .score_models import NoiseSchedule

CHUNK_SIZE = 256
METHODS = ("gated", "naive", "base")


@dataclass(frozen=True)
class SamplerConfig:
    schedule: NoiseSchedule
    mode: str = "deterministic"
    seed: int = 0
    record_weights: bool = False
    record_latents: bool = False

    def __post_init__(self):
        if self.mode not in ("deterministic", "ancestral"):
            raise InvalidRange(f"unknown sampler mode {self.mode!r}")
        if not 0 <= int(self.seed) < 2**64:
            raise InvalidRange("seed must be an unsigned 64-bit integer")

    @property
    def steps(self) -> int:
        return self.schedule.total_steps


@dataclass
class StepRecord:
    t: int
    omega_raw: np.ndarray | None = None  # (n, N, P)
    omega_gated: np.ndarray | None = None
    z: np.ndarray | None = None  # z_t before the update
    x0_pred: np.ndarray | None = None


@dataclass
class Trajectory:
    """A batch of trajectories sampled with one configuration."""

    steps: list[StepRecord]
    final: np.ndarray  # (n, H, W, C)
    n_adapters: int = 0
    meta: dict = field(default_factory=dict)

    @property
    def has_weights(self) -> bool:
        return bool(self.steps) and self.steps[0].omega_gated is not None


def initial_noise(seed: int, index: int, shape, steps: int, ancestral: bool):
    rng = np.random.default_rng(np.random.SeedSequence([int(seed), int(index)]))
    z = rng.standard_normal(shape)
    noise = rng.standard_normal((steps, *shape)) if ancestral else None
    return z, noise


def _predict(method, base, adapters, z, t, c, cfg: GuidanceConfig):
    if method == "gated":
        return compose_step(base, adapters, z, t, c, cfg)
    if method == "naive":
        conds = [a.eps(z, t, c) for a in adapters]
        if cfg.guidance_scale == 1.0:
            unconds = conds  # guidance at s=1 ignores the unconditional branch
        else:
            unconds = [a.eps(z, t, None) for a in adapters]
        return naive_compose(conds, unconds, cfg.naive_weights, cfg.guidance_scale), None, None
    if cfg.guidance_scale == 1.0:
        return base.eps(z, t, c), None, None
    return guided_score(base.eps(z, t, c), base.eps(z, t, None), cfg.guidance_scale), None, None


def _run_chunk(indices, base, adapters, c, cfg, scfg: SamplerConfig, method):
    sched = scfg.schedule
    T = sched.total_steps
    shape = tuple(base.shape)
    ancestral = scfg.mode == "ancestral"
    draws = [initial_noise(scfg.seed, i, shape, T, ancestral) for i in indices]
    z = np.stack([d[0] for d in draws])
    noise = np.stack([d[1] for d in draws], axis=1) if ancestral else None  # (T, n, ...)
    records = []
    for k, t in enumerate(range(T, 0, -1)):
        eps, omega_raw, omega_gated = _predict(method, base, adapters, z, t, c, cfg)
        ab_t, ab_prev = sched[t], sched[t - 1]
        x0 = (z - np.sqrt(1.0 - ab_t) * eps) / np.sqrt(ab_t)
        rec = StepRecord(t)
        if scfg.record_weights and omega_gated is not None:
            rec.omega_raw, rec.omega_gated = omega_raw, omega_gated
        if scfg.record_latents:
            rec.z, rec.x0_pred = z, x0
        records.append(rec)
        if ancestral:
            sigma = np.sqrt((1.0 - ab_prev) / (1.0 - ab_t) * (1.0 - ab_t / ab_prev))
            direction = np.sqrt(max(1.0 - ab_prev - sigma**2, 0.0))
            z = np.sqrt(ab_prev) * x0 + direction * eps + sigma * noise[k]
        else:
            z = np.sqrt(ab_prev) * x0 + np.sqrt(1.0 - ab_prev) * eps
    return records, z


def _concat(field_values):
    if field_values[0] is None:
        return None
    return np.concatenate(field_values, axis=0)


def sample(base, adapters: Sequence, condition, cfg: GuidanceConfig, scfg: SamplerConfig,
           n_trajectories: int = 1, *, method: str = "gated", jobs: int = 1,
           first_index: int = 0) -> Trajectory:
    """Run ``n_trajectories`` reverse trajectories from ``z_T ~ N(0, I)``.

    ``method`` selects the per-step predictor: ``"gated"`` (similarity-gated
    composition), ``"naive"`` (average of per-adapter guidance) or
    ``"base"`` (plain guidance on ``base`` alone, adapters ignored).
    """
    if method not in METHODS:
        raise InvalidRange(f"unknown method {method!r}")
    if method != "base" and not adapters:
        raise InvalidRange(f"method {method!r} needs at least one adapter")
    if n_trajectories < 1:
        raise InvalidRange("n_trajectories must be positive")
    if tuple(scfg.schedule.alpha_bar) != tuple(base.schedule.alpha_bar):
        raise InvalidRange("sampler schedule differs from the model schedule")
    idx = np.arange(first_index, first_index + n_trajectories)
    chunks = [idx[i:i + CHUNK_SIZE] for i in range(0, n_trajectories, CHUNK_SIZE)]
    run = lambda ch: _run_chunk(ch, base, adapters, condition, cfg, scfg, method)  # noqa: E731
    if jobs > 1 and len(chunks) > 1:
        with ThreadPoolExecutor(max_workers=jobs) as pool:
            results = list(pool.map(run, chunks))
    else:
        results = [run(ch) for ch in chunks]
    steps = []
    for k in range(scfg.steps):
        recs = [r[0][k] for r in results]
        steps.append(StepRecord(
            recs[0].t,
            _concat([r.omega_raw for r in recs]),
            _concat([r.omega_gated for r in recs]),
            _concat([r.z for r in recs]),
            _concat([r.x0_pred for r in recs]),
        ))
    final = np.concatenate([r[1] for r in results], axis=0)
    n_ad = len(adapters) if method != "base" else 0
    return Trajectory(steps, final, n_ad, {"method": method, "seed": scfg.seed})


def omega_trace(traj: Trajectory) -> np.ndarray:
    """Mean gated weight per step and adapter, shape ``(T, N)``.

    Averages over patches and over every trajectory in the batch. Row ``k``
    belongs to ``traj.steps[k].t``.
    """
    if not traj.has_weights:
        raise MissingWeights("trajectory was sampled without record_weights")
    return np.stack([rec.omega_gated.mean(axis=(0, -1)) for rec in traj.steps])
