"""Turn the models section of a config into score models."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ..score_models import (
    GaussianComponent,
    GaussianScoreModel,
    LowRankAdapter,
    NoiseSchedule,
    build_vp_schedule,
)
from .config import ExperimentConfig, LatentSpec, Region


@dataclass
class Testbed:
    schedule: NoiseSchedule
    base: GaussianScoreModel
    adapters: dict[str, LowRankAdapter]

    def select(self, names=None) -> list[LowRankAdapter]:
        if names is None:
            return list(self.adapters.values())
        return [self.adapters[n] for n in names]


def region_mask(region: Region, latent: LatentSpec) -> np.ndarray:
    m = np.zeros((latent.height, latent.width, latent.channels))
    ch = slice(None) if region.channels is None else slice(*region.channels)
    m[slice(*region.rows), slice(*region.cols), ch] = 1.0
    return m


def _embeddings(cfg: ExperimentConfig) -> list[np.ndarray]:
    conds = cfg.models.conditions
    if conds[0].embedding is not None:
        return [np.asarray(c.embedding, dtype=np.float64) for c in conds]
    k = len(conds)
    rho = cfg.models.embedding_overlap
    return [np.eye(k)[i] + rho for i in range(k)]


def responsive_direction(base: GaussianScoreModel, trained) -> np.ndarray:
    """Down-projection ``v`` with ``v . e_c == 1`` for every trained condition.

    Minimum-norm solution inside the span of the trained embeddings.
    """
    emb = np.stack([base.embedding(c) for c in trained], axis=1)
    coef = np.linalg.lstsq(emb.T @ emb, np.ones(len(trained)), rcond=None)[0]
    return emb @ coef


def build_testbed(cfg: ExperimentConfig) -> Testbed:
    latent = cfg.latent
    s = cfg.sampler
    schedule = build_vp_schedule(s.steps, s.beta_start, s.beta_end)
    comps = {}
    for cond, emb in zip(cfg.models.conditions, _embeddings(cfg)):
        mean = np.full((latent.height, latent.width, latent.channels), cond.fill)
        for reg in cond.regions:
            mask = region_mask(reg, latent).astype(bool)
            mean[mask] = reg.value
        comps[cond.name] = GaussianComponent(mean, cond.variance, cond.weight, emb)
    base = GaussianScoreModel(comps, schedule)
    adapters = {}
    for spec in cfg.models.adapters:
        mask = region_mask(spec.region, latent).ravel()
        if spec.site == "mean":
            up = (spec.shift * spec.region.value * mask)[:, None]
            down = responsive_direction(base, spec.trained_conditions)[:, None]
        else:
            support = np.flatnonzero(mask)
            rng = np.random.default_rng(spec.seed)
            q, _ = np.linalg.qr(rng.standard_normal((support.size, spec.rank)))
            basis = np.zeros((mask.size, spec.rank))
            basis[support] = q
            up, down = spec.shift * spec.region.value * basis, basis
        adapters[spec.name] = LowRankAdapter(
            base, up, down, strength=spec.strength,
            trained_conditions=spec.trained_conditions, site=spec.site,
            ood_decay=spec.ood_decay, uncond_gate=spec.uncond_gate, name=spec.name,
        )
    return Testbed(schedule, base, adapters)
