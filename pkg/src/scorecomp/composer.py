"""Similarity-gated composition of several adapters' noise predictions.

One denoising step runs::

    conditional predictions -> channel mean -> patches -> cosine vs base  (omega, N x P)
    omega -> [top-k mask] -> softmin over adapters at temperature tau    (gated)
    gated -> block upsample -> weighted sum of adapter predictions       (conditional aggregate)
    lambda-blend of gated adapter unconditionals with the base's         (unconditional aggregate)
    unconditional + s * (conditional - unconditional)                    (guided prediction)

Adapters that move further away from the base in a patch get more weight
there. Weight matrices carry leading batch axes: ``(..., N, P)``.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import NamedTuple, Sequence

import numpy as np

from .errors import InvalidRange, KOutOfRange, ShapeMismatch
from .tensor_core import as_latent, batched_cosine, channel_mean, kron_upsample, patchify


@dataclass(frozen=True)
class TemperatureSchedule:
    """Softmin temperature per step.

    ``adaptive`` uses ``1 / (max(1, T - t) * 10)``: soft early in sampling
    (large ``t``), sharp late. ``constant`` always returns ``tau0``.
    """

    total_steps: int
    rule: str = "adaptive"
    tau0: float = 1.0

    def __post_init__(self):
        if self.total_steps < 1:
            raise InvalidRange("total_steps must be positive")
        if self.rule not in ("adaptive", "constant"):
            raise InvalidRange(f"unknown temperature rule {self.rule!r}")
        if self.rule == "constant" and not self.tau0 > 0:
            raise InvalidRange("constant temperature must be positive")


def adaptive_tau(schedule: TemperatureSchedule, t: int) -> float:
    if not 0 <= t <= schedule.total_steps:
        raise InvalidRange(f"step {t} outside [0, {schedule.total_steps}]")
    if schedule.rule == "constant":
        return float(schedule.tau0)
    return 1.0 / (max(1, schedule.total_steps - t) * 10)


@dataclass(frozen=True)
class GuidanceConfig:
    guidance_scale: float = 7.0
    recenter_lambda: float = 0.5
    patch_size: int = 2
    tau_rule: str = "adaptive"
    tau_constant: float = 1.0
    temperature_floor: float = 1e-8
    top_k: int | None = None
    topk_scope: str = "patch"
    global_mode: bool = False
    naive_weights: tuple[float, ...] | None = None

    def __post_init__(self):
        if not self.guidance_scale >= 1.0:
            raise InvalidRange(f"guidance_scale must be >= 1, got {self.guidance_scale}")
        if not 0.0 <= self.recenter_lambda <= 1.0:
            raise InvalidRange(f"recenter_lambda must lie in [0, 1], got {self.recenter_lambda}")
        if self.patch_size < 1:
            raise InvalidRange("patch_size must be positive")
        if not self.temperature_floor > 0:
            raise InvalidRange("temperature_floor must be positive")
        if self.top_k is not None and self.top_k < 1:
            raise KOutOfRange(f"top_k must be >= 1, got {self.top_k}")
        if self.topk_scope not in ("patch", "image"):
            raise InvalidRange(f"unknown topk_scope {self.topk_scope!r}")
        TemperatureSchedule(1, self.tau_rule, self.tau_constant)

    def temperature(self, total_steps: int) -> TemperatureSchedule:
        return TemperatureSchedule(total_steps, self.tau_rule, self.tau_constant)

    def tau(self, total_steps: int, t: int) -> float:
        return max(adaptive_tau(self.temperature(total_steps), t), self.temperature_floor)


def _stack(grids: Sequence[np.ndarray], like: np.ndarray) -> np.ndarray:
    """Stack N grids on a new adapter axis just before (H, W, C)."""
    if len(grids) == 0:
        raise ShapeMismatch("at least one adapter prediction is required")
    arrs = [as_latent(g) for g in grids]
    for g in arrs:
        if g.shape != like.shape:
            raise ShapeMismatch(f"grid shape {g.shape} differs from {like.shape}")
    return np.stack(arrs, axis=-4)


def similarity_matrix(base_cond, adapter_conds, d: int) -> np.ndarray:
    """Per-adapter, per-patch cosine similarity to the base: ``(..., N, P)``."""
    base_cond = as_latent(base_cond)
    stacked = _stack(adapter_conds, base_cond)  # (..., N, H, W, C)
    base_p = patchify(channel_mean(base_cond), d)  # (..., P, d*d)
    ada_p = patchify(channel_mean(stacked), d)  # (..., N, P, d*d)
    return batched_cosine(ada_p, base_p[..., None, :, :])


def softmin_gate(omega, tau: float) -> np.ndarray:
    """Softmin over the adapter axis (second to last).

    Entries equal to ``+inf`` are treated as excluded and get weight 0.
    """
    if not tau > 0:
        raise InvalidRange(f"temperature must be positive, got {tau}")
    omega = np.asarray(omega, dtype=np.float64)
    lowest = np.min(omega, axis=-2, keepdims=True)
    e = np.exp(-(omega - lowest) / tau)
    return e / np.sum(e, axis=-2, keepdims=True)


def topk_mask(omega, k: int, scope: str = "patch") -> np.ndarray:
    """Keep the ``k`` least base-like adapters, set the rest to ``+inf``.

    With ``scope="patch"`` selection is independent per patch column; with
    ``scope="image"`` adapters are ranked by their mean similarity over all
    patches. Ties go to the lower adapter index.
    """
    omega = np.asarray(omega, dtype=np.float64)
    n = omega.shape[-2]
    if not 1 <= k <= n:
        raise KOutOfRange(f"k={k} outside [1, {n}]")
    if k == n:
        return omega.copy()
    if scope == "image":
        score = omega.mean(axis=-1, keepdims=True)  # (..., N, 1)
    elif scope == "patch":
        score = omega
    else:
        raise InvalidRange(f"unknown topk scope {scope!r}")
    order = np.argsort(score, axis=-2, kind="stable")
    keep = np.zeros(score.shape, dtype=bool)
    np.put_along_axis(keep, order[..., :k, :], True, axis=-2)
    keep = np.broadcast_to(keep, omega.shape)
    return np.where(keep, omega, np.inf)


def upsample_weights(gated, height: int, width: int, d: int) -> np.ndarray:
    """``(..., N, P)`` per-patch weights to ``(..., N, H, W)`` pixel weights."""
    gated = np.asarray(gated, dtype=np.float64)
    ph, pw = height // d, width // d
    if gated.shape[-1] != ph * pw:
        raise ShapeMismatch(f"{gated.shape[-1]} patches do not tile {height}x{width} at d={d}")
    grid = gated.reshape(*gated.shape[:-1], ph, pw)
    return kron_upsample(grid, d)


def _blend(stacked: np.ndarray, gated: np.ndarray, d: int) -> np.ndarray:
    h, w = stacked.shape[-3], stacked.shape[-2]
    if gated.shape[-2] != stacked.shape[-4]:
        raise ShapeMismatch(f"{gated.shape[-2]} weight rows for {stacked.shape[-4]} adapters")
    up = upsample_weights(gated, h, w, d)[..., None]  # (..., N, H, W, 1)
    return np.sum(up * stacked, axis=-4)


def compose_conditional(base_cond, adapter_conds, gated, d: int) -> np.ndarray:
    """Pixelwise gated sum of the adapters' conditional predictions."""
    base_cond = as_latent(base_cond)
    return _blend(_stack(adapter_conds, base_cond), np.asarray(gated, float), d)


def compose_unconditional(base_uncond, adapter_unconds, gated, lam: float, d: int) -> np.ndarray:
    """``lam * gated adapter aggregate + (1 - lam) * base unconditional``."""
    if not 0.0 <= lam <= 1.0:
        raise InvalidRange(f"lambda must lie in [0, 1], got {lam}")
    base_uncond = as_latent(base_uncond)
    agg = _blend(_stack(adapter_unconds, base_uncond), np.asarray(gated, float), d)
    if lam == 1.0:
        return agg
    if lam == 0.0:
        return base_uncond.copy()
    return lam * agg + (1.0 - lam) * base_uncond


def guided_score(cond_agg, uncond_agg, s: float) -> np.ndarray:
    """Classifier-free guidance: ``uncond + s * (cond - uncond)``."""
    cond_agg = as_latent(cond_agg)
    uncond_agg = as_latent(uncond_agg)
    if cond_agg.shape != uncond_agg.shape:
        raise ShapeMismatch(f"{cond_agg.shape} vs {uncond_agg.shape}")
    if s == 1.0:
        return cond_agg.copy()
    return uncond_agg + s * (cond_agg - uncond_agg)


def naive_compose(adapter_scores_cond, adapter_scores_uncond, w=None, s: float = 7.0) -> np.ndarray:
    """Baseline: average of each adapter's own guided prediction, weighted by ``w``."""
    n = len(adapter_scores_cond)
    if n < 1 or len(adapter_scores_uncond) != n:
        raise ShapeMismatch("need matching, non-empty conditional and unconditional lists")
    w = np.ones(n) if w is None else np.asarray(w, dtype=np.float64)
    if w.shape != (n,):
        raise ShapeMismatch(f"{w.size} weights for {n} adapters")
    out = None
    for wi, ec, eu in zip(w, adapter_scores_cond, adapter_scores_uncond):
        term = wi * guided_score(ec, eu, s)
        out = term if out is None else out + term
    return out / n


class StepResult(NamedTuple):
    eps: np.ndarray
    omega_raw: np.ndarray
    omega_gated: np.ndarray


def gate(omega: np.ndarray, cfg: GuidanceConfig, tau: float) -> np.ndarray:
    if cfg.top_k is not None:
        omega = topk_mask(omega, cfg.top_k, cfg.topk_scope)
    return softmin_gate(omega, tau)


def compose_step(base, adapters, z_t, t: int, c, cfg: GuidanceConfig) -> StepResult:
    """One full composed prediction at step ``t`` for latent(s) ``z_t``.

    In ``global_mode`` the whole grid is a single patch and the base
    unconditional is not blended in (lambda = 1).
    """
    if len(adapters) < 1:
        raise ShapeMismatch("compose_step needs at least one adapter")
    z_t = as_latent(z_t)
    if cfg.top_k is not None and cfg.top_k > len(adapters):
        raise KOutOfRange(f"top_k={cfg.top_k} exceeds {len(adapters)} adapters")
    base_cond = base.eps(z_t, t, c)
    conds = [a.eps(z_t, t, c) for a in adapters]
    if cfg.global_mode:
        omega = _global_similarity(base_cond, conds)
    else:
        omega = similarity_matrix(base_cond, conds, cfg.patch_size)
    tau = cfg.tau(base.schedule.total_steps, t)
    gated = gate(omega, cfg, tau)
    if cfg.global_mode:
        cond_agg = _blend_global(conds, gated)
    else:
        cond_agg = compose_conditional(base_cond, conds, gated, cfg.patch_size)
    if cfg.guidance_scale == 1.0:
        # guided_score returns the conditional aggregate unchanged
        return StepResult(cond_agg.copy(), omega, gated)
    unconds = [a.eps(z_t, t, None) for a in adapters]
    if cfg.global_mode:
        uncond_agg = _blend_global(unconds, gated)
    else:
        d, lam = cfg.patch_size, cfg.recenter_lambda
        if lam == 1.0:
            # base unconditional does not enter; skip evaluating it
            uncond_agg = _blend(_stack(unconds, base_cond), gated, d)
        else:
            uncond_agg = compose_unconditional(base.eps(z_t, t, None), unconds, gated, lam, d)
    eps = guided_score(cond_agg, uncond_agg, cfg.guidance_scale)
    return StepResult(eps, omega, gated)


def _global_similarity(base_cond, conds) -> np.ndarray:
    """Whole-grid similarity, shaped ``(..., N, 1)``."""
    stacked = _stack(conds, base_cond)
    ada = channel_mean(stacked)
    ada = ada.reshape(*ada.shape[:-2], -1)  # (..., N, H*W)
    ref = channel_mean(base_cond)
    ref = ref.reshape(*ref.shape[:-2], 1, -1)
    return batched_cosine(ada, ref)[..., None]


def _blend_global(grids, gated) -> np.ndarray:
    stacked = np.stack(grids, axis=-4)
    return np.sum(gated[..., :, 0, None, None, None] * stacked, axis=-4)
