"""Noise-prediction models: the contract and an analytic Gaussian testbed.

Every model exposes ``eps(z, t, c=None)``: the predicted noise for a latent
``z`` of shape ``(..., H, W, C)`` at integer step ``t``, conditioned on ``c``
(``None`` selects the unconditional branch). Models are immutable after
construction, so sharing one between threads is safe.

The testbed uses isotropic Gaussian data per condition. For
``x0 ~ N(mu, s2 I)`` and ``z_t = sqrt(ab) x0 + sqrt(1 - ab) eps`` the
posterior-mean noise prediction is affine in ``z``::

    eps*(z, t, c) = sqrt(1 - ab) (z - sqrt(ab) mu) / (ab s2 + 1 - ab)

and the unconditional branch is the responsibility-weighted mixture of
those terms.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Hashable, Mapping, Protocol, Sequence

import numpy as np
from scipy.special import logsumexp

from .errors import InvalidRange, ShapeMismatch, UnknownCondition
from .tensor_core import as_latent, batched_cosine

ConditionId = Hashable


@dataclass(frozen=True)
class NoiseSchedule:
    """Cumulative signal retention ``alpha_bar[0..T]`` with ``alpha_bar[0] == 1``."""

    alpha_bar: np.ndarray

    def __post_init__(self):
        ab = np.asarray(self.alpha_bar, dtype=np.float64)
        if ab.ndim != 1 or ab.size < 2:
            raise InvalidRange("alpha_bar needs at least two entries")
        if ab[0] != 1.0:
            raise InvalidRange("alpha_bar[0] must equal 1")
        if np.any(ab <= 0.0) or np.any(ab > 1.0):
            raise InvalidRange("alpha_bar entries must lie in (0, 1]")
        if np.any(np.diff(ab) >= 0.0):
            raise InvalidRange("alpha_bar must be strictly decreasing")
        ab.setflags(write=False)
        object.__setattr__(self, "alpha_bar", ab)

    @property
    def total_steps(self) -> int:
        return self.alpha_bar.size - 1

    def __getitem__(self, t: int) -> float:
        t = int(t)
        if not 0 <= t <= self.total_steps:
            raise InvalidRange(f"step {t} outside [0, {self.total_steps}]")
        return float(self.alpha_bar[t])


def build_vp_schedule(T: int, beta_start: float = 1e-4, beta_end: float = 0.02) -> NoiseSchedule:
    """Linear-beta variance-preserving schedule with ``T`` steps."""
    if T < 1:
        raise InvalidRange(f"T must be >= 1, got {T}")
    if not 0.0 < beta_start <= beta_end < 1.0:
        raise InvalidRange(
            f"need 0 < beta_start <= beta_end < 1, got {beta_start}, {beta_end}"
        )
    if T == 1:
        betas = np.array([beta_start])
    else:
        betas = np.linspace(beta_start, beta_end, T)
    alpha_bar = np.concatenate([[1.0], np.cumprod(1.0 - betas)])
    return NoiseSchedule(alpha_bar)


class ScoreModel(Protocol):
    """Anything that predicts noise. Must be safe for concurrent reads."""

    schedule: NoiseSchedule
    shape: tuple[int, int, int]

    def eps(self, z: np.ndarray, t: int, c: ConditionId | None = None) -> np.ndarray: ...


def score_eval(model: ScoreModel, z, t: int, c: ConditionId | None = None) -> np.ndarray:
    z = as_latent(z)
    if z.shape[-3:] != tuple(model.shape):
        raise ShapeMismatch(f"latent {z.shape[-3:]} vs model shape {tuple(model.shape)}")
    return model.eps(z, t, c)


@dataclass(frozen=True)
class GaussianComponent:
    mean: np.ndarray
    variance: float
    weight: float = 1.0
    embedding: np.ndarray | None = None


class GaussianScoreModel:
    """Exact noise predictor for a mixture of isotropic Gaussians.

    Each condition owns one component. The unconditional branch is the
    mixture over all components with their (normalised) weights.
    Condition embeddings default to one-hot vectors in declaration order;
    they are the input that mean-site adapters project.
    """

    def __init__(self, components: Mapping[ConditionId, GaussianComponent], schedule: NoiseSchedule):
        if not components:
            raise InvalidRange("at least one condition is required")
        self.schedule = schedule
        self.conditions = tuple(components)
        means = [np.asarray(comp.mean, dtype=np.float64) for comp in components.values()]
        shape = means[0].shape
        if len(shape) != 3 or any(m.shape != shape for m in means):
            raise ShapeMismatch("all component means must share one (H, W, C) shape")
        self.shape = tuple(int(s) for s in shape)
        self._means = np.stack(means)
        self._means.setflags(write=False)
        self._var = np.array([float(comp.variance) for comp in components.values()])
        if np.any(self._var <= 0):
            raise InvalidRange("component variances must be positive")
        w = np.array([float(comp.weight) for comp in components.values()])
        if np.any(w < 0) or w.sum() <= 0:
            raise InvalidRange("mixture weights must be non-negative with positive sum")
        self._logw = np.log(w / w.sum())
        n = len(self.conditions)
        emb = []
        for k, comp in enumerate(components.values()):
            emb.append(np.eye(n)[k] if comp.embedding is None else np.asarray(comp.embedding, float))
        if any(e.shape != emb[0].shape for e in emb):
            raise ShapeMismatch("condition embeddings must share one length")
        self._emb = np.stack(emb)
        self._index = {c: k for k, c in enumerate(self.conditions)}

    @property
    def dim(self) -> int:
        return int(np.prod(self.shape))

    @property
    def embedding_dim(self) -> int:
        return self._emb.shape[1]

    def index(self, c: ConditionId) -> int:
        try:
            return self._index[c]
        except (KeyError, TypeError):
            raise UnknownCondition(f"unknown condition {c!r}") from None

    def mean(self, c: ConditionId) -> np.ndarray:
        return self._means[self.index(c)]

    def variance(self, c: ConditionId) -> float:
        return float(self._var[self.index(c)])

    def embedding(self, c: ConditionId) -> np.ndarray:
        return self._emb[self.index(c)]

    def components(self) -> dict:
        return {
            c: GaussianComponent(self._means[k], float(self._var[k]),
                                 float(np.exp(self._logw[k])), self._emb[k])
            for c, k in self._index.items()
        }

    def with_means(self, means: Mapping[ConditionId, np.ndarray]) -> "GaussianScoreModel":
        comps = self.components()
        for c, m in means.items():
            comps[c] = GaussianComponent(np.asarray(m, float), comps[c].variance,
                                         comps[c].weight, comps[c].embedding)
        return GaussianScoreModel(comps, self.schedule)

    def eps(self, z, t, c=None):
        ab = self.schedule[t]
        sa, s1 = np.sqrt(ab), np.sqrt(1.0 - ab)
        if c is not None:
            k = self.index(c)
            v = ab * self._var[k] + (1.0 - ab)
            return s1 * (z - sa * self._means[k]) / v
        # unconditional: responsibilities over components
        v = ab * self._var + (1.0 - ab)  # (K,)
        resid = z[..., None, :, :, :] - sa * self._means  # (..., K, H, W, C)
        sq = np.sum(resid * resid, axis=(-3, -2, -1))  # (..., K)
        logp = self._logw - 0.5 * sq / v - 0.5 * self.dim * np.log(v)
        resp = np.exp(logp - logsumexp(logp, axis=-1, keepdims=True))
        coef = (resp / v)[..., None, None, None]
        return s1 * np.sum(coef * resid, axis=-4)

    def log_density(self, z, t, c=None) -> np.ndarray:
        """Log density of the diffused marginal at step ``t``."""
        ab = self.schedule[t]
        sa = np.sqrt(ab)
        v = ab * self._var + (1.0 - ab)
        resid = np.asarray(z, float)[..., None, :, :, :] - sa * self._means
        sq = np.sum(resid * resid, axis=(-3, -2, -1))
        logn = -0.5 * sq / v - 0.5 * self.dim * np.log(2 * np.pi * v)
        if c is not None:
            return logn[..., self.index(c)]
        return logsumexp(self._logw + logn, axis=-1)


class LowRankAdapter:
    """A rank-``r`` additive update ``strength * up @ down.T`` on top of a base model.

    ``site`` picks where the update acts:

    ``"latent"``
        on the flattened latent. The noise prediction becomes
        ``base + strength * gate(c) * U (V^T vec(z))``; inputs orthogonal to
        ``span(V)`` leave the output untouched.
    ``"mean"``
        on the condition-to-mean map of a :class:`GaussianScoreModel`:
        ``mu_c <- mu_c + strength * gate(c) * U (V^T e_c)`` with ``e_c`` the
        condition embedding. The result is again an exact Gaussian
        predictor, so samples from the adapted model have known moments.

    ``gate(c)`` is 1 for trained conditions and ``ood_decay`` otherwise.
    For the latent site the unconditional branch is scaled by
    ``uncond_gate``; for the mean site every mixture component shifts by
    its own gated delta.
    """

    def __init__(self, base, up, down, *, strength: float = 0.8,
                 trained_conditions: Sequence[ConditionId] = (), site: str = "latent",
                 ood_decay: float = 0.0, uncond_gate: float = 1.0, name: str | None = None):
        self.base = base
        self.schedule = base.schedule
        self.shape = tuple(base.shape)
        self.up = np.array(up, dtype=np.float64, ndmin=2)
        self.down = np.array(down, dtype=np.float64, ndmin=2)
        if self.up.shape[1] != self.down.shape[1]:
            raise ShapeMismatch(f"up {self.up.shape} and down {self.down.shape} ranks differ")
        self.rank = self.up.shape[1]
        dim = int(np.prod(self.shape))
        if self.up.shape[0] != dim:
            raise ShapeMismatch(f"up map needs {dim} rows, got {self.up.shape[0]}")
        if site not in ("latent", "mean"):
            raise InvalidRange(f"unknown adapter site {site!r}")
        self.site = site
        if site == "latent":
            if self.down.shape[0] != dim:
                raise ShapeMismatch(f"down map needs {dim} rows, got {self.down.shape[0]}")
        else:
            if not isinstance(base, GaussianScoreModel):
                raise InvalidRange("mean-site adapters need a GaussianScoreModel base")
            if self.down.shape[0] != base.embedding_dim:
                raise ShapeMismatch(
                    f"down map needs {base.embedding_dim} rows, got {self.down.shape[0]}"
                )
        if self.rank > dim:
            raise InvalidRange(f"rank {self.rank} exceeds dimension {dim}")
        self.up.setflags(write=False)
        self.down.setflags(write=False)
        self.strength = float(strength)
        self.trained_conditions = frozenset(trained_conditions)
        self.ood_decay = float(ood_decay)
        self.uncond_gate = float(uncond_gate)
        self.name = name
        known = getattr(base, "conditions", None)
        if known is not None:
            for c in self.trained_conditions:
                if c not in known:
                    raise UnknownCondition(f"adapter trained on unknown condition {c!r}")
        if site == "mean":
            self._adapted = base.with_means(
                {c: base.mean(c) + self.mean_delta(c) for c in base.conditions}
            )

    def gate(self, c: ConditionId | None) -> float:
        if c is None:
            return self.uncond_gate
        return 1.0 if c in self.trained_conditions else self.ood_decay

    def mean_delta(self, c: ConditionId) -> np.ndarray:
        """Shift of the condition mean (mean site only)."""
        e = self.base.embedding(c)
        return (self.strength * self.gate(c)) * (self.up @ (self.down.T @ e)).reshape(self.shape)

    def latent_delta(self, z, c: ConditionId | None) -> np.ndarray:
        """``strength * gate(c) * U V^T vec(z)`` (latent site only)."""
        z = np.asarray(z, dtype=np.float64)
        lead = z.shape[:-3]
        flat = z.reshape(*lead, -1)
        proj = flat @ self.down  # (..., r)
        delta = proj @ self.up.T
        return (self.strength * self.gate(c)) * delta.reshape(z.shape)

    def eps(self, z, t, c=None):
        if self.site == "mean":
            return self._adapted.eps(z, t, c)
        base = self.base.eps(z, t, c)
        scale = self.strength * self.gate(c)
        if scale == 0.0:
            return base
        return base + self.latent_delta(z, c)

    def adapted_gaussian(self) -> GaussianScoreModel:
        if self.site != "mean":
            raise InvalidRange("only mean-site adapters have a Gaussian form")
        return self._adapted


def adapter_eval(adapter: LowRankAdapter, z, t, c=None) -> np.ndarray:
    return score_eval(adapter, z, t, c)


class DeltaSumModel:
    """Base prediction plus the summed deltas of several models."""

    def __init__(self, base, members):
        self.base = base
        self.members = tuple(members)
        self.schedule = base.schedule
        self.shape = tuple(base.shape)

    def eps(self, z, t, c=None):
        base = self.base.eps(z, t, c)
        out = base.copy()
        for m in self.members:
            out += m.eps(z, t, c) - base
        return out


def merge_adapters(base, adapters: Sequence[LowRankAdapter]):
    """Linear analogue of weight merging: every delta summed at its own strength.

    Mean-site adapters on a Gaussian base merge exactly into another
    Gaussian (the deltas add in the mean map); otherwise the noise
    predictions' deltas are summed.
    """
    if adapters and all(a.site == "mean" and a.base is base for a in adapters):
        return base.with_means({
            c: base.mean(c) + sum(a.mean_delta(c) for a in adapters) for c in base.conditions
        })
    return DeltaSumModel(base, adapters)


def composed_target(base: GaussianScoreModel, adapters: Sequence[LowRankAdapter], c) -> GaussianScoreModel:
    """The ideal composition for condition ``c``.

    Only adapters trained on ``c`` contribute; their mean shifts add on top of
    the base component. Returned as a single-condition Gaussian model.
    """
    relevant = [a for a in adapters if c in a.trained_conditions]
    for a in relevant:
        if a.site != "mean":
            raise InvalidRange("composed targets need mean-site adapters")
    mean = base.mean(c) + sum((a.mean_delta(c) for a in relevant), np.zeros(base.shape))
    comp = GaussianComponent(mean, base.variance(c), 1.0)
    return GaussianScoreModel({c: comp}, base.schedule)


@dataclass
class ProbeResult:
    """Mean whole-grid cosine similarity of each adapter to the base."""

    conditions: tuple
    cond_similarity: np.ndarray  # (n_adapters, n_conditions)
    uncond_similarity: np.ndarray  # (n_adapters,)
    in_distribution: np.ndarray = field(default=None)  # bool, same shape as cond_similarity


def similarity_probe(base, adapters, conditions, z_samples, t: int) -> ProbeResult:
    """Probe statistics: how close each adapter stays to the base.

    For every (adapter, condition) pair the cosine similarity between the
    adapter's and the base's conditional noise predictions, taken over the
    whole flattened grid, is averaged over ``z_samples``. The unconditional
    analogue is reported per adapter.
    """
    z = as_latent(z_samples)
    if z.ndim == 3:
        z = z[None]
    if z.shape[0] < 1:
        raise InvalidRange("similarity_probe needs at least one sample")
    flat = lambda a: a.reshape(a.shape[0], -1)  # noqa: E731
    conditions = tuple(conditions)
    cond = np.zeros((len(adapters), len(conditions)))
    inside = np.zeros_like(cond, dtype=bool)
    for j, c in enumerate(conditions):
        ref = flat(base.eps(z, t, c))
        for i, a in enumerate(adapters):
            cond[i, j] = batched_cosine(flat(a.eps(z, t, c)), ref).mean()
            inside[i, j] = c in getattr(a, "trained_conditions", ())
    ref_u = flat(base.eps(z, t, None))
    uncond = np.array([batched_cosine(flat(a.eps(z, t, None)), ref_u).mean() for a in adapters])
    return ProbeResult(conditions, cond, uncond, inside)
