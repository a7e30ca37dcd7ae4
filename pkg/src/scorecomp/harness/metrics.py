"""Moment-based fidelity of sampled latents against a Gaussian target."""

from __future__ import annotations

from typing import NamedTuple

import numpy as np

from ..errors import InsufficientSamples


class MomentErrors(NamedTuple):
    mean_error: float
    cov_error: float


def moment_metrics(samples, target, c) -> MomentErrors:
    """Relative errors of the empirical mean and covariance.

    ``mean_error = |m - mu_c| / |mu_c|`` and
    ``cov_error = ||S - s2 I||_F / ||s2 I||_F`` with the unbiased sample
    covariance ``S`` over flattened latents. If ``mu_c`` is zero the mean
    error falls back to the absolute norm.
    """
    x = np.asarray(samples, dtype=np.float64)
    n = x.shape[0]
    if n < 2:
        raise InsufficientSamples(f"need at least 2 samples, got {n}")
    flat = x.reshape(n, -1)
    mu = np.asarray(target.mean(c), dtype=np.float64).ravel()
    s2 = target.variance(c)
    mean = flat.mean(axis=0)
    scale = np.linalg.norm(mu)
    mean_err = np.linalg.norm(mean - mu) / (scale if scale > 0 else 1.0)
    centred = flat - mean
    cov = centred.T @ centred / (n - 1)
    dim = flat.shape[1]
    cov[np.diag_indices(dim)] -= s2
    cov_err = np.linalg.norm(cov) / (s2 * np.sqrt(dim))
    return MomentErrors(float(mean_err), float(cov_err))
