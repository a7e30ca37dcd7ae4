"""Latent grids and the spatial primitives used by the composer.

Grids are plain ``numpy`` arrays. A latent grid has shape ``(..., H, W, C)``,
a planar map ``(..., H, W)`` and a patch set ``(..., P, d*d)``. Leading axes
are batch axes and are carried through untouched, so a whole batch of
trajectories can be pushed through the pipeline at once.

Conventions are row-major everywhere: patches are scanned row-major over
patch coordinates and the pixels inside a patch are flattened row-major.
"""

from __future__ import annotations

import numpy as np

from .errors import InvalidGrid, LengthMismatch, NonDivisiblePatch

NORM_EPS = 1e-12


def as_latent(data, *, check_finite: bool = True) -> np.ndarray:
    """Validate ``data`` as a latent grid ``(..., H, W, C)`` of float64."""
    arr = np.asarray(data, dtype=np.float64)
    if arr.ndim < 3 or min(arr.shape[-3:]) < 1:
        raise InvalidGrid(f"latent grid needs shape (..., H, W, C), got {arr.shape}")
    if check_finite and not np.all(np.isfinite(arr)):
        raise InvalidGrid("latent grid contains non-finite values")
    return arr


def as_planar(data) -> np.ndarray:
    arr = np.asarray(data, dtype=np.float64)
    if arr.ndim < 2 or min(arr.shape[-2:]) < 1:
        raise InvalidGrid(f"planar map needs shape (..., H, W), got {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise InvalidGrid("planar map contains non-finite values")
    return arr


def latent_from_flat(values, height: int, width: int, channels: int) -> np.ndarray:
    """Build a grid from a flat row-major ``(h, w, c)`` sequence."""
    flat = np.asarray(values, dtype=np.float64).ravel()
    if flat.size != height * width * channels:
        raise InvalidGrid(
            f"expected {height * width * channels} values for "
            f"{height}x{width}x{channels}, got {flat.size}"
        )
    return as_latent(flat.reshape(height, width, channels))


def channel_mean(grid) -> np.ndarray:
    """Average over the channel axis: ``(..., H, W, C) -> (..., H, W)``."""
    grid = as_latent(grid)
    return grid.mean(axis=-1)


def _check_divisible(height: int, width: int, d: int) -> None:
    if d < 1 or height % d or width % d:
        raise NonDivisiblePatch(
            f"patch size {d} does not divide map of size {height}x{width}"
        )


def patchify(planar, d: int) -> np.ndarray:
    """Split ``(..., H, W)`` into ``(..., P, d*d)`` non-overlapping patches."""
    planar = np.asarray(planar, dtype=np.float64)
    *lead, h, w = planar.shape
    _check_divisible(h, w, d)
    ph, pw = h // d, w // d
    blocks = planar.reshape(*lead, ph, d, pw, d)
    blocks = np.moveaxis(blocks, -3, -2)  # (..., ph, pw, d, d)
    return blocks.reshape(*lead, ph * pw, d * d)


def unpatchify(patches, height: int, width: int, d: int) -> np.ndarray:
    """Inverse scatter of :func:`patchify`."""
    patches = np.asarray(patches, dtype=np.float64)
    _check_divisible(height, width, d)
    ph, pw = height // d, width // d
    *lead, p, k = patches.shape
    if p != ph * pw or k != d * d:
        raise InvalidGrid(
            f"patch set {patches.shape[-2:]} inconsistent with {height}x{width}, d={d}"
        )
    blocks = patches.reshape(*lead, ph, pw, d, d)
    blocks = np.moveaxis(blocks, -2, -3)  # (..., ph, d, pw, d)
    return blocks.reshape(*lead, height, width)


def patch_reduce(planar, d: int) -> np.ndarray:
    """Mean of every ``d x d`` block: ``(..., H, W) -> (..., H/d, W/d)``."""
    planar = np.asarray(planar, dtype=np.float64)
    *lead, h, w = planar.shape
    _check_divisible(h, w, d)
    return planar.reshape(*lead, h // d, d, w // d, d).mean(axis=(-3, -1))


def cosine_similarity(a, b) -> float:
    """Cosine of the angle between two vectors; 0 if either is (near) zero."""
    a = np.asarray(a, dtype=np.float64).ravel()
    b = np.asarray(b, dtype=np.float64).ravel()
    if a.size != b.size:
        raise LengthMismatch(f"vectors of length {a.size} and {b.size}")
    return float(batched_cosine(a, b))


def batched_cosine(a, b) -> np.ndarray:
    """Cosine similarity along the last axis, broadcasting leading axes.

    Entries whose norm falls below ``NORM_EPS`` yield 0. The result is
    clipped into ``[-1, 1]`` to absorb rounding.
    """
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape[-1] != b.shape[-1]:
        raise LengthMismatch(f"vectors of length {a.shape[-1]} and {b.shape[-1]}")
    sa = np.sum(a * a, axis=-1)
    sb = np.sum(b * b, axis=-1)
    dot = np.sum(a * b, axis=-1)
    degenerate = (np.sqrt(sa) < NORM_EPS) | (np.sqrt(sb) < NORM_EPS)
    with np.errstate(divide="ignore", invalid="ignore", over="ignore"):
        # sqrt(x * x) == x exactly, so identical inputs give exactly 1
        denom = np.sqrt(sa * sb)
        denom = np.where(np.isfinite(denom), denom, np.sqrt(sa) * np.sqrt(sb))
        cos = dot / denom
    cos = np.where(degenerate, 0.0, cos)
    return np.clip(cos, -1.0, 1.0)


def kron_upsample(weights, d: int) -> np.ndarray:
    """Repeat every per-patch value over its ``d x d`` block.

    ``weights`` has shape ``(..., H/d, W/d)``; the result ``(..., H, W)``.
    Equivalent to ``weights ⊗ ones((d, d))`` on the trailing two axes.
    """
    weights = np.asarray(weights, dtype=np.float64)
    if d < 1:
        raise NonDivisiblePatch(f"patch size must be positive, got {d}")
    return np.repeat(np.repeat(weights, d, axis=-2), d, axis=-1)
