"""Depth hole filling and raster normalization."""
from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from .errors import AllHoles, HolePresent, OutOfRange

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class NormalizationSpec:
    max_depth: float

    def __post_init__(self):
        if not self.max_depth > 0:
            raise ValueError(f"max_depth must be positive, got {self.max_depth}")


def _as_array(depth):
    return np.asarray(getattr(depth, "depths", depth), dtype=np.float64)


def fill_holes(depth, tol: float = 1e-6, max_iters: int = 10000) -> np.ndarray:
    """Harmonic inpainting of NaN pixels by Jacobi iteration.

    Holes start at the mean of the valid pixels, then each hole pixel is
    repeatedly replaced by the average of its in-bounds 4-neighbours while
    valid pixels stay fixed. Stops when the largest update drops below
    ``tol`` or after ``max_iters`` sweeps.
    """
    d = _as_array(depth)
    holes = np.isnan(d)
    if not holes.any():
        return d.copy()
    if holes.all():
        raise AllHoles("depth map has no valid pixels")

    out = d.copy()
    out[holes] = d[~holes].mean()

    h, w = out.shape
    counts = np.zeros_like(out)
    counts[1:, :] += 1
    counts[:-1, :] += 1
    counts[:, 1:] += 1
    counts[:, :-1] += 1

    for it in range(max_iters):
        acc = np.zeros_like(out)
        acc[1:, :] += out[:-1, :]
        acc[:-1, :] += out[1:, :]
        acc[:, 1:] += out[:, :-1]
        acc[:, :-1] += out[:, 1:]
        new = acc[holes] / counts[holes]
        change = np.max(np.abs(new - out[holes]))
        out[holes] = new
        if change < tol:
            break
    else:
        log.info("fill_holes hit max_iters=%d (last change %.3g)", max_iters, change)
    # averaging can overshoot the valid range by an ulp; the exact solution never does
    valid = d[~holes]
    out[holes] = np.clip(out[holes], valid.min(), valid.max())
    return out


def normalize_depth(depth, spec: NormalizationSpec) -> tuple[np.ndarray, int]:
    """Scale meters to [0, 1]. Returns the raster and how many pixels were clamped."""
    d = _as_array(depth)
    if np.isnan(d).any():
        raise HolePresent("fill holes before normalizing")
    over = d > spec.max_depth
    clamped = int(over.sum())
    if clamped:
        log.info("clamped %d depth pixels above max_depth=%g", clamped, spec.max_depth)
    return np.minimum(d, spec.max_depth) / spec.max_depth, clamped


def denormalize_depth(raster, spec: NormalizationSpec) -> np.ndarray:
    r = np.asarray(raster, dtype=np.float64)
    if np.any(r < 0) or np.any(r > 1):
        raise OutOfRange("normalized depth must lie in [0, 1]")
    return r * spec.max_depth
