"""Synthetic circle and flower landmark sets."""

from __future__ import annotations

import numpy as np

from .errors import BadShapeParams
from .landmarks import LandmarkSet

DEFAULT_PETAL_AMPLITUDE = 0.3
DEFAULT_PETAL_COUNT = 5


def shape_points(shape: str, n_points: int, radius: float = 10.0,
                 petal_amplitude: float = DEFAULT_PETAL_AMPLITUDE,
                 petal_count: int = DEFAULT_PETAL_COUNT) -> np.ndarray:
    """Points at angles ``2 pi k / n``; the flower radius is ``R (1 + a cos(p theta))``."""
    if shape not in ("circle", "flower"):
        raise BadShapeParams(f"unknown shape {shape!r}; expected 'circle' or 'flower'")
    if n_points < 3:
        raise BadShapeParams(f"need at least 3 points, got {n_points}")
    if not radius > 0:
        raise BadShapeParams(f"radius must be positive, got {radius}")
    theta = 2.0 * np.pi * np.arange(n_points) / n_points
    r = np.full(n_points, float(radius))
    if shape == "flower":
        if petal_amplitude <= -1.0:
            raise BadShapeParams("petal amplitude must exceed -1")
        r = radius * (1.0 + petal_amplitude * np.cos(petal_count * theta))
    pts = np.column_stack([r * np.cos(theta), r * np.sin(theta)])
    # exact axis points for angles that are multiples of pi/2
    pts[np.abs(pts) < 1e-12 * radius] = 0.0
    return pts


def generate_synthetic(shape: str, n_points: int = 20, radius: float = 10.0,
                       petal_amplitude: float = DEFAULT_PETAL_AMPLITUDE,
                       petal_count: int = DEFAULT_PETAL_COUNT, seed: int | None = None) -> LandmarkSet:
    """Synthetic landmark set labelled ``L000``, ``L001``, ...

    ``seed`` is accepted for manifest symmetry; the shapes are deterministic.
    """
    pts = shape_points(shape, n_points, radius, petal_amplitude, petal_count)
    labels = [f"L{k:03d}" for k in range(n_points)]
    return LandmarkSet(labels, pts)
