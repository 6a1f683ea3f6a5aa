from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import DimensionMismatch


@dataclass
class LandmarkSet:
    """Labelled points in mm with optional per-landmark localization variance (mm^2)."""

    labels: list
    points: np.ndarray
    noise_var: np.ndarray | None = None

    def __post_init__(self):
        self.labels = [str(lab) for lab in self.labels]
        self.points = np.atleast_2d(np.asarray(self.points, dtype=float))
        if len(self.labels) != self.points.shape[0]:
            raise DimensionMismatch(f"{len(self.labels)} labels for {self.points.shape[0]} points")
        if len(set(self.labels)) != len(self.labels):
            raise ValueError("landmark labels must be unique")
        if self.points.shape[0] < 1:
            raise DimensionMismatch("a landmark set needs at least one point")
        if self.points.shape[1] not in (2, 3):
            raise DimensionMismatch(f"landmarks must be 2-D or 3-D, got {self.points.shape[1]}-D")
        if not np.all(np.isfinite(self.points)):
            raise ValueError("landmark coordinates must be finite")
        if self.noise_var is not None:
            self.noise_var = np.asarray(self.noise_var, dtype=float).reshape(-1)
            if self.noise_var.shape[0] != len(self.labels):
                raise DimensionMismatch("noise_var length does not match the landmark count")
            if np.any(self.noise_var < 0):
                raise ValueError("noise_var must be non-negative")

    def __len__(self):
        return len(self.labels)

    @property
    def dim(self) -> int:
        return self.points.shape[1]

    def subset(self, indices) -> "LandmarkSet":
        indices = list(indices)
        nv = None if self.noise_var is None else self.noise_var[indices]
        return LandmarkSet([self.labels[i] for i in indices], self.points[indices], nv)

    def reordered(self, labels) -> "LandmarkSet":
        index = {lab: i for i, lab in enumerate(self.labels)}
        missing = [lab for lab in labels if lab not in index]
        if missing:
            raise DimensionMismatch(f"labels missing from landmark set: {missing[:5]}")
        return self.subset([index[lab] for lab in labels])


def match_landmarks(moving: LandmarkSet, fixed: LandmarkSet):
    """Pair two sets by label (moving order wins)."""
    if set(moving.labels) != set(fixed.labels):
        raise DimensionMismatch("moving and fixed landmark labels differ")
    if moving.dim != fixed.dim:
        raise DimensionMismatch("moving and fixed landmarks have different dimensions")
    return moving, fixed.reordered(moving.labels)
