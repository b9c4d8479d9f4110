"""Containers for images, acquisition geometry, and sinograms."""
from __future__ import annotations

import dataclasses
import math

import numpy as np

__all__ = ["ImageGrid", "ProjectionGeometry", "Sinogram", "parallel_geometry"]


def _validated(values: np.ndarray, ndim: int, name: str) -> np.ndarray:
    arr = np.asarray(values, dtype=np.float64)
    if arr.ndim != ndim:
        raise ValueError(f"{name} must be {ndim}-dimensional, got shape {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise ValueError(f"{name} contains non-finite entries")
    return arr


@dataclasses.dataclass
class ImageGrid:
    """A 2-D image on a square-pixel grid.

    ``values`` has shape ``(height, width)``.  Pixel centers sit at
    ``x = (col - (width-1)/2) * pixel_size`` and
    ``y = (row - (height-1)/2) * pixel_size``.
    """

    values: np.ndarray
    pixel_size: float = 1.0

    def __post_init__(self) -> None:
        self.values = _validated(self.values, 2, "image values")
        if not (self.pixel_size > 0 and math.isfinite(self.pixel_size)):
            raise ValueError("pixel_size must be positive and finite")

    @property
    def height(self) -> int:
        return self.values.shape[0]

    @property
    def width(self) -> int:
        return self.values.shape[1]

    @property
    def shape(self) -> tuple[int, int]:
        return self.values.shape

    @classmethod
    def zeros(cls, height: int, width: int, pixel_size: float = 1.0) -> "ImageGrid":
        return cls(np.zeros((height, width)), pixel_size)

    def copy_with(self, values: np.ndarray) -> "ImageGrid":
        return ImageGrid(values, self.pixel_size)


@dataclasses.dataclass
class ProjectionGeometry:
    """Parallel-beam acquisition geometry.

    ``angles`` are in radians, strictly increasing, inside ``[0, 2*pi)``.
    Detector bin ``k`` is centered at
    ``s_k = (k - (detector_count-1)/2) * detector_pitch + detector_offset``.
    """

    angles: np.ndarray
    detector_count: int
    detector_pitch: float = 1.0
    detector_offset: float = 0.0

    def __post_init__(self) -> None:
        self.angles = _validated(self.angles, 1, "angles")
        if self.angles.size == 0:
            raise ValueError("geometry needs at least one angle")
        if np.any(np.diff(self.angles) <= 0):
            raise ValueError("angles must be strictly increasing")
        if self.angles[0] < 0 or self.angles[-1] >= 2 * math.pi:
            raise ValueError("angles must lie in [0, 2*pi)")
        if self.detector_count < 1:
            raise ValueError("detector_count must be >= 1")
        if not (self.detector_pitch > 0 and math.isfinite(self.detector_pitch)):
            raise ValueError("detector_pitch must be positive and finite")
        if not math.isfinite(self.detector_offset):
            raise ValueError("detector_offset must be finite")

    @property
    def n_angles(self) -> int:
        return self.angles.size

    def detector_centers(self) -> np.ndarray:
        k = np.arange(self.detector_count, dtype=np.float64)
        half = (self.detector_count - 1) / 2.0
        return (k - half) * self.detector_pitch + self.detector_offset

    def subset(self, indices: np.ndarray) -> "ProjectionGeometry":
        return ProjectionGeometry(
            self.angles[indices],
            self.detector_count,
            self.detector_pitch,
            self.detector_offset,
        )


@dataclasses.dataclass
class Sinogram:
    """Measured or simulated line integrals, one row per view angle."""

    values: np.ndarray
    geometry: ProjectionGeometry

    def __post_init__(self) -> None:
        self.values = _validated(self.values, 2, "sinogram values")
        expected = (self.geometry.n_angles, self.geometry.detector_count)
        if self.values.shape != expected:
            raise ValueError(
                f"sinogram shape {self.values.shape} does not match geometry {expected}"
            )

    @property
    def shape(self) -> tuple[int, int]:
        return self.values.shape

    def copy_with(self, values: np.ndarray) -> "Sinogram":
        return Sinogram(values, self.geometry)


def parallel_geometry(
    n_angles: int,
    detector_count: int,
    detector_pitch: float = 1.0,
    detector_offset: float = 0.0,
    angular_range: tuple[float, float] = (0.0, math.pi),
) -> ProjectionGeometry:
    """Evenly spaced view angles over ``[start, stop)`` (endpoint excluded)."""
    start, stop = angular_range
    if not stop > start:
        raise ValueError("angular_range must satisfy stop > start")
    angles = start + (stop - start) * np.arange(n_angles) / n_angles
    return ProjectionGeometry(angles, detector_count, detector_pitch, detector_offset)
