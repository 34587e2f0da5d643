"""Geometric de-noising baselines: DROR, ROR and SOR on the 3-D returns of a range image."""

from __future__ import annotations

import math
from dataclasses import dataclass
from enum import IntEnum

import numpy as np
from scipy.spatial import cKDTree

from .core import Label, RangeImage, SensorModel, image_to_xyz
from .neighbors import VoxelGrid


class Flag(IntEnum):
    KEEP = 0
    CLUTTER = 1
    NO_RETURN = 255


@dataclass(frozen=True)
class DrorParams:
    alpha: float = math.radians(0.2)
    radius_multiplier: float = 3.0
    min_neighbors: int = 3
    min_search_radius: float = 0.04

    def __post_init__(self):
        for name in ("alpha", "radius_multiplier", "min_neighbors", "min_search_radius"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be > 0")


def dror_search_radius(planar_distance, params: DrorParams = DrorParams()):
    return np.maximum(params.min_search_radius,
                      params.radius_multiplier * np.asarray(planar_distance) * params.alpha)


def _mask(image, rows, cols, clutter):
    flags = np.full(image.shape, Flag.NO_RETURN, dtype=np.uint8)
    flags[rows, cols] = np.where(clutter, Flag.CLUTTER, Flag.KEEP)
    return flags


def radius_counts(xyz, radii):
    """Neighbours (excluding self) within a per-point radius, via a voxel grid sized to the largest radius."""
    radii = np.broadcast_to(np.asarray(radii, dtype=np.float64), (len(xyz),))
    if len(xyz) == 0:
        return np.zeros(0, dtype=np.int64)
    # slack keeps float rounding of cell coordinates from hiding a neighbour two cells away
    grid = VoxelGrid(xyz, float(radii.max()) * (1 + 1e-9))
    return grid.count_within(radii)


def dror_filter(image: RangeImage, sensor: SensorModel, params: DrorParams = DrorParams()) -> np.ndarray:
    """Dynamic radius outlier removal.

    The search radius grows with planar range, ``max(min_r, mult * rho * alpha)``;
    a return is kept when at least ``min_neighbors`` others fall inside it.
    """
    xyz, rows, cols = image_to_xyz(image, sensor)
    planar = np.hypot(xyz[:, 0], xyz[:, 1])
    counts = radius_counts(xyz, dror_search_radius(planar, params))
    return _mask(image, rows, cols, counts < params.min_neighbors)


def ror_filter(image: RangeImage, sensor: SensorModel, radius: float, k_min: int) -> np.ndarray:
    """Radius outlier removal with a fixed radius."""
    if not radius > 0:
        raise ValueError("radius must be > 0")
    xyz, rows, cols = image_to_xyz(image, sensor)
    counts = radius_counts(xyz, radius)
    return _mask(image, rows, cols, counts < k_min)


def sor_filter(image: RangeImage, sensor: SensorModel, k: int = 8, std_multiplier: float = 1.0) -> np.ndarray:
    """Statistical outlier removal: drop returns whose mean k-NN distance exceeds mean + m * std."""
    xyz, rows, cols = image_to_xyz(image, sensor)
    if len(xyz) < k + 1:
        raise ValueError(f"SOR with k={k} needs at least {k + 1} returns, got {len(xyz)}")
    dist, _ = cKDTree(xyz).query(xyz, k=k + 1)
    mean_d = dist[:, 1:].mean(axis=1)
    threshold = mean_d.mean() + std_multiplier * mean_d.std()
    # relative slack so identical neighbourhoods are not split by rounding in the mean and std
    return _mask(image, rows, cols, mean_d > threshold * (1 + 1e-9))


def mask_to_labels(mask: np.ndarray, clutter_class=Label.FOG) -> np.ndarray:
    """Map a filter mask onto the label alphabet, CLUTTER becoming ``clutter_class``."""
    labels = np.full(mask.shape, Label.VALID, dtype=np.uint8)
    labels[mask == Flag.CLUTTER] = clutter_class
    labels[mask == Flag.NO_RETURN] = Label.NO_RETURN
    return labels


def apply_mask(image: RangeImage, mask: np.ndarray) -> RangeImage:
    """De-noised copy of ``image`` with CLUTTER pixels turned into no-returns."""
    keep = mask == Flag.KEEP
    return image.with_arrays(np.where(keep, image.distance, 0), np.where(keep, image.intensity, 0))


FILTERS = {"dror": dror_filter, "ror": ror_filter, "sor": sor_filter}
