"""Segmentation metrics in physical units: Dice, ASSD, Hausdorff."""

import dataclasses

import numpy as np
from scipy.spatial import cKDTree

from .errors import MetricError
from .geometry import Spacing

__all__ = [
    "BinaryMask",
    "dice",
    "surface_voxels",
    "boundary",
    "assd",
    "hausdorff",
    "evaluate",
]


@dataclasses.dataclass(frozen=True)
class BinaryMask:
    """Boolean occupancy over a D x H x W grid with per-axis mm spacing."""

    data: np.ndarray
    spacing: Spacing

    def __post_init__(self):
        data = np.asarray(self.data)
        if data.ndim != 3:
            raise MetricError(f"mask must be D x H x W, got shape {data.shape}")
        if data.dtype != np.bool_:
            data = data.astype(bool)
        object.__setattr__(self, "data", data)
        if not isinstance(self.spacing, Spacing):
            raise MetricError("spacing must be a Spacing")
        if self.spacing.is_2d:
            # distance terms need a finite depth step; single-slice masks
            # should carry an explicit thickness, not the 2d sentinel
            raise MetricError("2d sentinel spacing has no depth distance")

    @property
    def count(self) -> int:
        return int(self.data.sum())


def _check_extents(pred: BinaryMask, ref: BinaryMask) -> None:
    if pred.data.shape != ref.data.shape:
        raise MetricError(
            f"extent mismatch: {pred.data.shape} vs {ref.data.shape}"
        )


def _check_pair(pred: BinaryMask, ref: BinaryMask) -> None:
    _check_extents(pred, ref)
    if pred.spacing != ref.spacing:
        raise MetricError(
            f"spacing mismatch: {pred.spacing.as_tuple()} vs {ref.spacing.as_tuple()}"
        )


def dice(pred: BinaryMask, ref: BinaryMask) -> float:
    """2|A n B| / (|A| + |B|); both masks empty scores 1.0."""
    _check_extents(pred, ref)
    total = pred.count + ref.count
    if total == 0:
        return 1.0
    inter = int(np.logical_and(pred.data, ref.data).sum())
    return 2.0 * inter / total


def surface_voxels(data: np.ndarray) -> np.ndarray:
    """Set voxels with at least one 6-connected neighbor unset or out of bounds."""
    padded = np.pad(np.asarray(data, dtype=bool), 1)
    interior = (
        padded[1:-1, 1:-1, 1:-1]
        & padded[:-2, 1:-1, 1:-1]
        & padded[2:, 1:-1, 1:-1]
        & padded[1:-1, :-2, 1:-1]
        & padded[1:-1, 2:, 1:-1]
        & padded[1:-1, 1:-1, :-2]
        & padded[1:-1, 1:-1, 2:]
    )
    return np.asarray(data, dtype=bool) & ~interior


def boundary(mask: BinaryMask, *, index_space: bool = False) -> np.ndarray:
    """Boundary voxel centers as an (n, 3) float array.

    Coordinates are voxel indices scaled by spacing (mm); ``index_space``
    skips the scaling.
    """
    idx = np.argwhere(surface_voxels(mask.data)).astype(np.float64)
    if index_space:
        return idx
    return idx * np.asarray(mask.spacing.as_tuple(), dtype=np.float64)


def _boundary_pair(pred, ref, index_space):
    _check_pair(pred, ref)
    if pred.count == 0 or ref.count == 0:
        raise MetricError("surface distance undefined for an empty mask")
    return boundary(pred, index_space=index_space), boundary(ref, index_space=index_space)


def _directed(points: np.ndarray, target: np.ndarray) -> np.ndarray:
    dist, _ = cKDTree(target).query(points)
    return dist


def assd(pred: BinaryMask, ref: BinaryMask, *, index_space: bool = False) -> float:
    """Average symmetric surface distance in mm.

    (sum_{s in dP} d(s, dR) + sum_{s in dR} d(s, dP)) / (|dP| + |dR|)
    with Euclidean d over boundary voxel centers.
    """
    bp, br = _boundary_pair(pred, ref, index_space)
    dp = _directed(bp, br)
    dr = _directed(br, bp)
    return float((dp.sum() + dr.sum()) / (len(bp) + len(br)))


def hausdorff(pred: BinaryMask, ref: BinaryMask, *, index_space: bool = False) -> float:
    """Max of the two directed maximin boundary distances, in mm."""
    bp, br = _boundary_pair(pred, ref, index_space)
    dp = _directed(bp, br)
    dr = _directed(br, bp)
    return float(max(dp.max(), dr.max()))


def evaluate(pred: BinaryMask, ref: BinaryMask) -> dict:
    """All three metrics as a JSON-ready dict."""
    return {
        "dice": dice(pred, ref),
        "assd_mm": assd(pred, ref),
        "hd_mm": hausdorff(pred, ref),
    }
