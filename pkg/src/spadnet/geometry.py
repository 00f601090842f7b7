"""Voxel-spacing model and degree-of-anisotropy arithmetic.

Spacing is physical voxel size in millimeters, depth axis first. 2D images
carry a sentinel slice spacing (infinity) so that every depth resampling is
disabled; their anisotropy degree is capped at a configurable stage count.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

from .errors import GeometryError

# Slice spacing marking a 2D image ("sufficiently large": no finite stand-in).
TWO_D_SENTINEL = math.inf

# Anisotropy degree assigned to 2D images; large enough to disable depth
# resampling in any network this package builds (deepest builtin has 4 stages).
DA_2D_CAP = 6

# Ratios this close (relative) to an exact power of two snap to it before
# flooring, so decimal spacing metadata like 1.9999999990 does not flap DA.
_POW2_SNAP_RTOL = 1e-9


@dataclass(frozen=True)
class Spacing:
    """Voxel spacing (s_slice, s_h, s_w) in mm; in-plane must be isotropic."""

    s_slice: float
    s_h: float
    s_w: float

    def __post_init__(self) -> None:
        for name in ("s_h", "s_w"):
            v = getattr(self, name)
            if not (isinstance(v, (int, float)) and math.isfinite(v) and v > 0):
                raise GeometryError(f"{name} must be positive and finite, got {v!r}")
        s = self.s_slice
        if s != TWO_D_SENTINEL and not (isinstance(s, (int, float)) and math.isfinite(s) and s > 0):
            raise GeometryError(f"s_slice must be positive (or the 2D sentinel), got {s!r}")
        if abs(self.s_h - self.s_w) > _POW2_SNAP_RTOL * max(self.s_h, self.s_w):
            raise GeometryError(
                f"in-plane spacing must be isotropic, got s_h={self.s_h} s_w={self.s_w}"
            )

    @property
    def s_plane(self) -> float:
        return self.s_h

    @property
    def is_2d(self) -> bool:
        return self.s_slice == TWO_D_SENTINEL

    def as_tuple(self) -> tuple[float, float, float]:
        return (self.s_slice, self.s_h, self.s_w)

    @classmethod
    def two_d(cls, s_h: float = 1.0, s_w: float | None = None) -> "Spacing":
        return cls(TWO_D_SENTINEL, s_h, s_h if s_w is None else s_w)


def degree_of_anisotropy(spacing: Spacing, *, cap_2d: int = DA_2D_CAP) -> int:
    """max{0, floor(log2(s_slice / s_plane))}; 2D sentinel maps to cap_2d."""
    if spacing.is_2d:
        return cap_2d
    ratio = spacing.s_slice / spacing.s_plane
    log = math.log2(ratio)
    nearest = round(log)
    if abs(ratio - 2.0 ** nearest) <= _POW2_SNAP_RTOL * 2.0 ** nearest:
        log = float(nearest)
    return max(0, math.floor(log))


@dataclass
class VolumeGrid:
    """A dense voxel array (C,D,H,W) with physical spacing.

    After preprocessing the depth axis is the first spatial dimension and
    spacing is a Spacing. A freshly loaded volume whose depth axis has not
    been identified yet carries depth_axis_moved=False and a raw per-axis
    (s0, s1, s2) tuple in data order instead of a Spacing.
    """

    data: object  # numpy array or tensor.Tensor, shape (C, D, H, W)
    spacing: object  # Spacing, or raw tuple when depth_axis_moved is False
    modality: str = ""
    depth_axis_moved: bool = True

    @property
    def shape(self):
        return self.data.shape


def spacing_to_json(spacing: Spacing):
    """Sidecar form: [s_slice, s_h, s_w]; 2D is "2d" (or ["2d", s_h, s_w])."""
    if spacing.is_2d:
        if spacing.s_h == 1.0 and spacing.s_w == 1.0:
            return "2d"
        return ["2d", spacing.s_h, spacing.s_w]
    return [spacing.s_slice, spacing.s_h, spacing.s_w]


def spacing_from_json(value) -> Spacing:
    if value == "2d":
        return Spacing.two_d()
    if isinstance(value, (list, tuple)) and len(value) == 3:
        if value[0] == "2d":
            return Spacing.two_d(float(value[1]), float(value[2]))
        return Spacing(float(value[0]), float(value[1]), float(value[2]))
    raise GeometryError(f"unrecognized spacing value {value!r}")


def propagate_spacing(
    spacing: Spacing,
    effective_stride: tuple[int, int, int],
    direction: str,
) -> Spacing:
    """Spacing after a strided resampling: downsample multiplies, upsample divides."""
    if direction not in ("downsample", "upsample"):
        raise GeometryError(f"direction must be downsample or upsample, got {direction!r}")
    kd, kh, kw = effective_stride
    if min(kd, kh, kw) < 1:
        raise GeometryError(f"strides must be >= 1, got {effective_stride}")
    if direction == "downsample":
        fd, fh, fw = float(kd), float(kh), float(kw)
    else:
        fd, fh, fw = 1.0 / kd, 1.0 / kh, 1.0 / kw
    s_slice = spacing.s_slice if spacing.is_2d else spacing.s_slice * fd
    return Spacing(s_slice, spacing.s_h * fh, spacing.s_w * fw)
