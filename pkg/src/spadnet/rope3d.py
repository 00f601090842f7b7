"""Additive 3D rotary position embedding and its min-gap analysis.

A head vector of dimension d is split in halves; each half holds d/4
interleaved rotation pairs. First-half pair i rotates by
omega_x[i]*t_x + omega_z[i]*t_z, second-half pair i by
omega_y[i]*t_y + omega_z[i]*t_z: the depth frequency is added into every
in-plane rotation angle rather than taking dimensions away from x and y.

The analysis experiment collects first-half angles over a (z, x, 1) grid,
sorts them mod 2pi, and reports adjacent gaps (wraparound included), chord
distances, and per-frequency minima; comparing a flat grid against a deep
one quantifies how much the depth term disperses previously-identical
angles.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, DimensionError

# Reference sweep value for the average 2D/3D min-gap ratio; reports flag the
# head dimension whose average lands nearest this.
REFERENCE_AVERAGE_RATIO = 26.30

# A flat-vs-deep grid pair with z = 16 would make angle collisions exactly
# 16x rarer under a uniform model; the analysis reports how far beyond that
# ideal the measured ratios go.
IDEAL_RATIO = 16.00


@dataclass(frozen=True)
class RopeParams:
    """Frequencies for additive 3D rotary embeddings on a d-dim head."""

    d: int = 64
    b_x: float = 10000.0
    b_y: float = 10000.0
    b_z: float = 2333.0

    def __post_init__(self) -> None:
        if self.d < 4 or self.d % 4 != 0:
            raise ConfigError(f"head dimension must be a positive multiple of 4, got {self.d}")
        if min(self.b_x, self.b_y, self.b_z) <= 0:
            raise ConfigError("frequency bases must be positive")

    @property
    def pairs_per_half(self) -> int:
        return self.d // 4

    @property
    def omega_x(self) -> np.ndarray:
        i = np.arange(self.pairs_per_half, dtype=np.float64)
        return self.b_x ** (-2.0 * i / self.d)

    @property
    def omega_y(self) -> np.ndarray:
        i = np.arange(self.pairs_per_half, dtype=np.float64)
        return self.b_y ** (-2.0 * i / self.d)

    @property
    def omega_z(self) -> np.ndarray:
        i = np.arange(self.pairs_per_half, dtype=np.float64)
        return self.b_z ** (-(2.0 * i + 1.0) / self.d)


def rope_angles(params: RopeParams, positions: np.ndarray) -> np.ndarray:
    """Rotation angles (n, d/2) for integer positions (n, 3) = (t_x, t_y, t_z).

    Columns 0..d/4-1 are the first-half (x, z) angles, the rest the
    second-half (y, z) angles; pair i of each half uses components
    (2i, 2i+1) of that half.
    """
    pos = np.asarray(positions, dtype=np.float64)
    if pos.ndim == 1:
        pos = pos[None, :]
    if pos.shape[-1] != 3:
        raise DimensionError(f"positions must have 3 components, got shape {pos.shape}")
    tx, ty, tz = pos[..., 0:1], pos[..., 1:2], pos[..., 2:3]
    zterm = tz * params.omega_z
    return np.concatenate([tx * params.omega_x + zterm, ty * params.omega_y + zterm], axis=-1)


def _rotate_pairs(vec: np.ndarray, angles: np.ndarray) -> np.ndarray:
    cos, sin = np.cos(angles), np.sin(angles)
    ev, od = vec[..., 0::2], vec[..., 1::2]
    out = np.empty_like(vec)
    out[..., 0::2] = ev * cos - od * sin
    out[..., 1::2] = ev * sin + od * cos
    return out


def rope_rotate(vec: np.ndarray, position, params: RopeParams) -> np.ndarray:
    """Rotate one length-d vector to its (t_x, t_y, t_z) position."""
    vec = np.asarray(vec, dtype=np.float64)
    if vec.shape[-1] != params.d:
        raise DimensionError(f"vector length {vec.shape[-1]} != head dimension {params.d}")
    angles = rope_angles(params, np.asarray(position))[0]
    return _rotate_pairs(vec, angles)


def rope_inner(a: np.ndarray, pos_a, b: np.ndarray, pos_b, params: RopeParams) -> float:
    """Inner product of the two position-rotated vectors."""
    return float(np.dot(rope_rotate(a, pos_a, params), rope_rotate(b, pos_b, params)))


@dataclass(frozen=True)
class RopeAnalysis:
    """Per-frequency angle statistics over one (z, x, 1) grid."""

    grid: tuple[int, int, int]
    params: RopeParams
    angles: tuple[np.ndarray, ...]  # sorted, mod 2pi, one array per i
    gaps: tuple[np.ndarray, ...]  # adjacent gaps incl. wraparound
    chords: tuple[np.ndarray, ...]  # unit-circle chord per adjacent pair
    min_gaps: np.ndarray  # (d/4,)

    @property
    def n_positions(self) -> int:
        return self.grid[0] * self.grid[1] * self.grid[2]


def rope_min_gap_analysis(grid: tuple[int, int, int], params: RopeParams) -> RopeAnalysis:
    """Sorted first-half rotation angles and their gap statistics.

    grid is (z, x, y) extents with y == 1; positions are all integer
    (t_x, t_z) pairs on the grid. The wraparound gap (first angle plus 2pi
    minus last) is included in both the gap and chord sets.
    """
    z, x, y = grid
    if y != 1:
        raise ConfigError(f"analysis grid must have y extent 1, got {grid}")
    if z < 1 or x < 1:
        raise ConfigError(f"grid extents must be positive, got {grid}")
    tx = np.arange(x, dtype=np.float64)
    tz = np.arange(z, dtype=np.float64)
    txx, tzz = np.meshgrid(tx, tz, indexing="ij")
    angles_all, gaps_all, chords_all, mins = [], [], [], []
    for wx, wz in zip(params.omega_x, params.omega_z):
        theta = np.sort((wx * txx + wz * tzz).ravel() % (2.0 * np.pi))
        gaps = np.concatenate([np.diff(theta), [theta[0] + 2.0 * np.pi - theta[-1]]])
        chords = 2.0 * np.sin(gaps / 2.0)
        angles_all.append(theta)
        gaps_all.append(gaps)
        chords_all.append(chords)
        mins.append(gaps.min())
    return RopeAnalysis(
        grid=(z, x, y),
        params=params,
        angles=tuple(angles_all),
        gaps=tuple(gaps_all),
        chords=tuple(chords_all),
        min_gaps=np.array(mins),
    )


def rope_ratio_analysis(params: RopeParams, z: int = 8, x: int = 16) -> dict:
    """Flat-vs-deep min-gap comparison: per-i ratios and their average."""
    deep = rope_min_gap_analysis((z, x, 1), params)
    flat = rope_min_gap_analysis((1, x, 1), params)
    ratios = flat.min_gaps / deep.min_gaps
    return {
        "d": params.d,
        "min_gap_3d": deep.min_gaps.tolist(),
        "min_gap_2d": flat.min_gaps.tolist(),
        "min_chord_3d": [float(c.min()) for c in deep.chords],
        "min_chord_2d": [float(c.min()) for c in flat.chords],
        "ratio": ratios.tolist(),
        "average_ratio": float(ratios.mean()),
    }


def rope_report(
    d_sweep: tuple[int, ...] = (32, 64, 128),
    default_d: int = 64,
    z: int = 8,
    x: int = 16,
    b_x: float = 10000.0,
    b_y: float = 10000.0,
    b_z: float = 2333.0,
) -> dict:
    """Full analysis report: the default-d run plus a d-sweep with the
    sweep entry nearest the reference average ratio flagged."""
    if default_d not in d_sweep:
        d_sweep = tuple(d_sweep) + (default_d,)
    analyses = {}
    for d in d_sweep:
        params = RopeParams(d=d, b_x=b_x, b_y=b_y, b_z=b_z)
        analyses[str(d)] = rope_ratio_analysis(params, z=z, x=x)
    nearest = min(analyses.values(), key=lambda a: abs(a["average_ratio"] - REFERENCE_AVERAGE_RATIO))
    return {
        "grid": [z, x, 1],
        "bases": {"b_x": b_x, "b_y": b_y, "b_z": b_z},
        "default_d": default_d,
        "ideal_ratio": IDEAL_RATIO,
        "reference_average_ratio": REFERENCE_AVERAGE_RATIO,
        "analyses": analyses,
        "nearest_reference": {
            "d": nearest["d"],
            "average_ratio": nearest["average_ratio"],
            "deviation": abs(nearest["average_ratio"] - REFERENCE_AVERAGE_RATIO),
        },
    }
