"""Volume I/O, preprocessing, crop sizing, DA-bucketed batching, synth data.

File format: `<name>.vol` holds raw little-endian voxel values in C order
(C,D,H,W); `<name>.json` is the sidecar {"shape", "dtype", "spacing",
"modality", "depth_axis_moved"}. Spacing serializes as
[s_slice, s_h, s_w], the string "2d", or ["2d", s_h, s_w]; a volume whose
depth axis has not been moved yet stores its raw per-axis spacings in data
order with depth_axis_moved false.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .errors import DataError
from .geometry import (
    Spacing,
    VolumeGrid,
    degree_of_anisotropy,
    spacing_from_json,
    spacing_to_json,
)

_DTYPES = {"f32": np.dtype("<f4"), "u8": np.dtype("u1")}

# Modalities whose foreground is simply "intensity above zero"; anything else
# thresholds at the 0.5 percentile of its own intensities.
_ZERO_THRESHOLD_MODALITIES = frozenset({"rgb", "gray"})

RESIZE_LIMIT = 512


def _sidecar_path(path: Path) -> Path:
    return path.with_suffix(".json")


def save_volume(vol: VolumeGrid, path) -> None:
    path = Path(path)
    if path.suffix != ".vol":
        raise DataError(f"volume files use the .vol suffix, got {path.name}")
    data = np.asarray(vol.data)
    if data.ndim != 4:
        raise DataError(f"volume data must be (C,D,H,W), got shape {data.shape}")
    if data.dtype == np.uint8:
        dtype = "u8"
    else:
        dtype = "f32"
        data = data.astype("<f4")
    if isinstance(vol.spacing, Spacing):
        spacing_json = spacing_to_json(vol.spacing)
    else:
        spacing_json = [float(s) for s in vol.spacing]
    sidecar = {
        "shape": list(data.shape),
        "dtype": dtype,
        "spacing": spacing_json,
        "modality": vol.modality,
        "depth_axis_moved": bool(vol.depth_axis_moved),
    }
    path.write_bytes(np.ascontiguousarray(data.astype(_DTYPES[dtype])).tobytes())
    _sidecar_path(path).write_text(json.dumps(sidecar, indent=2) + "\n")


def load_volume(path) -> VolumeGrid:
    path = Path(path)
    sidecar_file = _sidecar_path(path)
    if not path.exists():
        raise DataError(f"missing volume file {path}")
    if not sidecar_file.exists():
        raise DataError(f"missing sidecar {sidecar_file}")
    try:
        sidecar = json.loads(sidecar_file.read_text())
    except json.JSONDecodeError as e:
        raise DataError(f"malformed sidecar {sidecar_file}: {e}") from e
    for key in ("shape", "dtype", "spacing", "modality", "depth_axis_moved"):
        if key not in sidecar:
            raise DataError(f"sidecar {sidecar_file} missing key {key!r}")
    shape = tuple(sidecar["shape"])
    if len(shape) != 4 or any(not isinstance(n, int) or n < 1 for n in shape):
        raise DataError(f"sidecar shape must be 4 positive ints, got {sidecar['shape']}")
    dtype_name = sidecar["dtype"]
    if dtype_name not in _DTYPES:
        raise DataError(f"unknown dtype {dtype_name!r} (expected f32 or u8)")
    dt = _DTYPES[dtype_name]
    payload = path.read_bytes()
    expected = int(np.prod(shape)) * dt.itemsize
    if len(payload) != expected:
        raise DataError(
            f"{path}: payload is {len(payload)} bytes, sidecar shape needs {expected}"
        )
    data = np.frombuffer(payload, dtype=dt).reshape(shape)
    moved = bool(sidecar["depth_axis_moved"])
    if moved:
        spacing = spacing_from_json(sidecar["spacing"])
    else:
        raw = sidecar["spacing"]
        if not (isinstance(raw, list) and len(raw) == 3):
            raise DataError(f"unmoved volume needs 3 per-axis spacings, got {raw!r}")
        spacing = tuple(float(s) for s in raw)
    return VolumeGrid(data.copy(), spacing, str(sidecar["modality"]), moved)


# -- preprocessing -------------------------------------------------------------


def _most_anisotropic_axis(raw: Sequence[float]) -> int:
    """The axis whose spacing stands out most from the other two (log scale)."""
    scores = []
    for i in range(3):
        others = [raw[j] for j in range(3) if j != i]
        scores.append(abs(math.log(raw[i] / math.sqrt(others[0] * others[1]))))
    return int(np.argmax(scores))


def _area_resize_weights(n_in: int, n_out: int) -> np.ndarray:
    """(n_out, n_in) box-filter averaging matrix for area interpolation."""
    s = n_in / n_out
    w = np.zeros((n_out, n_in))
    for i in range(n_out):
        start, end = i * s, (i + 1) * s
        k0, k1 = int(math.floor(start)), int(math.ceil(end))
        for k in range(k0, min(k1, n_in)):
            overlap = min(end, k + 1) - max(start, k)
            if overlap > 0:
                w[i, k] = overlap / s
    return w


def preprocess(vol: VolumeGrid, depth_axis_hint: Optional[int] = None) -> VolumeGrid:
    """Depth axis first, foreground crop, in-plane 512 area resize.

    Depth-axis priority: explicit hint (spatial axis index in current data
    order), then the volume's own moved flag, then the most anisotropic axis
    of the raw per-axis spacings. Foreground is intensity > 0 for rgb/gray
    modalities and > the 0.5 percentile otherwise; the volume is cropped to
    its bounding box. If the shorter in-plane side exceeds 512 the volume is
    area-resampled in plane (aspect preserved) and the in-plane spacing is
    scaled by the shorter-side ratio.
    """
    data = np.asarray(vol.data)
    if data.ndim != 4:
        raise DataError(f"preprocess expects (C,D,H,W) data, got shape {data.shape}")

    # 1. depth axis
    if depth_axis_hint is not None:
        if not 0 <= depth_axis_hint <= 2:
            raise DataError(f"depth_axis_hint must be a spatial axis 0..2, got {depth_axis_hint}")
        if isinstance(vol.spacing, Spacing) and depth_axis_hint != 0:
            raise DataError("depth axis already established; hint must be 0 or absent")
        axis = depth_axis_hint
    elif vol.depth_axis_moved:
        axis = 0
    elif isinstance(vol.spacing, Spacing):
        axis = 0
    else:
        axis = _most_anisotropic_axis(vol.spacing)
    if axis != 0:
        data = np.moveaxis(data, axis + 1, 1)
    if isinstance(vol.spacing, Spacing):
        spacing = vol.spacing
    else:
        raw = list(vol.spacing)
        s_slice = raw.pop(axis)
        spacing = Spacing(s_slice, raw[0], raw[1])

    # 2. foreground crop
    if vol.modality.lower() in _ZERO_THRESHOLD_MODALITIES:
        threshold = 0.0
    else:
        threshold = float(np.percentile(data, 0.5))
    mask = (data > threshold).any(axis=0)
    if not mask.any():
        raise DataError("volume has no foreground voxels above the crop threshold")
    bounds = []
    for ax in range(3):
        proj = mask.any(axis=tuple(a for a in range(3) if a != ax))
        idx = np.flatnonzero(proj)
        bounds.append((int(idx[0]), int(idx[-1]) + 1))
    data = data[:, bounds[0][0] : bounds[0][1], bounds[1][0] : bounds[1][1], bounds[2][0] : bounds[2][1]]

    # 3. in-plane area resize to shorter side 512
    h, w = data.shape[2], data.shape[3]
    shorter = min(h, w)
    if shorter > RESIZE_LIMIT:
        scale = RESIZE_LIMIT / shorter
        new_h = RESIZE_LIMIT if h <= w else int(round(h * scale))
        new_w = RESIZE_LIMIT if w < h else int(round(w * scale))
        if h == w:
            new_h = new_w = RESIZE_LIMIT
        wh = _area_resize_weights(h, new_h)
        ww = _area_resize_weights(w, new_w)
        planes = data.astype(np.float64)
        data = (wh @ planes @ ww.T).astype(np.float32)
        factor = shorter / RESIZE_LIMIT
        spacing = Spacing(spacing.s_slice, spacing.s_h * factor, spacing.s_w * factor)

    return VolumeGrid(np.ascontiguousarray(data), spacing, vol.modality, True)


# -- cropping ------------------------------------------------------------------


def crop_extents(da: int, base: tuple[int, int]) -> tuple[int, int, int]:
    """Crop target max{ceil(depth_base / 2^da), 1} x plane x plane."""
    depth_base, plane = base
    depth = max(math.ceil(depth_base / 2 ** da), 1)
    return (depth, plane, plane)


def crop_sample(vol: VolumeGrid, da: int, base: tuple[int, int], rng: np.random.Generator) -> VolumeGrid:
    """Uniform random crop of the DA-dependent target size, zero-padding
    undersized volumes symmetrically first."""
    data = np.asarray(vol.data)
    target = crop_extents(da, base)
    pads = [(0, 0)]
    for ax, want in enumerate(target):
        have = data.shape[ax + 1]
        if have < want:
            missing = want - have
            pads.append((missing // 2, missing - missing // 2))
        else:
            pads.append((0, 0))
    if any(p != (0, 0) for p in pads):
        data = np.pad(data, pads)
    corners = [
        int(rng.integers(0, data.shape[ax + 1] - want + 1)) for ax, want in enumerate(target)
    ]
    patch = data[
        :,
        corners[0] : corners[0] + target[0],
        corners[1] : corners[1] + target[1],
        corners[2] : corners[2] + target[2],
    ]
    return VolumeGrid(np.ascontiguousarray(patch), vol.spacing, vol.modality, vol.depth_axis_moved)


# -- batching ------------------------------------------------------------------


@dataclass(frozen=True)
class Batch:
    item_ids: tuple[int, ...]
    da: int


@dataclass(frozen=True)
class BatchPlan:
    batches: tuple[Batch, ...] = field(default_factory=tuple)

    def as_dict(self) -> dict:
        return {
            "batches": [{"item_ids": list(b.item_ids), "da": b.da} for b in self.batches]
        }

    @property
    def n_items(self) -> int:
        return sum(len(b.item_ids) for b in self.batches)


def da_bucket_batches(das: Sequence[int], batch_size: int, seed: int) -> BatchPlan:
    """Group items by DA, shuffle within groups, chunk; every batch is
    DA-pure and every item appears exactly once."""
    if batch_size < 1:
        raise DataError(f"batch_size must be >= 1, got {batch_size}")
    rng = np.random.default_rng(seed)
    groups: dict[int, list[int]] = {}
    for idx, da in enumerate(das):
        groups.setdefault(int(da), []).append(idx)
    batches: list[Batch] = []
    for da in sorted(groups):
        ids = np.array(groups[da])
        rng.shuffle(ids)
        for start in range(0, len(ids), batch_size):
            chunk = ids[start : start + batch_size]
            batches.append(Batch(tuple(int(i) for i in chunk), da))
    order = rng.permutation(len(batches))
    return BatchPlan(tuple(batches[i] for i in order))


# -- synthetic data ------------------------------------------------------------

DEFAULT_SPACINGS: tuple = (
    (1.0, 1.0, 1.0),
    (2.0, 1.0, 1.0),
    (4.0, 1.0, 1.0),
    (8.0, 1.0, 1.0),
    (16.0, 1.0, 1.0),
    "2d",
)


@dataclass(frozen=True)
class SynthSpec:
    """Shape and content parameters for the synthetic corpus."""

    n: int = 16
    channels: int = 1
    depth: int = 16
    height: int = 64
    width: int = 64
    spacings: tuple = DEFAULT_SPACINGS
    max_objects: int = 3
    noise: float = 0.05
    modality: str = "gray"


def _add_ellipsoid(data: np.ndarray, rng: np.random.Generator) -> None:
    _, d, h, w = data.shape
    center = rng.uniform([0.2 * d, 0.2 * h, 0.2 * w], [0.8 * d, 0.8 * h, 0.8 * w])
    radii = rng.uniform([max(1.0, 0.1 * d), 0.1 * h, 0.1 * w], [max(1.5, 0.4 * d), 0.35 * h, 0.35 * w])
    zz, yy, xx = np.meshgrid(np.arange(d), np.arange(h), np.arange(w), indexing="ij")
    inside = (
        ((zz - center[0]) / radii[0]) ** 2
        + ((yy - center[1]) / radii[1]) ** 2
        + ((xx - center[2]) / radii[2]) ** 2
    ) <= 1.0
    value = rng.uniform(0.4, 1.0)
    direction = rng.normal(size=3)
    direction /= np.linalg.norm(direction)
    ramp = (zz * direction[0] / max(d, 1) + yy * direction[1] / h + xx * direction[2] / w)
    ramp = 0.5 + 0.5 * (ramp - ramp.min()) / max(ramp.max() - ramp.min(), 1e-9)
    data[:] += np.where(inside, value * ramp, 0.0)


def _add_box(data: np.ndarray, rng: np.random.Generator) -> None:
    _, d, h, w = data.shape
    z0 = int(rng.integers(0, max(d - 1, 1)))
    y0 = int(rng.integers(0, h - 4))
    x0 = int(rng.integers(0, w - 4))
    z1 = int(rng.integers(z0 + 1, d + 1))
    y1 = int(rng.integers(y0 + 4, h + 1))
    x1 = int(rng.integers(x0 + 4, w + 1))
    data[:, z0:z1, y0:y1, x0:x1] += rng.uniform(0.3, 0.8)


def synth_generate(spec: SynthSpec, seed: int) -> list[VolumeGrid]:
    """Deterministic synthetic volumes: ellipsoids/boxes with smooth
    gradients plus Gaussian noise, spacings drawn from the configured set."""
    if spec.n < 1:
        raise DataError(f"need n >= 1 volumes, got {spec.n}")
    rng = np.random.default_rng(seed)
    out: list[VolumeGrid] = []
    for _ in range(spec.n):
        choice = spec.spacings[int(rng.integers(0, len(spec.spacings)))]
        if choice == "2d":
            spacing = Spacing.two_d()
            depth = 1
        else:
            spacing = Spacing(*choice)
            depth = spec.depth
        data = np.zeros((spec.channels, depth, spec.height, spec.width), dtype=np.float64)
        n_objects = int(rng.integers(1, spec.max_objects + 1))
        for _ in range(n_objects):
            if rng.uniform() < 0.7:
                _add_ellipsoid(data, rng)
            else:
                _add_box(data, rng)
        data += rng.normal(0.0, spec.noise, size=data.shape)
        np.clip(data, 0.0, None, out=data)
        out.append(VolumeGrid(data.astype(np.float32), spacing, spec.modality, True))
    return out


# -- dataset index -------------------------------------------------------------


def write_dataset_index(entries: Sequence[dict], path) -> None:
    for e in entries:
        if set(e.keys()) != {"path", "modality"}:
            raise DataError(f"index entries need exactly path and modality, got {sorted(e.keys())}")
    Path(path).write_text(json.dumps(list(entries), indent=2) + "\n")


def load_dataset_index(path) -> list[dict]:
    path = Path(path)
    if not path.exists():
        raise DataError(f"missing dataset index {path}")
    try:
        entries = json.loads(path.read_text())
    except json.JSONDecodeError as e:
        raise DataError(f"malformed dataset index {path}: {e}") from e
    if not isinstance(entries, list):
        raise DataError("dataset index must be a JSON array")
    for e in entries:
        if not isinstance(e, dict) or "path" not in e or "modality" not in e:
            raise DataError(f"index entry must have path and modality: {e!r}")
    return entries


def dataset_das(index_entries: Sequence[dict], root) -> list[int]:
    """DA per index entry, resolved by loading each sidecar."""
    root = Path(root)
    das = []
    for e in index_entries:
        vol_path = root / e["path"]
        sidecar = _sidecar_path(vol_path)
        if not sidecar.exists():
            raise DataError(f"missing sidecar {sidecar}")
        meta = json.loads(sidecar.read_text())
        if not meta.get("depth_axis_moved", False):
            raise DataError(f"{e['path']}: preprocess volumes before batching")
        das.append(degree_of_anisotropy(spacing_from_json(meta["spacing"])))
    return das
