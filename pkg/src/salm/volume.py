"""Volumes, landmark sets, patches and the coordinate frames that link them.

Three coordinate frames are in play:

* original voxel space -- integer indices into ``Volume.data`` (``data[x, y, z]``);
* down-sampled voxel space -- indices into a ``downsample(v, k)`` grid;
* millimetres -- voxel coordinates scaled by the per-axis spacing.

A down-sampled voxel ``i`` covers the original block ``[i*k, (i+1)*k)`` and is
mapped to that block's centre, ``i*k + (k-1)/2``.
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F

VOL_SUFFIX = ".vol.json"
RAW_SUFFIX = ".vol.raw"
LMK_SUFFIX = ".lmk.json"


class VolumeFormatError(ValueError):
    """Raised when a volume or landmark file is malformed."""


@dataclass
class Volume:
    data: np.ndarray
    spacing_mm: tuple[float, float, float] = (1.0, 1.0, 1.0)
    name: str = "volume"

    def __post_init__(self):
        self.data = np.asarray(self.data)
        if self.data.ndim != 3 or min(self.data.shape) < 1:
            raise ValueError(f"volume data must be a non-empty 3D grid, got shape {self.data.shape}")
        self.spacing_mm = tuple(float(s) for s in self.spacing_mm)
        if len(self.spacing_mm) != 3 or not all(s > 0 and math.isfinite(s) for s in self.spacing_mm):
            raise ValueError(f"spacing must be 3 positive reals, got {self.spacing_mm}")
        if not np.all(np.isfinite(self.data)):
            raise ValueError("volume data contains NaN or Inf")

    @property
    def dims(self) -> tuple[int, int, int]:
        return tuple(int(d) for d in self.data.shape)


@dataclass
class LandmarkSet:
    names: list[str]
    points: np.ndarray
    spacing_mm: tuple[float, float, float] | None = None

    def __post_init__(self):
        self.names = [str(n) for n in self.names]
        self.points = np.asarray(self.points, dtype=np.float64).reshape(-1, 3)
        if len(set(self.names)) != len(self.names):
            raise ValueError("landmark names must be unique")
        if len(self.names) != len(self.points):
            raise ValueError(f"{len(self.names)} names but {len(self.points)} points")
        if not np.all(np.isfinite(self.points)):
            raise ValueError("landmark points must be finite")

    def __len__(self):
        return len(self.names)

    def as_dict(self) -> dict[str, np.ndarray]:
        return dict(zip(self.names, self.points))


@dataclass
class Patch:
    data: np.ndarray
    center: np.ndarray
    source_size: int
    extra: dict = field(default_factory=dict)

    @property
    def size(self) -> int:
        return int(self.data.shape[0])

    @property
    def radius(self) -> float:
        return self.source_size / 2


# ----------------------------------------------------------------------------
# file IO


def _stem(path) -> Path:
    path = Path(path)
    name = path.name
    for suffix in (VOL_SUFFIX, RAW_SUFFIX, LMK_SUFFIX):
        if name.endswith(suffix):
            return path.with_name(name[: -len(suffix)])
    return path


def save_volume(v: Volume, path) -> Path:
    """Write ``<stem>.vol.json`` + ``<stem>.vol.raw`` and return the JSON path."""
    stem = _stem(path)
    stem.parent.mkdir(parents=True, exist_ok=True)
    meta_path = stem.with_name(stem.name + VOL_SUFFIX)
    raw_path = stem.with_name(stem.name + RAW_SUFFIX)
    meta = {
        "dims": list(v.dims),
        "spacing_mm": list(v.spacing_mm),
        "dtype": "f32",
        "byte_order": "little",
        "index_order": "x-fastest",
        "data_file": raw_path.name,
    }
    # x fastest on disk == Fortran order of data[x, y, z]
    raw_path.write_bytes(np.asarray(v.data, dtype="<f4").tobytes(order="F"))
    meta_path.write_text(json.dumps(meta, indent=2))
    return meta_path


def load_volume(path, normalize: bool = False) -> Volume:
    """Read a volume from its JSON sidecar (``.vol.json``) or stem."""
    stem = _stem(path)
    meta_path = stem.with_name(stem.name + VOL_SUFFIX)
    if not meta_path.exists():
        raise FileNotFoundError(meta_path)
    meta = json.loads(meta_path.read_text())
    dims = [int(d) for d in meta["dims"]]
    spacing = [float(s) for s in meta["spacing_mm"]]
    if any(s <= 0 for s in spacing):
        raise VolumeFormatError(f"non-positive spacing {spacing}")
    if meta.get("dtype", "f32") != "f32":
        raise VolumeFormatError(f"unsupported dtype {meta['dtype']!r}")
    order = "<" if meta.get("byte_order", "little") == "little" else ">"
    if meta.get("index_order", "x-fastest") != "x-fastest":
        raise VolumeFormatError(f"unsupported index order {meta['index_order']!r}")
    raw_path = meta_path.with_name(meta.get("data_file", stem.name + RAW_SUFFIX))
    if not raw_path.exists():
        raise FileNotFoundError(raw_path)
    raw = raw_path.read_bytes()
    expected = int(np.prod(dims)) * 4
    if len(raw) != expected:
        raise VolumeFormatError(
            f"{raw_path.name}: expected {expected} bytes for dims {dims}, found {len(raw)}"
        )
    data = np.frombuffer(raw, dtype=order + "f4").reshape(dims, order="F")
    v = Volume(np.ascontiguousarray(data, dtype=np.float32), tuple(spacing), stem.name)
    return normalize_intensity(v) if normalize else v


def save_landmarks(lm: LandmarkSet, path) -> Path:
    stem = _stem(path)
    stem.parent.mkdir(parents=True, exist_ok=True)
    out = stem.with_name(stem.name + LMK_SUFFIX)
    doc = {"names": lm.names, "points_voxel": lm.points.tolist()}
    if lm.spacing_mm is not None:
        doc["spacing_mm"] = list(lm.spacing_mm)
    out.write_text(json.dumps(doc, indent=2))
    return out


def load_landmarks(path) -> LandmarkSet:
    stem = _stem(path)
    doc = json.loads(stem.with_name(stem.name + LMK_SUFFIX).read_text())
    spacing = doc.get("spacing_mm")
    return LandmarkSet(doc["names"], doc["points_voxel"], tuple(spacing) if spacing else None)


# ----------------------------------------------------------------------------
# grid operations


def normalize_intensity(v: Volume) -> Volume:
    """Min-max rescale to [0, 1]; a constant volume maps to all zeros."""
    lo, hi = float(v.data.min()), float(v.data.max())
    scale = hi - lo
    data = (v.data - lo) / scale if scale > 0 else np.zeros_like(v.data)
    return Volume(data.astype(np.float32), v.spacing_mm, v.name)


def downsample(v: Volume, k: int) -> Volume:
    """Block-mean pooling by an integer factor ``k``.

    Output dims are ``ceil(dims / k)``; partial blocks at the upper edges
    average only the voxels they actually contain.
    """
    if int(k) != k or k < 1:
        raise ValueError(f"down-sample factor must be a positive integer, got {k}")
    k = int(k)
    if k == 1:
        return Volume(v.data.copy(), v.spacing_mm, v.name)
    out_dims = [-(-d // k) for d in v.dims]
    pad = [(0, o * k - d) for o, d in zip(out_dims, v.dims)]
    data = np.pad(v.data.astype(np.float64), pad)
    count = np.pad(np.ones(v.dims), pad)
    shape = (out_dims[0], k, out_dims[1], k, out_dims[2], k)
    sums = data.reshape(shape).sum(axis=(1, 3, 5))
    counts = count.reshape(shape).sum(axis=(1, 3, 5))
    spacing = tuple(s * k for s in v.spacing_mm)
    return Volume((sums / counts).astype(v.data.dtype), spacing, v.name)


def crop_patch(v: Volume, center, size: int) -> Patch:
    """Cut an ``size``-edge cube whose voxel ``(size/2,)*3`` sits at ``round(center)``.

    Voxels outside the volume read as zero.
    """
    size = int(size)
    if size < 2 or size % 2:
        raise ValueError(f"patch size must be a positive even integer, got {size}")
    center = np.asarray(center, dtype=np.float64).reshape(3)
    if not np.all(np.isfinite(center)):
        raise ValueError(f"patch center must be finite, got {center}")
    lo = np.floor(center + 0.5).astype(np.int64) - size // 2
    out = np.zeros((size, size, size), dtype=v.data.dtype)
    src, dst = [], []
    for axis in range(3):
        a = max(lo[axis], 0)
        b = min(lo[axis] + size, v.dims[axis])
        if a >= b:
            return Patch(out, center.copy(), size)
        src.append(slice(a, b))
        dst.append(slice(a - lo[axis], b - lo[axis]))
    out[tuple(dst)] = v.data[tuple(src)]
    return Patch(out, center.copy(), size)


def resize_grid(data: torch.Tensor, target: int) -> torch.Tensor:
    """Trilinear resize of a ``(N, C, s, s, s)`` batch to edge ``target`` (corner-aligned)."""
    if data.shape[-1] == target:
        return data
    return F.interpolate(data, size=(target,) * 3, mode="trilinear", align_corners=True)


def resize_patch(p: Patch, target: int) -> Patch:
    if target < 1:
        raise ValueError(f"target edge must be >= 1, got {target}")
    if p.size == target:
        return Patch(p.data.copy(), p.center.copy(), p.source_size)
    t = torch.from_numpy(np.ascontiguousarray(p.data, dtype=np.float64))[None, None]
    data = resize_grid(t, target)[0, 0].numpy().astype(p.data.dtype)
    return Patch(data, p.center.copy(), p.source_size)


# ----------------------------------------------------------------------------
# coordinate frames


def _as_coords(x):
    return x if isinstance(x, torch.Tensor) else np.asarray(x, dtype=np.float64)


def coords_ds_to_orig(x_ds, k: int):
    """Down-sampled grid coordinates to original voxel coordinates (block centres).

    Works on numpy arrays and (differentiably) on torch tensors.
    """
    return _as_coords(x_ds) * k + (k - 1) / 2


def coords_orig_to_ds(x_orig, k: int):
    return (_as_coords(x_orig) - (k - 1) / 2) / k


def voxel_to_mm(points, spacing_mm):
    spacing = np.asarray(spacing_mm, dtype=np.float64)
    if np.any(spacing <= 0):
        raise ValueError(f"spacing must be positive, got {spacing_mm}")
    return np.asarray(points, dtype=np.float64) * spacing
