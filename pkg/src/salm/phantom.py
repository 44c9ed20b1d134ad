"""Synthetic skull-like phantoms with analytically known landmarks.

A phantom is a max-composite of soft-edged ellipsoids and one box placed at a
randomly jittered pose (translation plus per-axis scale).  Landmarks sit on
object surfaces (axis extrema of ellipsoids, corners of the box) and undergo
the same pose, so their positions are exact by construction.
"""
from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .volume import LandmarkSet, Volume, load_landmarks, load_volume, save_landmarks, save_volume

EDGE_WIDTH = 1.0
MAX_ATTEMPTS = 10

# name -> (centre, semi-axes, intensity); canonical voxel units, origin at the volume centre
ELLIPSOIDS = {
    "cranium": ((0.0, 0.0, 5.0), (62.0, 72.0, 50.0), 0.55),
    "jaw": ((0.0, 38.0, -34.0), (34.0, 26.0, 16.0), 0.9),
    "ear_l": ((-60.0, -5.0, -5.0), (8.0, 10.0, 12.0), 1.0),
    "ear_r": ((60.0, -5.0, -5.0), (8.0, 10.0, 12.0), 1.0),
}
BOX = ((0.0, 58.0, -8.0), (18.0, 12.0, 9.0), 1.0)

# (name, kind, object, offset in units of the object's semi-axes / half-extents)
LANDMARKS = [
    ("cranium_top", "ellipsoid", "cranium", (0, 0, 1)),
    ("jaw_bottom", "ellipsoid", "jaw", (0, 0, -1)),
    ("jaw_front", "ellipsoid", "jaw", (0, 1, 0)),
    ("box_corner_r", "box", None, (1, 1, 1)),
    ("box_corner_l", "box", None, (-1, 1, 1)),
    ("ear_l_lateral", "ellipsoid", "ear_l", (-1, 0, 0)),
    ("cranium_back", "ellipsoid", "cranium", (0, -1, 0)),
    ("ear_r_lateral", "ellipsoid", "ear_r", (1, 0, 0)),
    ("jaw_right", "ellipsoid", "jaw", (1, 0, 0)),
    ("jaw_left", "ellipsoid", "jaw", (-1, 0, 0)),
]


@dataclass
class PhantomSpec:
    dims: tuple[int, int, int] = (192, 192, 144)
    spacing_mm: tuple[float, float, float] = (0.3, 0.3, 0.3)
    n_landmarks: int = 6
    noise_std: float = 0.04
    translation: float = 8.0
    scale_jitter: float = 0.08
    seed: int = 0

    def __post_init__(self):
        self.dims = tuple(int(d) for d in self.dims)
        self.spacing_mm = tuple(float(s) for s in self.spacing_mm)
        if not 2 <= self.n_landmarks <= len(LANDMARKS):
            raise ValueError(f"n_landmarks must be in [2, {len(LANDMARKS)}], got {self.n_landmarks}")
        if any(d < 8 for d in self.dims):
            raise ValueError(f"phantom dims too small: {self.dims}")
        if self.noise_std < 0 or self.translation < 0 or not 0 <= self.scale_jitter < 1:
            raise ValueError("noise, translation and scale jitter must be non-negative (scale < 1)")

    @property
    def landmark_names(self):
        return [name for name, *_ in LANDMARKS[: self.n_landmarks]]

    def to_dict(self):
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, doc):
        return cls(**doc)


def _canonical_scale(dims):
    # the layout above is sized for a 192 x 192 x 144 grid
    return np.array(dims, dtype=np.float64) / np.array([192.0, 192.0, 144.0])


def _landmark_points(n, scale, shift):
    pts = []
    for _, kind, obj, offset in LANDMARKS[:n]:
        centre, axes, _ = ELLIPSOIDS[obj] if kind == "ellipsoid" else BOX
        pts.append(np.asarray(centre) + np.asarray(offset) * np.asarray(axes))
    return np.asarray(pts) * scale + shift


def _soft_step(x):
    return 1.0 / (1.0 + np.exp(-x / EDGE_WIDTH))


def render(dims, scale, shift) -> np.ndarray:
    """Noiseless phantom intensities for a pose (``canonical * scale + shift``)."""
    axes = [np.arange(d, dtype=np.float32) for d in dims]
    # canonical coordinates of every voxel, one broadcastable axis at a time
    cx, cy, cz = [((a - shift[i]) / scale[i]).astype(np.float32) for i, a in enumerate(axes)]
    cx, cy, cz = cx[:, None, None], cy[None, :, None], cz[None, None, :]
    out = np.zeros(dims, dtype=np.float32)
    for centre, semi, intensity in ELLIPSOIDS.values():
        q = ((cx - centre[0]) / semi[0]) ** 2 + ((cy - centre[1]) / semi[1]) ** 2 \
            + ((cz - centre[2]) / semi[2]) ** 2
        # approximate signed distance to the surface, in voxels at the pose scale
        radius = min(s * f for s, f in zip(semi, scale))
        np.maximum(out, intensity * _soft_step((1.0 - np.sqrt(q)) * radius), out=out)
    centre, half, intensity = BOX
    box = np.ones((), dtype=np.float32)
    for i, c in enumerate((cx, cy, cz)):
        box = box * _soft_step((half[i] - np.abs(c - centre[i])) * scale[i])
    np.maximum(out, intensity * box, out=out)
    return out


def generate_phantom(spec: PhantomSpec, index: int) -> tuple[Volume, LandmarkSet]:
    """Deterministic in ``(spec.seed, index)``."""
    rng = np.random.default_rng([spec.seed, index])
    dims = np.array(spec.dims)
    base = _canonical_scale(spec.dims)
    centre = (dims - 1) / 2
    damp = 1.0
    for _ in range(MAX_ATTEMPTS):
        scale = base * (1 + damp * rng.uniform(-spec.scale_jitter, spec.scale_jitter, 3))
        shift = centre + damp * rng.uniform(-spec.translation, spec.translation, 3) * base
        points = _landmark_points(spec.n_landmarks, scale, shift)
        if np.all(points > 0) and np.all(points < dims - 1):
            break
        damp *= 0.5
    else:
        raise RuntimeError(f"phantom {index}: landmarks left the volume after {MAX_ATTEMPTS} attempts")
    data = render(spec.dims, scale, shift)
    if spec.noise_std > 0:
        data += rng.normal(0.0, spec.noise_std, data.shape).astype(np.float32)
    name = f"phantom_{index:04d}"
    volume = Volume(data, spec.spacing_mm, name)
    return volume, LandmarkSet(spec.landmark_names, points, spec.spacing_mm)


def split_counts(count, ratios):
    if count < 3:
        raise ValueError(f"need at least 3 phantoms, got {count}")
    ratios = np.asarray(ratios, dtype=np.float64)
    if len(ratios) != 3 or np.any(ratios < 0) or ratios.sum() <= 0:
        raise ValueError(f"split ratios must be three non-negative numbers, got {ratios}")
    ratios = ratios / ratios.sum()
    n_train = int(round(count * ratios[0]))
    n_val = int(round(count * ratios[1]))
    return n_train, n_val, count - n_train - n_val


def generate_dataset(spec: PhantomSpec, count: int, split_ratios=(0.8, 0.0, 0.2), out_dir="data"):
    """Write phantom triples and ``manifest.json``; returns the manifest path."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    n_train, n_val, _ = split_counts(count, split_ratios)
    entries = []
    for index in range(count):
        volume, landmarks = generate_phantom(spec, index)
        vol_path = save_volume(volume, out / volume.name)
        lmk_path = save_landmarks(landmarks, out / volume.name)
        entries.append({"volume": vol_path.name, "landmarks": lmk_path.name})
    manifest = {
        "train": entries[:n_train],
        "val": entries[n_train : n_train + n_val],
        "test": entries[n_train + n_val :],
        "spec": spec.to_dict(),
    }
    path = out / "manifest.json"
    path.write_text(json.dumps(manifest, indent=2))
    return path


def load_split(manifest_path, split="train", normalize=False):
    """Load ``(Volume, LandmarkSet)`` pairs for one split of a manifest."""
    manifest_path = Path(manifest_path)
    doc = json.loads(manifest_path.read_text())
    root = manifest_path.parent
    return [
        (load_volume(root / e["volume"], normalize=normalize), load_landmarks(root / e["landmarks"]))
        for e in doc[split]
    ]
