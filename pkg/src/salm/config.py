"""Run configuration shared by training, inference and the CLI."""
from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field
from pathlib import Path


@dataclass
class TrainConfig:
    # model geometry
    k: int = 4
    down_size: list[int] | None = None
    unified_size: int = 32
    patch_sizes: list[int] = field(default_factory=lambda: [64, 32, 16])
    T: int = 3
    m: int = 512
    d: int = 64
    encoder_widths: list[int] = field(default_factory=lambda: [64, 128, 256, 512])
    attn_hidden: int = 256
    coarse_levels: int = 3
    heatmap_bias_init: float = -6.0
    landmark_names: list[str] | None = None
    # losses
    sigma_h: float = 2.0
    lam: float = 0.5
    sigma_c_divisor: float = 3.0
    lc_include_coarse: bool = False
    lc_norm: str = "l1"
    gam_norm: str = "softmax"
    # optimisation
    lr: float = 1e-3
    betas: list[float] = field(default_factory=lambda: [0.9, 0.999])
    epochs: int = 200
    batch_size: int = 1
    grad_clip: float = 5.0
    checkpoint_every: int = 25
    seed: int = 0
    normalize: bool = True
    dtype: str = "float32"

    def __post_init__(self):
        self.validate()

    def validate(self):
        if not 0.0 <= self.lam <= 1.0:
            raise ValueError(f"lam must lie in [0, 1], got {self.lam}")
        if self.T < 1:
            raise ValueError(f"T must be >= 1, got {self.T}")
        if len(self.patch_sizes) != self.T:
            raise ValueError(f"need {self.T} patch sizes, got {self.patch_sizes}")
        if any(b > a for a, b in zip(self.patch_sizes, self.patch_sizes[1:])):
            raise ValueError(f"patch sizes must be non-increasing, got {self.patch_sizes}")
        sizes = [self.k, self.unified_size, self.m, self.d, self.attn_hidden, self.epochs,
                 self.batch_size, *self.patch_sizes, *self.encoder_widths]
        if any(int(s) <= 0 for s in sizes):
            raise ValueError("all sizes must be positive")
        if self.encoder_widths[-1] != self.m:
            raise ValueError(f"last encoder width {self.encoder_widths[-1]} must equal m={self.m}")
        if self.lc_norm not in ("l1", "l2"):
            raise ValueError(f"lc_norm must be 'l1' or 'l2', got {self.lc_norm!r}")
        if self.gam_norm not in ("softmax", "raw-eps"):
            raise ValueError(f"gam_norm must be 'softmax' or 'raw-eps', got {self.gam_norm!r}")
        if self.dtype not in ("float32", "float64"):
            raise ValueError(f"dtype must be float32 or float64, got {self.dtype!r}")

    @property
    def n_landmarks(self):
        return len(self.landmark_names) if self.landmark_names else None

    def replace(self, **changes) -> TrainConfig:
        return dataclasses.replace(self, **changes)

    def to_dict(self):
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, doc: dict) -> TrainConfig:
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(doc) - known
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        return cls(**doc)

    @classmethod
    def from_json(cls, path) -> TrainConfig:
        return cls.from_dict(json.loads(Path(path).read_text()))

    def to_json(self, path):
        Path(path).write_text(json.dumps(self.to_dict(), indent=2))


def paper_preset(**changes) -> TrainConfig:
    """Full-scale settings: 8x down-sampling and 1000 epochs."""
    return TrainConfig(k=8, epochs=1000, **changes)
