"""The two-stage detector and its refinement loop."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import torch
import torch.nn as nn

from .attention import GraphAttention, sample_node_features
from .augment import perturb_center
from .cell import SALSTMCell
from .coarse import CoarseNet, integral_landmark
from .config import TrainConfig
from .embedding import PatchEncoder
from .volume import LandmarkSet, Volume, coords_ds_to_orig, coords_orig_to_ds, crop_patch, \
    downsample, resize_grid

DTYPES = {"float32": torch.float32, "float64": torch.float64}


@dataclass
class RefineTrace:
    """Everything produced by one refinement pass.

    ``xs[0]`` is the coarse landmark ``x_1`` and ``xs[t]`` is ``x_{t+1}``, so
    ``xs[-1]`` is the final prediction.  ``forget[j]``/``update[j]`` are the
    gates applied at iteration ``t = j + 2``.
    """

    xs: list[torch.Tensor]
    states: list = field(default_factory=list)
    forget: list[torch.Tensor] = field(default_factory=list)
    update: list[torch.Tensor] = field(default_factory=list)
    centers: list[np.ndarray] = field(default_factory=list)
    attention: list[torch.Tensor] = field(default_factory=list)

    @property
    def final(self):
        return self.xs[-1]

    def to_json(self, names):
        def rows(t):
            return t.detach().cpu().double().numpy().tolist()

        return {
            "names": list(names),
            "x": [rows(x) for x in self.xs],
            "crop_centers": [c.tolist() for c in self.centers],
            "forget": [rows(f) for f in self.forget],
            "update": [rows(u) for u in self.update],
        }


class Detector(nn.Module):
    """Coarse heatmap network, patch encoder, graph attention and refinement cell."""

    def __init__(self, config: TrainConfig, landmark_names=None):
        super().__init__()
        names = list(landmark_names or config.landmark_names or [])
        if len(names) < 1:
            raise ValueError("detector needs at least one landmark name")
        if config.landmark_names is None:
            config = config.replace(landmark_names=names)
        elif list(config.landmark_names) != names:
            raise ValueError("landmark names disagree with the config")
        self.config = config
        self.names = names
        n, seed = len(names), config.seed
        self.coarse = CoarseNet(n, d=config.d, levels=config.coarse_levels, seed=seed,
                                 head_bias=config.heatmap_bias_init)
        self.encoder = PatchEncoder(config.encoder_widths, config.unified_size, seed=seed + 1)
        self.gam = GraphAttention(config.d, norm=config.gam_norm, seed=seed + 2)
        self.cell = SALSTMCell(n, config.m, config.d, config.attn_hidden, seed=seed + 3)
        self.to(DTYPES[config.dtype])

    @property
    def n_landmarks(self):
        return len(self.names)

    @property
    def dtype(self):
        return next(self.parameters()).dtype

    def parameter_groups(self) -> dict[str, list[tuple[str, nn.Parameter]]]:
        cell = dict(self.cell.named_parameters())
        return {
            "coarse": list(self.coarse.named_parameters()),
            "encoder": list(self.encoder.named_parameters()),
            "gam": list(self.gam.named_parameters()),
            "P_s": [(k, v) for k, v in cell.items() if k.startswith("proj.")],
            "P_tau": [("relevance", cell["relevance"])],
            "W_gamma": [("offset_weight", cell["offset_weight"]), ("offset_bias", cell["offset_bias"])],
        }

    # ------------------------------------------------------------------
    def prepare(self, volume: Volume) -> Volume:
        v_ds = downsample(volume, self.config.k)
        if self.config.down_size is not None and list(v_ds.dims) != list(self.config.down_size):
            raise ValueError(f"down-sampled dims {v_ds.dims} != configured {self.config.down_size}")
        return v_ds

    def coarse_stage(self, volume: Volume, v_ds: Volume | None = None):
        """Heatmaps ``(n, X, Y, Z)``, feature map ``(d, X, Y, Z)`` and ``x_1`` in original voxels."""
        v_ds = self.prepare(volume) if v_ds is None else v_ds
        x = torch.as_tensor(v_ds.data, dtype=self.dtype)[None, None]
        heatmaps, features = self.coarse(x)
        heatmaps, features = heatmaps[0], features[0]
        x1 = coords_ds_to_orig(integral_landmark(heatmaps), self.config.k)
        return heatmaps, features, x1

    def embed(self, volume: Volume, features, x, centers, size):
        """Visual (``E``) and structure-aware (``R``) embeddings at the current positions."""
        patches = np.stack([crop_patch(volume, c, size).data for c in centers])
        patches = torch.as_tensor(patches, dtype=self.dtype)[:, None]
        E = self.encoder(resize_grid(patches, self.config.unified_size))
        ds_dims = torch.tensor(features.shape[1:], dtype=self.dtype)
        x_ds = coords_orig_to_ds(x, self.config.k)
        nodes_feat = sample_node_features(features, x_ds)
        R, attn = self.gam(x_ds / ds_dims, nodes_feat, return_attention=True)
        return E, R, attn

    def refine(self, volume: Volume, features, x1, T=None, patch_sizes=None, rng=None,
               centers=None) -> RefineTrace:
        """Run ``T`` refinement iterations starting from coarse landmarks ``x1``.

        ``rng`` enables Gaussian jitter of crop centres (training).  ``centers``
        pins crop centres per iteration, which is how finite-difference checks
        hold the non-differentiable cropping fixed.
        """
        T = self.config.T if T is None else T
        sizes = list(self.config.patch_sizes if patch_sizes is None else patch_sizes)
        if T < 1:
            raise ValueError("T must be >= 1")
        if len(sizes) < T:
            raise ValueError(f"need {T} patch sizes, got {sizes}")
        if any(b > a for a, b in zip(sizes, sizes[1:])):
            raise ValueError(f"patch sizes must be non-increasing, got {sizes}")
        trace = RefineTrace(xs=[x1])
        state = None
        x = x1
        for t in range(T):
            if not torch.all(torch.isfinite(x)):
                raise FloatingPointError(f"non-finite landmark prediction entering iteration {t + 1}")
            if centers is not None:
                c = np.asarray(centers[t], dtype=np.float64)
            else:
                c = perturb_center(x.detach().cpu().double().numpy(), sizes[t] / 2, rng,
                                   self.config.sigma_c_divisor)
            trace.centers.append(c)
            E, R, attn = self.embed(volume, features, x, c, sizes[t])
            trace.attention.append(attn)
            if state is None:
                state = self.cell.init_state(E, R, x)
                x = self.cell.predict(state)
            else:
                state, x = self.cell.step(state, E, R, x)
                trace.forget.append(state.forget)
                trace.update.append(state.update)
            trace.states.append(state)
            trace.xs.append(x)
        return trace

    def forward(self, volume: Volume, rng=None, centers=None):
        heatmaps, features, x1 = self.coarse_stage(volume)
        trace = self.refine(volume, features, x1, rng=rng, centers=centers)
        return heatmaps, trace

    @torch.no_grad()
    def predict(self, volume: Volume) -> tuple[LandmarkSet, LandmarkSet, RefineTrace]:
        """Inference-mode prediction: ``(final, coarse, trace)`` in original voxels."""
        was_training = self.training
        self.eval()
        try:
            _, trace = self(volume)
        finally:
            self.train(was_training)
        final = LandmarkSet(self.names, trace.final.double().numpy(), volume.spacing_mm)
        coarse = LandmarkSet(self.names, trace.xs[0].double().numpy(), volume.spacing_mm)
        return final, coarse, trace
