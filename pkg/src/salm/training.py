"""Losses, the optimisation loop and loss logging."""
from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from .augment import perturb_center
from .checkpoint import save_checkpoint
from .coarse import heatmap_loss, make_heatmap_target
from .config import TrainConfig
from .model import Detector
from .volume import coords_orig_to_ds, normalize_intensity

log = logging.getLogger(__name__)

LOG_FIELDS = ("epoch", "L_h", "L_c", "L_o", "train_MRE_voxels")

__all__ = [
    "TrainingError", "TrainResult", "perturb_center", "refinement_loss", "total_loss",
    "train_loop", "evaluate_mre", "write_loss_log",
]


class TrainingError(RuntimeError):
    pass


def refinement_loss(xs, g, include_coarse=False, norm="l1"):
    """Coordinate loss over the supervised predictions of a trace.

    ``xs`` is the list ``[x_1, x_2, ..., x_{T+1}]`` (each ``(n, 3)``); by
    default ``x_1`` is left to the heatmap loss and only the refined
    predictions are supervised.
    """
    xs = list(getattr(xs, "xs", xs))
    supervised = xs if include_coarse else xs[1:]
    if not supervised:
        raise ValueError("trace has no supervised predictions")
    g = torch.as_tensor(g, dtype=supervised[0].dtype)
    total = 0
    for x in supervised:
        if x.shape != g.shape:
            raise ValueError(f"prediction shape {tuple(x.shape)} != ground truth {tuple(g.shape)}")
        diff = x - g
        total = total + (diff.abs().sum() if norm == "l1" else diff.norm(dim=-1).sum())
    return total


def total_loss(L_h, L_c, lam=0.5):
    if not 0.0 <= lam <= 1.0:
        raise ValueError(f"lambda must lie in [0, 1], got {lam}")
    return lam * L_h + (1 - lam) * L_c


def volume_losses(model: Detector, volume, landmarks, rng=None):
    """Forward one annotated volume; returns ``(L_h, L_c, L_o, trace)``."""
    cfg = model.config
    if list(landmarks.names) != model.names:
        raise TrainingError(f"{volume.name}: landmark names {landmarks.names} != {model.names}")
    v_ds = model.prepare(volume)
    heatmaps, features, x1 = model.coarse_stage(volume, v_ds)
    g_ds = coords_orig_to_ds(landmarks.points, cfg.k)
    targets = make_heatmap_target(g_ds, v_ds.dims, cfg.sigma_h, dtype=model.dtype)
    L_h = heatmap_loss(heatmaps, targets)
    trace = model.refine(volume, features, x1, rng=rng)
    g = torch.as_tensor(landmarks.points, dtype=model.dtype)
    L_c = refinement_loss(trace.xs, g, cfg.lc_include_coarse, cfg.lc_norm)
    return L_h, L_c, total_loss(L_h, L_c, cfg.lam), trace


def mean_radial_voxels(pred, gt) -> float:
    pred = np.asarray(pred, dtype=np.float64)
    gt = np.asarray(gt, dtype=np.float64)
    return float(np.linalg.norm(pred - gt, axis=-1).mean())


@torch.no_grad()
def evaluate_mre(model: Detector, dataset) -> tuple[float, float]:
    """Inference-mode MRE in original voxels: ``(final, coarse)``."""
    final, coarse = [], []
    for volume, landmarks in dataset:
        pred, pred_coarse, _ = model.predict(volume)
        final.append(np.linalg.norm(pred.points - landmarks.points, axis=1))
        coarse.append(np.linalg.norm(pred_coarse.points - landmarks.points, axis=1))
    return float(np.concatenate(final).mean()), float(np.concatenate(coarse).mean())


def write_loss_log(path, rows):
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=LOG_FIELDS)
        writer.writeheader()
        for row in rows:
            writer.writerow({k: row[k] for k in LOG_FIELDS})


@dataclass
class TrainResult:
    model: Detector
    history: list[dict] = field(default_factory=list)
    checkpoint: Path | None = None
    best_checkpoint: Path | None = None


def _check_dataset(dataset):
    if not dataset:
        raise TrainingError("training set is empty")
    names = list(dataset[0][1].names)
    for volume, landmarks in dataset:
        if list(landmarks.names) != names:
            raise TrainingError(
                f"{volume.name}: landmark names {landmarks.names} differ from {names}"
            )
    return names


def train_loop(config: TrainConfig, dataset, out_dir=None, val=None, model=None,
               start_epoch=0, optimizer_state=None, progress=None) -> TrainResult:
    """Adam training over ``(Volume, LandmarkSet)`` pairs.

    Every epoch visits the volumes in a seeded random order; crop-centre
    jitter for volume ``j`` in epoch ``e`` draws from ``rng(seed, e, j)`` so
    the run is reproducible.  With ``out_dir`` set, ``loss.csv`` and
    ``checkpoint.salm`` are written there (plus ``best.salm`` when a
    validation set is given).
    """
    names = _check_dataset(dataset)
    if config.normalize:
        dataset = [(normalize_intensity(v), lm) for v, lm in dataset]
        val = [(normalize_intensity(v), lm) for v, lm in val] if val else val
    torch.manual_seed(config.seed)
    if model is None:
        model = Detector(config, names)
    config = model.config
    optimizer = torch.optim.Adam(model.parameters(), lr=config.lr, betas=tuple(config.betas))
    if optimizer_state is not None:
        optimizer.load_state_dict(optimizer_state)
    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
    result = TrainResult(model)
    best = math.inf

    for epoch in range(start_epoch, config.epochs):
        model.train()
        order = np.random.default_rng([config.seed, epoch]).permutation(len(dataset))
        sums = {"L_h": 0.0, "L_c": 0.0, "L_o": 0.0, "mre": 0.0}
        optimizer.zero_grad()
        for step, j in enumerate(order, start=1):
            volume, landmarks = dataset[j]
            rng = np.random.default_rng([config.seed, epoch, int(j)])
            try:
                L_h, L_c, L_o, trace = volume_losses(model, volume, landmarks, rng)
            except FloatingPointError as exc:
                raise TrainingError(f"non-finite values at epoch {epoch + 1}, volume "
                                    f"{volume.name}: {exc}") from exc
            if not torch.isfinite(L_o):
                raise TrainingError(
                    f"non-finite loss at epoch {epoch + 1}, volume {volume.name}: "
                    f"L_h={L_h.item()}, L_c={L_c.item()}"
                )
            (L_o / config.batch_size).backward()
            if step % config.batch_size == 0 or step == len(order):
                torch.nn.utils.clip_grad_norm_(model.parameters(), config.grad_clip)
                optimizer.step()
                optimizer.zero_grad()
            sums["L_h"] += L_h.item()
            sums["L_c"] += L_c.item()
            sums["L_o"] += L_o.item()
            sums["mre"] += mean_radial_voxels(trace.final.detach().numpy(), landmarks.points)
        count = len(order)
        row = {
            "epoch": epoch + 1,
            "L_h": sums["L_h"] / count,
            "L_c": sums["L_c"] / count,
            "L_o": sums["L_o"] / count,
            "train_MRE_voxels": sums["mre"] / count,
        }
        result.history.append(row)
        log.info("epoch %d: L_h=%.4g L_c=%.4g L_o=%.4g MRE=%.3f vox", row["epoch"], row["L_h"],
                 row["L_c"], row["L_o"], row["train_MRE_voxels"])
        if progress is not None:
            progress(row)
        last = epoch + 1 == config.epochs
        if out is not None:
            write_loss_log(out / "loss.csv", result.history)
            if (epoch + 1) % config.checkpoint_every == 0 or last:
                result.checkpoint = out / "checkpoint.salm"
                save_checkpoint(result.checkpoint, model, optimizer, epoch + 1)
                if val:
                    val_mre, _ = evaluate_mre(model, val)
                    log.info("epoch %d: validation MRE %.3f vox", epoch + 1, val_mre)
                    if val_mre < best:
                        best = val_mre
                        result.best_checkpoint = out / "best.salm"
                        save_checkpoint(result.best_checkpoint, model, optimizer, epoch + 1)
    model.eval()
    return result
