"""Radial error, MRE/SD/SDR summaries and inference timing."""
from __future__ import annotations

import csv
import io
import json
import time
from dataclasses import dataclass, field

import numpy as np

from .volume import LandmarkSet

DEFAULT_RADII = (2.0, 2.5, 3.0, 4.0, 8.0)
AGGREGATE = "Average"


def radial_errors(pred: LandmarkSet, gt: LandmarkSet, spacing_mm=None) -> dict[str, float]:
    """Per-landmark Euclidean error in mm.

    ``spacing_mm`` defaults to the ground truth's spacing.
    """
    if list(pred.names) != list(gt.names):
        missing = sorted(set(gt.names) - set(pred.names))
        extra = sorted(set(pred.names) - set(gt.names))
        raise ValueError(f"landmark names differ (missing {missing}, unexpected {extra}, "
                         f"or order differs)")
    spacing = spacing_mm if spacing_mm is not None else gt.spacing_mm
    if spacing is None:
        raise ValueError("no voxel spacing available")
    spacing = np.asarray(spacing, dtype=np.float64)
    if spacing.shape != (3,) or np.any(spacing <= 0) or not np.all(np.isfinite(spacing)):
        raise ValueError(f"spacing must be three positive numbers, got {spacing}")
    diff = (np.asarray(pred.points, np.float64) - np.asarray(gt.points, np.float64)) * spacing
    dist = np.linalg.norm(diff, axis=1)
    return {name: float(e) for name, e in zip(gt.names, dist)}


@dataclass
class MetricsRow:
    name: str
    mre: float
    sd: float
    sdr: list[float]
    count: int


@dataclass
class MetricsReport:
    rows: list[MetricsRow]
    aggregate: MetricsRow
    radii: list[float]
    sample_count: int
    seconds_per_volume: float | None = None
    extra: dict = field(default_factory=dict)

    def row(self, name) -> MetricsRow:
        if name == AGGREGATE:
            return self.aggregate
        for r in self.rows:
            if r.name == name:
                return r
        raise KeyError(name)

    def to_dict(self):
        def row(r):
            return {"name": r.name, "MRE_mm": r.mre, "SD_mm": r.sd, "count": r.count,
                    "SDR_percent": {f"{rad:g}": s for rad, s in zip(self.radii, r.sdr)}}

        return {
            "radii_mm": list(self.radii),
            "sample_count": self.sample_count,
            "seconds_per_volume": self.seconds_per_volume,
            "landmarks": [row(r) for r in self.rows],
            "aggregate": row(self.aggregate),
            **self.extra,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2)

    def to_text(self) -> str:
        width = max(len(AGGREGATE), *(len(r.name) for r in self.rows))
        head = [f"{'Landmark':<{width}}", "MRE(SD) mm"] + [f"{r:g} mm" for r in self.radii]
        lines = [" | ".join(head)]
        for r in [*self.rows, self.aggregate]:
            cells = [f"{r.name:<{width}}", f"{r.mre:.2f}({r.sd:.2f})"]
            cells += [f"{s:.2f}" if s != 100 else "100" for s in r.sdr]
            lines.append(" | ".join(cells))
        lines.append(f"samples: {self.sample_count}")
        if self.seconds_per_volume is not None:
            lines.append(f"inference: {self.seconds_per_volume:.3f} s/volume")
        return "\n".join(lines) + "\n"

    def to_csv(self) -> str:
        buf = io.StringIO()
        writer = csv.writer(buf)
        writer.writerow(["landmark", "MRE_mm", "SD_mm", "count"] + [f"SDR_{r:g}mm" for r in self.radii])
        for r in [*self.rows, self.aggregate]:
            writer.writerow([r.name, r.mre, r.sd, r.count, *r.sdr])
        return buf.getvalue()


def _row(name, errors, radii) -> MetricsRow:
    e = np.asarray(errors, dtype=np.float64)
    if e.size == 0:
        raise ValueError(f"{name}: empty error list")
    if np.any(~np.isfinite(e)) or np.any(e < 0):
        raise ValueError(f"{name}: errors must be finite and non-negative")
    sdr = [100.0 * np.count_nonzero(e <= r) / e.size for r in radii]
    return MetricsRow(name, float(e.mean()), float(e.std()), sdr, int(e.size))


def summarize(errors_by_landmark, radii=DEFAULT_RADII, seconds_per_volume=None) -> MetricsReport:
    """MRE, population SD and SDR (errors <= r) per landmark plus a pooled row."""
    radii = [float(r) for r in radii]
    if not radii or any(r < 0 for r in radii):
        raise ValueError(f"radii must be a non-empty list of non-negative values, got {radii}")
    if not errors_by_landmark:
        raise ValueError("no landmarks to summarize")
    rows = [_row(name, errs, radii) for name, errs in errors_by_landmark.items()]
    pooled = np.concatenate([np.asarray(e, np.float64).ravel() for e in errors_by_landmark.values()])
    aggregate = _row(AGGREGATE, pooled, radii)
    samples = max(r.count for r in rows)
    return MetricsReport(rows, aggregate, radii, samples, seconds_per_volume)


def collect_errors(pairs, spacing_mm=None) -> dict[str, list[float]]:
    """Group radial errors of ``(pred, gt)`` landmark-set pairs by landmark name."""
    out: dict[str, list[float]] = {}
    for pred, gt in pairs:
        for name, e in radial_errors(pred, gt, spacing_mm).items():
            out.setdefault(name, []).append(e)
    return out


def time_inference(model, volume) -> float:
    """Wall-clock seconds of one full two-stage prediction (no file I/O)."""
    start = time.perf_counter()
    model.predict(volume)
    return time.perf_counter() - start
