"""Single-file checkpoint container.

Layout (all integers little-endian)::

    b"SALM"                      4-byte magic
    u32  format version          currently 1
    u32  segment count
    repeated per segment:
        u16  name length, then the UTF-8 name
        u64  payload length, then the payload bytes

Segments written by :func:`save_checkpoint`:

    header      JSON  {"format": 1, "epoch": int, "names": [...]}
    config      JSON  the ``TrainConfig`` as a dict
    coarse      torch-serialised state dict of the coarse network
    encoder     torch-serialised state dict of the patch encoder
    gam         torch-serialised state dict of the graph attention module
    cell        torch-serialised state dict of the refinement cell
    optimizer   torch-serialised optimizer state (optional)
    rng         torch-serialised {"seed", "epoch", "torch"} (torch CPU generator state)
"""
from __future__ import annotations

import io
import json
import struct
from pathlib import Path

import torch

from .config import TrainConfig

MAGIC = b"SALM"
FORMAT_VERSION = 1
MODEL_SEGMENTS = ("coarse", "encoder", "gam", "cell")


class CheckpointError(ValueError):
    pass


def write_segments(path, segments: dict[str, bytes]):
    buf = io.BytesIO()
    buf.write(MAGIC)
    buf.write(struct.pack("<II", FORMAT_VERSION, len(segments)))
    for name, payload in segments.items():
        raw = name.encode("utf-8")
        buf.write(struct.pack("<H", len(raw)))
        buf.write(raw)
        buf.write(struct.pack("<Q", len(payload)))
        buf.write(payload)
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_suffix(path.suffix + ".tmp")
    tmp.write_bytes(buf.getvalue())
    tmp.replace(path)


def read_segments(path) -> dict[str, bytes]:
    blob = Path(path).read_bytes()
    if blob[:4] != MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint (bad magic)")
    if len(blob) < 12:
        raise CheckpointError(f"{path}: truncated header")
    version, count = struct.unpack_from("<II", blob, 4)
    if version != FORMAT_VERSION:
        raise CheckpointError(f"{path}: unsupported format version {version}")
    pos = 12
    segments = {}
    try:
        for _ in range(count):
            (n,) = struct.unpack_from("<H", blob, pos)
            pos += 2
            name = blob[pos : pos + n].decode("utf-8")
            pos += n
            (size,) = struct.unpack_from("<Q", blob, pos)
            pos += 8
            if pos + size > len(blob):
                raise CheckpointError(f"{path}: segment {name!r} truncated")
            segments[name] = blob[pos : pos + size]
            pos += size
    except struct.error as exc:
        raise CheckpointError(f"{path}: truncated checkpoint") from exc
    return segments


def _torch_bytes(obj) -> bytes:
    buf = io.BytesIO()
    torch.save(obj, buf)
    return buf.getvalue()


def _torch_load(payload: bytes):
    return torch.load(io.BytesIO(payload), map_location="cpu", weights_only=True)


def save_checkpoint(path, model, optimizer=None, epoch=0):
    segments = {
        "header": json.dumps({"format": FORMAT_VERSION, "epoch": epoch, "names": model.names}).encode(),
        "config": json.dumps(model.config.to_dict()).encode(),
    }
    for name in MODEL_SEGMENTS:
        segments[name] = _torch_bytes(getattr(model, name).state_dict())
    if optimizer is not None:
        segments["optimizer"] = _torch_bytes(optimizer.state_dict())
    segments["rng"] = _torch_bytes(
        {"seed": model.config.seed, "epoch": epoch, "torch": torch.get_rng_state()}
    )
    write_segments(path, segments)


def load_checkpoint(path):
    """Return ``(model, extras)`` where extras holds epoch and optimizer/rng state."""
    from .model import Detector

    segments = read_segments(path)
    missing = [s for s in ("header", "config", *MODEL_SEGMENTS) if s not in segments]
    if missing:
        raise CheckpointError(f"{path}: missing segments {missing}")
    header = json.loads(segments["header"])
    config = TrainConfig.from_dict(json.loads(segments["config"]))
    model = Detector(config, header["names"])
    for name in MODEL_SEGMENTS:
        getattr(model, name).load_state_dict(_torch_load(segments[name]))
    extras = {"epoch": header.get("epoch", 0)}
    if "optimizer" in segments:
        extras["optimizer"] = _torch_load(segments["optimizer"])
    if "rng" in segments:
        extras["rng"] = _torch_load(segments["rng"])
    return model, extras
