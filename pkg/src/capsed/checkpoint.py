"""Portable model checkpoints.

Layout::

    b"CAPSED01"                 magic, 8 bytes
    uint64 little-endian        header length in bytes
    header                      UTF-8 JSON: model/feature config, labels,
                                normalization statistics, block table
    blocks                      raw little-endian float64 arrays, one per
                                entry of the block table, in that order

The block table lists parameters in declaration order followed by
non-trainable buffers (batch-norm running statistics).
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .capsnet import CapsNet, ModelConfig
from .errors import DataError
from .features import FeatureConfig, NormStats

MAGIC = b"CAPSED01"
FORMAT_VERSION = 1


@dataclass
class Checkpoint:
    model: CapsNet
    features: FeatureConfig
    norm: NormStats
    labels: list[str]
    extra: dict = field(default_factory=dict)

    @property
    def routing_mode(self) -> str:
        return self.model.config.routing.mode


def save_checkpoint(path, model: CapsNet, features: FeatureConfig, norm: NormStats, labels,
                    extra: dict | None = None) -> None:
    if len(labels) != model.config.detection.n_classes:
        raise DataError(f"{len(labels)} labels for a {model.config.detection.n_classes}-class model")
    arrays = [(k, "param", t.data) for k, t in model.params.items()]
    arrays += [(k, "buffer", v) for k, v in model.buffers.items()]
    header = {
        "format": FORMAT_VERSION,
        "model": model.config.to_dict(),
        "routing_mode": model.config.routing.mode,
        "head": model.config.head,
        "features": features.to_dict(),
        "norm": norm.to_dict(),
        "labels": list(labels),
        "blocks": [{"name": k, "kind": kind, "shape": list(a.shape)} for k, kind, a in arrays],
        "extra": extra or {},
    }
    raw = json.dumps(header, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<Q", len(raw)))
        fh.write(raw)
        for _, _, a in arrays:
            fh.write(np.ascontiguousarray(a, dtype="<f8").tobytes())


def read_header(path) -> dict:
    with open(path, "rb") as fh:
        header, _ = _read_header(fh, path)
    return header


def _read_header(fh, path) -> tuple[dict, int]:
    if fh.read(len(MAGIC)) != MAGIC:
        raise DataError(f"{path}: not a checkpoint (bad magic)")
    size_raw = fh.read(8)
    if len(size_raw) != 8:
        raise DataError(f"{path}: truncated header")
    (size,) = struct.unpack("<Q", size_raw)
    try:
        header = json.loads(fh.read(size).decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise DataError(f"{path}: corrupt header ({exc})") from None
    return header, len(MAGIC) + 8 + size


def load_checkpoint(path) -> Checkpoint:
    path = Path(path)
    try:
        fh = open(path, "rb")
    except OSError as exc:
        raise DataError(f"cannot open checkpoint {path}: {exc}") from None
    with fh:
        header, _ = _read_header(fh, path)
        if header.get("format") != FORMAT_VERSION:
            raise DataError(f"{path}: unsupported checkpoint format {header.get('format')!r}")
        weights = {}
        for block in header["blocks"]:
            shape = tuple(block["shape"])
            n = int(np.prod(shape, dtype=np.int64))
            buf = fh.read(8 * n)
            if len(buf) != 8 * n:
                raise DataError(f"{path}: truncated block {block['name']}")
            weights[block["name"]] = np.frombuffer(buf, dtype="<f8").reshape(shape).astype(np.float64)
        if fh.read(1):
            raise DataError(f"{path}: trailing bytes after the last block")
    model = CapsNet(ModelConfig.from_dict(header["model"]))
    expected = set(model.params) | set(model.buffers)
    if expected != set(weights):
        raise DataError(f"{path}: block names do not match the stored model config")
    model.set_weights(weights)
    return Checkpoint(model, FeatureConfig.from_dict(header["features"]), NormStats.from_dict(header["norm"]),
                      list(header["labels"]), header.get("extra", {}))
