from __future__ import annotations

import dataclasses as dc
import struct
from pathlib import Path
from typing import Any, Dict, Optional

import numpy as np

from .core import PointCloud, RngStream
from .metrics import ModeSpec

IDX_IMAGES_MAGIC = 0x00000803
IDX_LABELS_MAGIC = 0x00000801

DATASET_KINDS = ("gaussian-mixture", "segments", "two-rings")


class IdxFormatError(ValueError):
    def __init__(self, message: str, offset: int) -> None:
        super().__init__(f"{message} (byte offset {offset})")
        self.offset = offset


@dc.dataclass(frozen=True)
class LabeledDataset:
    kind: str
    points: PointCloud
    labels: np.ndarray
    modes: Optional[ModeSpec]

    def __len__(self) -> int:
        return len(self.points)


def _gaussian_mixture(p: Dict[str, Any], gen: np.random.Generator) -> LabeledDataset:
    k = int(p.get("k", 3))
    per_mode = int(p.get("per_mode", 1000))
    sigma = float(p.get("sigma", 0.05))
    spread = float(p.get("spread", 1.0))
    if k < 1 or per_mode < 1 or sigma <= 0 or spread <= 0:
        raise ValueError("gaussian-mixture needs k >= 1, per_mode >= 1, sigma > 0, spread > 0")
    angles = 2.0 * np.pi * np.arange(k) / k
    centers = spread * np.column_stack([np.cos(angles), np.sin(angles)]) if k > 1 else np.zeros((1, 2))
    labels = np.repeat(np.arange(k), per_mode)
    pts = centers[labels] + gen.normal(0.0, sigma, size=(k * per_mode, 2))
    radius = float(p.get("mode_radius", 4.0 * sigma))
    return LabeledDataset("gaussian-mixture", PointCloud(pts), labels, ModeSpec(PointCloud(centers), radius))


def _segments(p: Dict[str, Any], gen: np.random.Generator) -> LabeledDataset:
    k = int(p.get("k", 3))
    per_mode = int(p.get("per_mode", 1000))
    length = float(p.get("length", 0.8))
    gap = float(p.get("gap", 0.3))
    sigma = float(p.get("sigma", 0.01))
    if k < 1 or per_mode < 1 or length <= 0 or sigma < 0:
        raise ValueError("segments needs k >= 1, per_mode >= 1, length > 0, sigma >= 0")
    if gap <= 6.0 * sigma:
        raise ValueError(f"segment gap {gap} must exceed 6 * sigma = {6.0 * sigma}")
    starts = np.arange(k) * (length + gap)
    labels = np.repeat(np.arange(k), per_mode)
    t = gen.random(k * per_mode) * length
    pts = np.column_stack([starts[labels] + t, np.zeros(k * per_mode)])
    if sigma > 0:
        pts = pts + gen.normal(0.0, sigma, size=pts.shape)
    centers = np.column_stack([starts + 0.5 * length, np.zeros(k)])
    radius = float(p.get("mode_radius", 0.5 * length + 3.0 * sigma))
    return LabeledDataset("segments", PointCloud(pts), labels, ModeSpec(PointCloud(centers), radius))


def _two_rings(p: Dict[str, Any], gen: np.random.Generator) -> LabeledDataset:
    # side-by-side rings; each mode ball covers its ring and the hole inside it
    per_mode = int(p.get("per_mode", 1000))
    ring_radius = float(p.get("ring_radius", 0.5))
    separation = float(p.get("separation", 1.5))
    sigma = float(p.get("sigma", 0.02))
    if per_mode < 1 or ring_radius <= 0 or sigma < 0:
        raise ValueError("two-rings needs per_mode >= 1, ring_radius > 0, sigma >= 0")
    if separation <= 2.0 * ring_radius + 6.0 * sigma:
        raise ValueError("rings overlap: separation must exceed 2 * ring_radius + 6 * sigma")
    centers = np.array([[-0.5 * separation, 0.0], [0.5 * separation, 0.0]])
    labels = np.repeat(np.arange(2), per_mode)
    theta = gen.random(2 * per_mode) * 2.0 * np.pi
    pts = centers[labels] + ring_radius * np.column_stack([np.cos(theta), np.sin(theta)])
    if sigma > 0:
        pts = pts + gen.normal(0.0, sigma, size=pts.shape)
    radius = float(p.get("mode_radius", ring_radius + 3.0 * sigma))
    return LabeledDataset("two-rings", PointCloud(pts), labels, ModeSpec(PointCloud(centers), radius))


_BUILDERS = {
    "gaussian-mixture": _gaussian_mixture,
    "segments": _segments,
    "two-rings": _two_rings,
}


def make_dataset(kind: str, params: Optional[Dict[str, Any]], rng: RngStream) -> LabeledDataset:
    try:
        builder = _BUILDERS[kind]
    except KeyError:
        raise ValueError(f"unknown dataset kind '{kind}' (expected one of {', '.join(DATASET_KINDS)})") from None
    return builder(dict(params or {}), rng.generator())


def _read_idx(path: Path):
    data = Path(path).read_bytes()
    if len(data) < 4:
        raise IdxFormatError("file too short for IDX magic", offset=len(data))
    (magic,) = struct.unpack(">I", data[:4])
    if magic == IDX_IMAGES_MAGIC:
        ndim = 3
    elif magic == IDX_LABELS_MAGIC:
        ndim = 1
    else:
        raise IdxFormatError(f"unsupported IDX magic 0x{magic:08x}", offset=0)
    header_end = 4 + 4 * ndim
    if len(data) < header_end:
        raise IdxFormatError("truncated IDX header", offset=len(data))
    dims = struct.unpack(">" + "I" * ndim, data[4:header_end])
    size = int(np.prod(dims, dtype=np.int64))
    if len(data) < header_end + size:
        raise IdxFormatError(f"truncated IDX payload: expected {size} bytes", offset=len(data))
    payload = np.frombuffer(data, dtype=np.uint8, count=size, offset=header_end)
    return magic, dims, payload


def load_idx(path: Path) -> PointCloud:
    """IDX images -> flattened pixels in [0,1]; IDX labels -> one column of raw labels."""
    magic, dims, payload = _read_idx(path)
    if magic == IDX_IMAGES_MAGIC:
        count, rows, cols = dims
        return PointCloud(payload.reshape(count, rows * cols).astype(np.float64) / 255.0, dim=rows * cols)
    return PointCloud(payload.reshape(-1, 1).astype(np.float64), dim=1)


def load_idx_labels(path: Path) -> np.ndarray:
    magic, _, payload = _read_idx(path)
    if magic != IDX_LABELS_MAGIC:
        raise IdxFormatError("not an IDX label file", offset=0)
    return payload.astype(np.int64)
