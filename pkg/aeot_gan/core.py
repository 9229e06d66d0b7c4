from __future__ import annotations

import csv
import dataclasses as dc
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path
from typing import Callable, List, Optional, Sequence, Tuple, TypeVar

import numpy as np

T = TypeVar("T")

MASK64 = (1 << 64) - 1
DEFAULT_CHUNK = 65536


class DimensionMismatchError(ValueError):
    pass


def as_point(coords: Sequence[float] | np.ndarray, dim: Optional[int] = None) -> np.ndarray:
    p = np.asarray(coords, dtype=np.float64).reshape(-1)
    if dim is not None and p.shape[0] != dim:
        raise DimensionMismatchError(f"point has length {p.shape[0]}, expected {dim}")
    if not np.all(np.isfinite(p)):
        raise ValueError("point has non-finite coordinates")
    return p


@dc.dataclass(frozen=True)
class PointCloud:
    """Immutable (count, dim) float64 array of points."""

    points: np.ndarray
    dim: int = 0

    def __post_init__(self) -> None:
        pts = np.array(self.points, dtype=np.float64, copy=True)
        if pts.ndim == 1:
            if self.dim > 0:
                pts = pts.reshape(-1, self.dim)
            else:
                pts = pts.reshape(-1, 1)
        if pts.ndim != 2:
            raise DimensionMismatchError(f"point cloud must be 2-D, got shape {pts.shape}")
        dim = self.dim or pts.shape[1]
        if dim <= 0:
            raise ValueError("point cloud dimension must be positive")
        if pts.shape[1] != dim:
            raise DimensionMismatchError(f"points have length {pts.shape[1]}, expected {dim}")
        if not np.all(np.isfinite(pts)):
            raise ValueError("point cloud has non-finite coordinates")
        pts.setflags(write=False)
        object.__setattr__(self, "points", pts)
        object.__setattr__(self, "dim", int(dim))

    @staticmethod
    def empty(dim: int) -> "PointCloud":
        return PointCloud(np.zeros((0, dim)), dim=dim)

    def __len__(self) -> int:
        return int(self.points.shape[0])

    def __getitem__(self, i: int) -> np.ndarray:
        return self.points[i]

    def subset(self, indices: Sequence[int] | np.ndarray) -> "PointCloud":
        return PointCloud(self.points[np.asarray(indices, dtype=np.int64)], dim=self.dim)

    def to_csv(self, path: Path) -> None:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        with path.open("w", encoding="utf-8", newline="") as f:
            w = csv.writer(f, lineterminator="\n")
            w.writerow([f"x{k}" for k in range(self.dim)])
            for row in self.points:
                w.writerow([repr(float(v)) for v in row])

    @staticmethod
    def from_csv(path: Path) -> "PointCloud":
        with Path(path).open("r", encoding="utf-8", newline="") as f:
            rows = list(csv.reader(f))
        if not rows:
            raise ValueError(f"empty CSV file: {path}")
        header = rows[0]
        expected = [f"x{k}" for k in range(len(header))]
        if header != expected:
            raise ValueError(f"unexpected CSV header in {path}: {header}")
        data = np.array([[float(v) for v in r] for r in rows[1:] if r], dtype=np.float64)
        if data.size == 0:
            return PointCloud.empty(len(header))
        return PointCloud(data, dim=len(header))


@dc.dataclass(frozen=True)
class RngStream:
    """Value-like handle on a counter-based (Philox) random stream.

    The stream is identified by (seed, stream, parent path); `generator()`
    always restarts from the beginning of that stream.
    """

    seed: int
    stream: int = 0
    parent: Tuple[int, ...] = ()

    def key(self) -> Tuple[int, ...]:
        return self.parent + (self.stream,)

    def generator(self) -> np.random.Generator:
        ss = np.random.SeedSequence(entropy=self.seed & MASK64, spawn_key=self.key())
        return np.random.Generator(np.random.Philox(ss))

    def spawn(self, stream: int) -> "RngStream":
        return RngStream(seed=self.seed, stream=int(stream), parent=self.key())


def uniform_cube_sample(rng: RngStream | np.random.Generator, d: int, count: Optional[int] = None) -> np.ndarray:
    """Uniform draw(s) from [0,1)^d; a single point when `count` is None."""
    if d < 1:
        raise ValueError("dimension must be >= 1")
    gen = rng.generator() if isinstance(rng, RngStream) else rng
    if count is None:
        return gen.random(d)
    return gen.random((int(count), d))


def squared_distance(a: Sequence[float] | np.ndarray, b: Sequence[float] | np.ndarray) -> float:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise DimensionMismatchError(f"cannot compare points of shapes {a.shape} and {b.shape}")
    diff = a - b
    return float(np.dot(diff, diff))


def pairwise_squared_distances(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    a = np.atleast_2d(np.asarray(a, dtype=np.float64))
    b = np.atleast_2d(np.asarray(b, dtype=np.float64))
    if a.shape[1] != b.shape[1]:
        raise DimensionMismatchError(f"dimension mismatch: {a.shape[1]} vs {b.shape[1]}")
    # expanded form is faster but loses exactness at ties; direct differences keep it
    diff = a[:, None, :] - b[None, :, :]
    return np.einsum("ijk,ijk->ij", diff, diff)


def chunk_sizes(total: int, chunk_size: int = DEFAULT_CHUNK) -> List[int]:
    if total <= 0:
        return []
    chunk_size = max(1, int(chunk_size))
    full, rest = divmod(int(total), chunk_size)
    return [chunk_size] * full + ([rest] if rest else [])


def map_chunks(
    fn: Callable[[RngStream, int], T],
    rng: RngStream,
    total: int,
    chunk_size: int = DEFAULT_CHUNK,
    workers: int = 1,
) -> List[T]:
    """Run `fn(stream_k, size_k)` over fixed chunks; results keep chunk order."""
    sizes = chunk_sizes(total, chunk_size)
    streams = [rng.spawn(k) for k in range(len(sizes))]
    if workers <= 1 or len(sizes) <= 1:
        return [fn(s, m) for s, m in zip(streams, sizes)]
    with ThreadPoolExecutor(max_workers=workers, thread_name_prefix="mc_worker") as ex:
        return list(ex.map(fn, streams, sizes))
