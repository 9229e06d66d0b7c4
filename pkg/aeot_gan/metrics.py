from __future__ import annotations

import dataclasses as dc
from typing import Any, Dict, List

import numpy as np
from scipy.optimize import linear_sum_assignment
from scipy.spatial import cKDTree
from scipy.spatial.distance import cdist
from scipy.stats import chisquare

from .core import DimensionMismatchError, PointCloud
from .sdot import DualPotential, SdotProblem, assign_cells

EXACT_W2_MAX = 512
SIGNIFICANCE = 0.01


@dc.dataclass(frozen=True)
class ModeSpec:
    centers: PointCloud
    radius: float

    def __post_init__(self) -> None:
        if self.radius <= 0:
            raise ValueError("mode radius must be > 0")
        if len(self.centers) == 0:
            raise ValueError("at least one mode center is required")
        if len(self.centers) > 1:
            d, _ = cKDTree(self.centers.points).query(self.centers.points, k=2)
            if np.any(d[:, 1] == 0):
                raise ValueError("mode centers must be distinct")

    def to_json(self) -> Dict[str, Any]:
        return {"centers": self.centers.points.tolist(), "radius": float(self.radius)}

    @staticmethod
    def from_json(d: Dict[str, Any]) -> "ModeSpec":
        return ModeSpec(centers=PointCloud(np.asarray(d["centers"], dtype=np.float64)), radius=float(d["radius"]))


@dc.dataclass(frozen=True)
class CoverageReport:
    counts: List[int]
    gap: int
    total: int

    @property
    def shares(self) -> List[float]:
        return [c / self.total for c in self.counts] if self.total else [0.0] * len(self.counts)

    @property
    def gap_fraction(self) -> float:
        return self.gap / self.total if self.total else 0.0

    def to_json(self) -> Dict[str, Any]:
        return {
            "counts": list(self.counts),
            "gap": self.gap,
            "total": self.total,
            "shares": self.shares,
            "gap_fraction": self.gap_fraction,
        }


@dc.dataclass(frozen=True)
class GapReport:
    max: float
    mean: float
    rms: float  # sqrt(mean squared gap): W2 upper bound via the projection plan


@dc.dataclass(frozen=True)
class UniformityResult:
    statistic: float
    p_value: float

    @property
    def rejects(self) -> bool:
        return self.p_value < SIGNIFICANCE


def exact_w2(a: PointCloud, b: PointCloud, max_size: int = EXACT_W2_MAX) -> float:
    """Exact 2-Wasserstein distance between equal-size uniform clouds."""
    if len(a) != len(b):
        raise ValueError(f"clouds differ in size: {len(a)} vs {len(b)}")
    if a.dim != b.dim:
        raise DimensionMismatchError(f"clouds differ in dimension: {a.dim} vs {b.dim}")
    if len(a) > max_size:
        raise ValueError(f"exact W2 limited to {max_size} points per cloud (got {len(a)})")
    if len(a) == 0:
        return 0.0
    cost = cdist(a.points, b.points, metric="sqeuclidean")
    rows, cols = linear_sum_assignment(cost)
    return float(np.sqrt(max(cost[rows, cols].mean(), 0.0)))


def _nearest(samples: PointCloud, codes: PointCloud):
    if len(samples) == 0 or len(codes) == 0:
        raise ValueError("samples and codes must be non-empty")
    if samples.dim != codes.dim:
        raise DimensionMismatchError(f"samples have dim {samples.dim}, codes have dim {codes.dim}")
    return cKDTree(codes.points).query(samples.points, k=1)


def nearest_code_gap(samples: PointCloud, codes: PointCloud) -> GapReport:
    dist, _ = _nearest(samples, codes)
    return GapReport(max=float(dist.max()), mean=float(dist.mean()), rms=float(np.sqrt(np.mean(dist**2))))


def nearest_code_projection(samples: PointCloud, codes: PointCloud) -> PointCloud:
    _, idx = _nearest(samples, codes)
    return codes.subset(idx)


def coverage(samples: PointCloud, modes: ModeSpec) -> CoverageReport:
    if len(samples) == 0:
        raise ValueError("coverage needs at least one sample")
    if samples.dim != modes.centers.dim:
        raise DimensionMismatchError(f"samples have dim {samples.dim}, modes have dim {modes.centers.dim}")
    dist, idx = cKDTree(modes.centers.points).query(samples.points, k=1)
    inside = dist <= modes.radius
    counts = np.bincount(idx[inside], minlength=len(modes.centers))
    return CoverageReport(counts=[int(c) for c in counts], gap=int((~inside).sum()), total=len(samples))


def cell_uniformity(samples: PointCloud, problem: SdotProblem, h: DualPotential | np.ndarray) -> UniformityResult:
    """Chi-square of power-cell hit counts against equal masses 1/n."""
    if problem.n == 1:
        return UniformityResult(statistic=0.0, p_value=1.0)
    hits = np.bincount(assign_cells(samples.points, problem, h), minlength=problem.n)
    stat, p = chisquare(hits)
    return UniformityResult(statistic=float(stat), p_value=float(p))
