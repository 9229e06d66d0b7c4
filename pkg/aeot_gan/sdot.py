"""Semi-discrete optimal transport from Uni([0,1]^d) to weighted point targets.

The map is encoded by a dual potential h: a source point w belongs to the
power cell of argmin_i ( |w - z_i|^2 / 2 - h_i ). h is found by stochastic
ascent of the concave dual F(h) = sum_i nu_i h_i + E_w[min_i(...)], whose
gradient is nu_i - mu(W_i).
"""
from __future__ import annotations

import dataclasses as dc
import logging
from typing import Any, Dict, List, Optional, Sequence, Tuple

import numpy as np
from scipy.spatial import cKDTree

from .core import (
    DEFAULT_CHUNK,
    DimensionMismatchError,
    PointCloud,
    RngStream,
    as_point,
    map_chunks,
    pairwise_squared_distances,
)
from .neuralnet import AdamState, adam_update

# targets up to this count are assigned by a dense score matrix
BRUTE_FORCE_MAX = 64
# default Adam step on h for targets inside the unit cube
ADAM_STEP = 1e-3
# relative score gap under which the tree candidates are rechecked against every target
TIE_TOL = 1e-12
_DENSE_ENTRIES = 1 << 22


@dc.dataclass(frozen=True)
class SdotProblem:
    targets: PointCloud
    weights: Optional[np.ndarray] = None

    def __post_init__(self) -> None:
        n = len(self.targets)
        if n == 0:
            raise ValueError("SDOT needs at least one target")
        if self.weights is None:
            w = np.full(n, 1.0 / n)
        else:
            w = np.asarray(self.weights, dtype=np.float64).reshape(-1)
            if w.shape[0] != n:
                raise DimensionMismatchError(f"{w.shape[0]} weights for {n} targets")
            if np.any(w <= 0):
                raise ValueError("target weights must be positive")
            if abs(w.sum() - 1.0) > 1e-9:
                raise ValueError(f"target weights must sum to 1 (got {w.sum():.12f})")
        w.setflags(write=False)
        object.__setattr__(self, "weights", w)

    @property
    def n(self) -> int:
        return len(self.targets)

    @property
    def dim(self) -> int:
        return self.targets.dim


@dc.dataclass(frozen=True)
class DualPotential:
    """Power-diagram weights, gauge-fixed to mean zero on construction."""

    h: np.ndarray

    def __post_init__(self) -> None:
        h = np.asarray(self.h, dtype=np.float64).reshape(-1)
        if not np.all(np.isfinite(h)):
            raise ValueError("dual potential must be finite")
        h = h - h.mean()
        h.setflags(write=False)
        object.__setattr__(self, "h", h)

    @staticmethod
    def zeros(n: int) -> "DualPotential":
        return DualPotential(np.zeros(n))

    def __len__(self) -> int:
        return int(self.h.shape[0])


@dc.dataclass(frozen=True)
class CellStats:
    """Monte Carlo cell masses and mass centers. Barycenters of cells that
    received no samples are NaN and `defined` is False for them."""

    measures: np.ndarray
    barycenters: np.ndarray
    sample_count: int
    counts: np.ndarray

    @property
    def defined(self) -> np.ndarray:
        return self.counts > 0

    @property
    def all_defined(self) -> bool:
        return bool(np.all(self.defined))

    def barycenter_cloud(self) -> PointCloud:
        if not self.all_defined:
            missing = np.flatnonzero(~self.defined)
            raise ValueError(f"cells without samples have no barycenter: {missing[:10].tolist()}")
        return PointCloud(self.barycenters)

    def max_deviation(self, weights: np.ndarray) -> float:
        return float(np.max(np.abs(self.measures - weights)))

    @property
    def empty_count(self) -> int:
        return int(np.sum(~self.defined))


@dc.dataclass(frozen=True)
class CubeScaling:
    """Isotropic affine map placing a point set inside [margin, 1 - margin]^d.

    A positive scaling plus translation of the targets leaves the optimal
    power cells unchanged, so the solve can run on the scaled codes while the
    extended map keeps emitting the original ones.
    """

    center: np.ndarray
    scale: float

    @staticmethod
    def fit(points: PointCloud, margin: float = 0.05) -> "CubeScaling":
        if not 0.0 <= margin < 0.5:
            raise ValueError("margin must be in [0, 0.5)")
        if len(points) == 0:
            raise ValueError("cannot fit a scaling to an empty point set")
        lo, hi = points.points.min(axis=0), points.points.max(axis=0)
        spread = float(np.max(hi - lo))
        return CubeScaling(center=0.5 * (lo + hi), scale=(1.0 - 2.0 * margin) / spread if spread > 0 else 1.0)

    @staticmethod
    def identity(dim: int) -> "CubeScaling":
        return CubeScaling(center=np.full(dim, 0.5), scale=1.0)

    def apply(self, points: PointCloud) -> PointCloud:
        if points.dim != self.center.shape[0]:
            raise DimensionMismatchError(f"points have dim {points.dim}, scaling has dim {self.center.shape[0]}")
        return PointCloud(0.5 + (points.points - self.center) * self.scale, dim=points.dim)

    def to_json(self) -> Dict[str, Any]:
        return {"center": [float(v) for v in self.center], "scale": float(self.scale)}

    @staticmethod
    def from_json(d: Dict[str, Any]) -> "CubeScaling":
        return CubeScaling(center=np.asarray(d["center"], dtype=np.float64), scale=float(d["scale"]))


@dc.dataclass
class SolverConfig:
    mc_samples: int = 100_000
    step_size: Optional[float] = None  # adam: ADAM_STEP, sgd: 0.25
    max_iterations: int = 2000
    tolerance: Optional[float] = None  # 0.2 / n
    optimizer: str = "adam"
    verify_samples: int = 1_000_000
    patience: int = 25
    decay: float = 0.5
    min_step_fraction: float = 1e-4
    chunk_size: int = DEFAULT_CHUNK
    workers: int = 1
    log_every: int = 100

    def resolved_tolerance(self, n: int) -> float:
        return float(self.tolerance) if self.tolerance is not None else 0.2 / n

    def resolved_step(self, n: int) -> float:
        if self.step_size is not None:
            return float(self.step_size)
        return ADAM_STEP if self.optimizer == "adam" else 0.25

    def resolved_verify_samples(self, n: int) -> int:
        # large enough that MC noise of the worst cell stays well under tolerance
        return max(int(self.verify_samples), 1500 * n)

    def validate(self, n: int) -> None:
        if self.mc_samples < 10 * n:
            raise ValueError(f"mc_samples ({self.mc_samples}) must be >= 10 * n ({10 * n})")
        if self.resolved_tolerance(n) <= 0:
            raise ValueError("tolerance must be > 0")
        if self.max_iterations < 1:
            raise ValueError("max_iterations must be >= 1")
        if self.patience < 1:
            raise ValueError("patience must be >= 1")
        if self.optimizer not in ("adam", "sgd"):
            raise ValueError(f"unknown optimizer '{self.optimizer}'")


@dc.dataclass(frozen=True)
class IterationRecord:
    iteration: int
    objective: float
    max_deviation: float
    step_size: float


@dc.dataclass
class SolveResult:
    potential: DualPotential
    stats: CellStats
    converged: bool
    iterations: int
    history: List[IterationRecord]

    def __iter__(self):
        yield self.potential
        yield self.stats


def _as_h(h: DualPotential | Sequence[float] | np.ndarray, n: int) -> np.ndarray:
    arr = h.h if isinstance(h, DualPotential) else np.asarray(h, dtype=np.float64).reshape(-1)
    if arr.shape[0] != n:
        raise DimensionMismatchError(f"potential has {arr.shape[0]} entries, problem has {n} targets")
    return arr


def _scores(w: np.ndarray, z: np.ndarray, h: np.ndarray) -> np.ndarray:
    return 0.5 * pairwise_squared_distances(w, z) - h[None, :]


def assign_cell(w: Sequence[float] | np.ndarray, problem: SdotProblem, h: DualPotential | np.ndarray) -> int:
    """Index of the power cell containing w; ties go to the lowest index."""
    hv = _as_h(h, problem.n)
    p = as_point(w, problem.dim)
    return int(np.argmin(_scores(p[None, :], problem.targets.points, hv)[0]))


def _lifted_tree(z: np.ndarray, h: np.ndarray) -> cKDTree:
    # |w - z|^2 - 2h  ==  |(w, 0) - (z, sqrt(H - 2h))|^2 - H
    lift = np.sqrt(np.maximum(2.0 * h.max() - 2.0 * h, 0.0))
    return cKDTree(np.column_stack([z, lift]))


def assign_cells(
    samples: np.ndarray,
    problem: SdotProblem,
    h: DualPotential | np.ndarray,
    tree: Optional[cKDTree] = None,
) -> np.ndarray:
    hv = _as_h(h, problem.n)
    w = np.atleast_2d(np.asarray(samples, dtype=np.float64))
    if w.shape[1] != problem.dim:
        raise DimensionMismatchError(f"samples have dim {w.shape[1]}, targets have dim {problem.dim}")
    z = problem.targets.points
    n = problem.n
    if w.shape[0] == 0:
        return np.zeros(0, dtype=np.int64)
    if n == 1:
        return np.zeros(w.shape[0], dtype=np.int64)
    if n <= BRUTE_FORCE_MAX and tree is None:
        rows = max(1, _DENSE_ENTRIES // n)
        out = np.empty(w.shape[0], dtype=np.int64)
        for s in range(0, w.shape[0], rows):
            out[s : s + rows] = np.argmin(_scores(w[s : s + rows], z, hv), axis=1)
        return out
    tree = tree if tree is not None else _lifted_tree(z, hv)
    lifted = np.column_stack([w, np.zeros(w.shape[0])])
    k = min(n, problem.dim + 2)
    _, cand = tree.query(lifted, k=k)
    cand = np.asarray(cand, dtype=np.int64).reshape(w.shape[0], k)
    # exact scores over the candidates; ties go to the lowest index
    diff = w[:, None, :] - z[cand]
    scores = 0.5 * np.einsum("mkd,mkd->mk", diff, diff) - hv[cand]
    best = scores.min(axis=1)
    out = np.where(scores == best[:, None], cand, n).min(axis=1)
    # every candidate near the minimum: further tied sites may lie outside the candidate set
    crowded = scores.max(axis=1) <= best + TIE_TOL * (1.0 + np.abs(best))
    if np.any(crowded):
        rows = np.flatnonzero(crowded)
        out[rows] = np.argmin(_scores(w[rows], z, hv), axis=1)
    return out.astype(np.int64)


def _min_scores(w: np.ndarray, problem: SdotProblem, hv: np.ndarray, idx: np.ndarray) -> np.ndarray:
    diff = w - problem.targets.points[idx]
    return 0.5 * np.einsum("ij,ij->i", diff, diff) - hv[idx]


def dual_objective(problem: SdotProblem, h: DualPotential | np.ndarray, samples: np.ndarray) -> float:
    hv = _as_h(h, problem.n)
    w = np.atleast_2d(np.asarray(samples, dtype=np.float64))
    if w.shape[0] == 0:
        raise ValueError("dual objective needs at least one sample")
    idx = assign_cells(w, problem, hv)
    return float(np.dot(problem.weights, hv) + _min_scores(w, problem, hv, idx).mean())


def dual_gradient(problem: SdotProblem, h: DualPotential | np.ndarray, samples: np.ndarray) -> np.ndarray:
    hv = _as_h(h, problem.n)
    w = np.atleast_2d(np.asarray(samples, dtype=np.float64))
    if w.shape[0] == 0:
        raise ValueError("dual gradient needs at least one sample")
    idx = assign_cells(w, problem, hv)
    mu = np.bincount(idx, minlength=problem.n) / w.shape[0]
    g = problem.weights - mu
    # both terms sum to 1; remove the rounding residue so sum(g) == 0
    g[np.argmax(np.abs(g))] -= g.sum()
    return g


def _chunk_stats(problem: SdotProblem, hv: np.ndarray, tree: Optional[cKDTree]):
    def run(stream: RngStream, m: int) -> Tuple[np.ndarray, np.ndarray, float]:
        w = stream.generator().random((m, problem.dim))
        idx = assign_cells(w, problem, hv, tree=tree)
        counts = np.bincount(idx, minlength=problem.n)
        sums = np.stack([np.bincount(idx, weights=w[:, k], minlength=problem.n) for k in range(problem.dim)], axis=1)
        return counts, sums, float(_min_scores(w, problem, hv, idx).sum())

    return run


def _gather(problem: SdotProblem, hv: np.ndarray, sample_count: int, rng: RngStream, chunk_size: int, workers: int):
    tree = _lifted_tree(problem.targets.points, hv) if problem.n > BRUTE_FORCE_MAX else None
    parts = map_chunks(_chunk_stats(problem, hv, tree), rng, sample_count, chunk_size, workers)
    counts = np.zeros(problem.n, dtype=np.int64)
    sums = np.zeros((problem.n, problem.dim))
    score_sum = 0.0
    for c, s, v in parts:
        counts += c
        sums += s
        score_sum += v
    return counts, sums, score_sum


def estimate_cell_stats(
    problem: SdotProblem,
    h: DualPotential | np.ndarray,
    sample_count: int,
    rng: RngStream,
    chunk_size: int = DEFAULT_CHUNK,
    workers: int = 1,
) -> CellStats:
    hv = _as_h(h, problem.n)
    if sample_count < problem.n:
        raise ValueError(f"sample_count ({sample_count}) must be >= n ({problem.n})")
    counts, sums, _ = _gather(problem, hv, sample_count, rng, chunk_size, workers)
    with np.errstate(invalid="ignore", divide="ignore"):
        bary = sums / counts[:, None]
    bary[counts == 0] = np.nan
    return CellStats(measures=counts / float(sample_count), barycenters=bary, sample_count=int(sample_count), counts=counts)


def solve(problem: SdotProblem, config: SolverConfig, rng: RngStream) -> SolveResult:
    n = problem.n
    config.validate(n)
    tol = config.resolved_tolerance(n)
    lr = config.resolved_step(n)
    lr_floor = lr * config.min_step_fraction
    verify_samples = config.resolved_verify_samples(n)
    # gradient noise of the fullest cell; iteration estimates within this band may verify
    noise = 4.0 * float(np.sqrt(problem.weights.max() / config.mc_samples))
    iter_rng, verify_rng = rng.spawn(0), rng.spawn(1)

    h = np.zeros(n)
    # iterate smoothed over roughly the last `patience` steps; this is what gets verified
    h_avg, averaged = h.copy(), 0
    last_verify = -config.patience
    adam = AdamState.for_params([h], lr=lr)
    best_h, best_dev = h.copy(), np.inf
    best_verified: Optional[Tuple[float, np.ndarray, CellStats]] = None
    history: List[IterationRecord] = []
    stall = 0
    logging.info("SDOT solve: n=%d dim=%d tol=%.3g step=%.3g mc=%d", n, problem.dim, tol, lr, config.mc_samples)

    for it in range(config.max_iterations):
        counts, _, score_sum = _gather(problem, h, config.mc_samples, iter_rng.spawn(it), config.chunk_size, config.workers)
        g = problem.weights - counts / float(config.mc_samples)
        dev = float(np.max(np.abs(g)))
        objective = float(np.dot(problem.weights, h) + score_sum / config.mc_samples)
        history.append(IterationRecord(iteration=it, objective=objective, max_deviation=dev, step_size=lr))
        if config.log_every and it % config.log_every == 0:
            logging.info("SDOT iter %d: max|mu-nu|=%.3g F=%.6g step=%.3g", it, dev, objective, lr)

        averaged = min(averaged + 1, config.patience)
        h_avg += (h - h_avg) / averaged
        if dev <= tol + noise and it - last_verify >= config.patience:
            last_verify = it
            stats = estimate_cell_stats(problem, h_avg, verify_samples, verify_rng.spawn(it), config.chunk_size, config.workers)
            vdev = stats.max_deviation(problem.weights)
            if best_verified is None or vdev < best_verified[0]:
                best_verified = (vdev, h_avg.copy(), stats)
            if vdev <= tol:
                logging.info("SDOT converged at iter %d: verified max|mu-nu|=%.3g", it, vdev)
                return SolveResult(DualPotential(h_avg), stats, True, it + 1, history)

        if dev < best_dev:
            best_dev, best_h, stall = dev, h.copy(), 0
        else:
            stall += 1
            if stall >= config.patience and lr > lr_floor:
                lr = max(lr * config.decay, lr_floor)
                adam = dc.replace(adam, lr=lr)
                stall = 0
                averaged = 0

        if config.optimizer == "adam":
            # ascent on F == descent on -F
            (h,), adam = adam_update([h], [-g], adam)
        else:
            h = h + lr * g
        h = h - h.mean()

    if best_verified is not None:
        _, h_out, stats = best_verified
    else:
        h_out = best_h
        stats = estimate_cell_stats(problem, h_out, verify_samples, verify_rng.spawn(config.max_iterations), config.chunk_size, config.workers)
    logging.warning(
        "SDOT did not converge in %d iterations: max|mu-nu|=%.3g > tol=%.3g",
        config.max_iterations,
        stats.max_deviation(problem.weights),
        tol,
    )
    return SolveResult(DualPotential(h_out), stats, False, config.max_iterations, history)


def to_checkpoint(
    problem: SdotProblem,
    result: SolveResult,
    epsilon: Optional[float] = None,
    seed: Optional[int] = None,
    scaling: Optional[CubeScaling] = None,
) -> Dict[str, Any]:
    bary = [[None if np.isnan(v) else float(v) for v in row] for row in result.stats.barycenters]
    return {
        "dim": problem.dim,
        "n": problem.n,
        "epsilon": epsilon,
        "h": [float(v) for v in result.potential.h],
        "measures": [float(v) for v in result.stats.measures],
        "counts": [int(v) for v in result.stats.counts],
        "barycenters": bary,
        "sample_count": result.stats.sample_count,
        "converged": bool(result.converged),
        "iterations": int(result.iterations),
        "seed": seed,
        "scaling": scaling.to_json() if scaling is not None else None,
    }


def from_checkpoint(d: Dict[str, Any]) -> Tuple[DualPotential, CellStats, bool]:
    n, dim = int(d["n"]), int(d["dim"])
    bary = np.array([[np.nan if v is None else v for v in row] for row in d["barycenters"]], dtype=np.float64).reshape(n, dim)
    measures = np.asarray(d["measures"], dtype=np.float64)
    counts = np.asarray(d.get("counts") or np.round(measures * d["sample_count"]), dtype=np.int64)
    stats = CellStats(measures=measures, barycenters=bary, sample_count=int(d["sample_count"]), counts=counts)
    return DualPotential(np.asarray(d["h"], dtype=np.float64)), stats, bool(d["converged"])
