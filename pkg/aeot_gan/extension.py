"""Rips complex over latent codes and the piecewise-linear extended OT map.

Only the 1-skeleton is stored; a vertex set is a simplex iff every pair is
an edge (flag complex).
"""
from __future__ import annotations

import dataclasses as dc
import enum
import logging
from typing import Any, Dict, FrozenSet, Iterable, List, Optional, Sequence, Tuple

import numpy as np
from scipy.sparse import coo_matrix
from scipy.sparse.csgraph import connected_components, minimum_spanning_tree
from scipy.spatial import cKDTree
from scipy.spatial.distance import pdist, squareform

from .core import DEFAULT_CHUNK, DimensionMismatchError, PointCloud, RngStream, as_point, map_chunks
from .sdot import CellStats, CubeScaling, DualPotential, SdotProblem, assign_cells

AFFINE_RTOL = 1e-10
HULL_ATOL = 1e-9
LAMBDA_ATOL = 1e-12
_TINY = 1e-300


def _components(n: int, pairs: np.ndarray) -> np.ndarray:
    if pairs.shape[0] == 0:
        return np.arange(n, dtype=np.int64)
    graph = coo_matrix((np.ones(pairs.shape[0]), (pairs[:, 0], pairs[:, 1])), shape=(n, n))
    _, labels = connected_components(graph, directed=False)
    return labels.astype(np.int64)


@dc.dataclass(frozen=True)
class RipsComplex:
    epsilon: float
    codes: PointCloud
    edges: FrozenSet[Tuple[int, int]]
    labels: np.ndarray  # connected component label per code
    edge_keys: np.ndarray  # sorted i * n + j for i < j

    @property
    def n(self) -> int:
        return len(self.codes)

    @property
    def components(self) -> List[List[int]]:
        groups: Dict[int, List[int]] = {}
        for i, lab in enumerate(self.labels.tolist()):
            groups.setdefault(lab, []).append(i)
        return [groups[k] for k in sorted(groups)]

    @property
    def component_count(self) -> int:
        return int(np.unique(self.labels).shape[0])

    def has_edge(self, i: int, j: int) -> bool:
        if i == j:
            return True
        return (min(i, j), max(i, j)) in self.edges

    def pairs_are_edges(self, a: np.ndarray, b: np.ndarray) -> np.ndarray:
        """Vectorized edge lookup for index arrays a, b (equal indices count as edges)."""
        lo, hi = np.minimum(a, b), np.maximum(a, b)
        keys = lo.astype(np.int64) * self.n + hi
        if self.edge_keys.shape[0] == 0:
            return lo == hi
        pos = np.minimum(np.searchsorted(self.edge_keys, keys), self.edge_keys.shape[0] - 1)
        return (self.edge_keys[pos] == keys) | (lo == hi)

    def summary(self) -> Dict[str, Any]:
        sizes = sorted((len(c) for c in self.components), reverse=True)
        return {
            "epsilon": float(self.epsilon),
            "n": self.n,
            "edge_count": len(self.edges),
            "component_count": self.component_count,
            "component_sizes": sizes,
        }


def build_rips(codes: PointCloud, epsilon: float) -> RipsComplex:
    if epsilon <= 0:
        raise ValueError("epsilon must be > 0")
    if len(codes) == 0:
        raise ValueError("Rips complex needs at least one code")
    n = len(codes)
    pairs = cKDTree(codes.points).query_pairs(r=float(epsilon), output_type="ndarray")
    pairs = np.sort(pairs.reshape(-1, 2), axis=1).astype(np.int64)
    keys = np.unique(pairs[:, 0] * n + pairs[:, 1])
    edges = frozenset((int(k // n), int(k % n)) for k in keys)
    labels = _components(n, pairs)
    rips = RipsComplex(epsilon=float(epsilon), codes=codes, edges=edges, labels=labels, edge_keys=keys)
    logging.info("Rips complex: eps=%.4g n=%d edges=%d components=%d", epsilon, n, len(edges), rips.component_count)
    return rips


def is_simplex(rips: RipsComplex, indices: Iterable[int]) -> bool:
    idx = sorted(set(int(i) for i in indices))
    if not idx:
        raise ValueError("a simplex needs at least one vertex")
    if idx[0] < 0 or idx[-1] >= rips.n:
        raise IndexError(f"vertex index out of range [0, {rips.n})")
    return all(rips.has_edge(a, b) for k, a in enumerate(idx) for b in idx[k + 1 :])


def choose_epsilon(codes: PointCloud, expected_modes: int) -> float:
    """Smallest eps whose Rips graph has `expected_modes` components.

    Components of the eps-graph equal those of the minimum spanning tree
    restricted to edges <= eps, so the bisection runs over MST edge lengths.
    """
    if expected_modes < 1:
        raise ValueError("expected_modes must be >= 1")
    n = len(codes)
    if n <= 1:
        return 1.0
    if expected_modes >= n:
        # every code its own component: stay below the closest pair
        d, _ = cKDTree(codes.points).query(codes.points, k=2)
        return float(max(d[:, 1].min() * 0.5, 1e-12))
    dist = squareform(pdist(codes.points))
    # csgraph reads zeros as missing edges; keep duplicate codes connected
    dist[dist == 0.0] = _TINY
    np.fill_diagonal(dist, 0.0)
    mst = minimum_spanning_tree(dist).tocoo()
    lengths = np.where(mst.data <= _TINY, 0.0, mst.data)
    weights = np.sort(lengths)
    pairs = np.column_stack([mst.row, mst.col]).astype(np.int64)

    def count(eps: float) -> int:
        return int(np.unique(_components(n, pairs[lengths <= eps])).shape[0])

    lo, hi = 0, weights.shape[0] - 1
    # component count is non-increasing in eps
    while lo < hi:
        mid = (lo + hi) // 2
        if count(weights[mid]) <= expected_modes:
            hi = mid
        else:
            lo = mid + 1
    eps = float(weights[lo])
    if count(eps) != expected_modes:
        logging.warning("no eps yields exactly %d components (got %d at eps=%.4g)", expected_modes, count(eps), eps)
    # pdist and the KD-tree round differently; keep the deciding edge inside the ball
    return max(eps * (1.0 + 1e-9), 1e-12)


class BarycentricStatus(enum.IntEnum):
    OK = 0
    OUTSIDE = 1
    DEGENERATE = 2


@dc.dataclass(frozen=True)
class BarycentricResult:
    status: BarycentricStatus
    coefficients: Optional[np.ndarray]

    @property
    def ok(self) -> bool:
        return self.status == BarycentricStatus.OK


def _barycentric_batch(ws: np.ndarray, cents: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    """Solve w = sum_j lam_j c_j, sum lam = 1 for stacks ws (m,d), cents (m,k,d)."""
    m, k, d = cents.shape
    status = np.full(m, BarycentricStatus.OK, dtype=np.int64)
    if k > 1:
        edges = cents[:, 1:, :] - cents[:, :1, :]  # (m, k-1, d)
        sv = np.linalg.svd(edges, compute_uv=False)
        scale = np.maximum(sv[:, :1], 1.0)
        degenerate = (k - 1 > d) | np.any(sv[:, : k - 1] <= AFFINE_RTOL * scale, axis=1)
        status[degenerate] = BarycentricStatus.DEGENERATE
    A = np.concatenate([np.swapaxes(cents, 1, 2), np.ones((m, 1, k))], axis=1)  # (m, d+1, k)
    rhs = np.concatenate([ws, np.ones((m, 1))], axis=1)[:, :, None]
    lam = (np.linalg.pinv(A) @ rhs)[:, :, 0]
    resid = np.linalg.norm((A @ lam[:, :, None])[:, :, 0] - rhs[:, :, 0], axis=1)
    ok = status == BarycentricStatus.OK
    outside = ok & ((resid > HULL_ATOL) | np.any(lam < -LAMBDA_ATOL, axis=1) | np.any(lam > 1.0 + LAMBDA_ATOL, axis=1))
    status[outside] = BarycentricStatus.OUTSIDE
    return np.clip(lam, 0.0, 1.0), status


def barycentric_coords(w: Sequence[float] | np.ndarray, centroids: Sequence[Sequence[float]] | np.ndarray) -> BarycentricResult:
    c = np.atleast_2d(np.asarray(centroids, dtype=np.float64))
    p = as_point(w)
    if c.shape[1] != p.shape[0]:
        raise DimensionMismatchError(f"centroids have dim {c.shape[1]}, point has dim {p.shape[0]}")
    if c.shape[0] > p.shape[0] + 1:
        raise ValueError(f"at most d+1 = {p.shape[0] + 1} centroids allowed")
    lam, status = _barycentric_batch(p[None, :], c[None, :, :])
    st = BarycentricStatus(int(status[0]))
    return BarycentricResult(st, lam[0] if st == BarycentricStatus.OK else None)


@dc.dataclass(frozen=True)
class ExtendedBatch:
    points: np.ndarray  # (m, d) latent outputs
    cells: np.ndarray  # (m,) power cell of each input
    vertices: np.ndarray  # (m, k) centroid / code indices used
    coefficients: np.ndarray  # (m, k) barycentric weights (one-hot on fallback)
    interpolated: np.ndarray  # (m,) True where the simplex branch was taken


@dc.dataclass(frozen=True)
class ExtendedMap:
    problem: SdotProblem
    potential: DualPotential
    cell_stats: CellStats
    rips: RipsComplex
    neighbor_count: Optional[int] = None
    scaling: Optional[CubeScaling] = None  # problem targets == scaling.apply(rips codes)

    def __post_init__(self) -> None:
        n, dim = self.problem.n, self.problem.dim
        if len(self.potential) != n or self.cell_stats.measures.shape[0] != n or self.rips.n != n:
            raise DimensionMismatchError("problem, potential, cell stats and Rips complex disagree on n")
        if self.cell_stats.barycenters.shape != (n, dim) or self.rips.codes.dim != dim:
            raise DimensionMismatchError("problem, cell stats and Rips complex disagree on dim")
        solved = self.rips.codes if self.scaling is None else self.scaling.apply(self.rips.codes)
        if not np.array_equal(solved.points, self.problem.targets.points):
            raise ValueError("Rips complex was built over different codes")
        if not self.cell_stats.all_defined:
            raise ValueError("every cell needs a barycenter; solve the SDOT problem to convergence first")
        k = self.neighbor_count if self.neighbor_count is not None else dim + 1
        if k < 1:
            raise ValueError("neighbor_count must be >= 1")
        object.__setattr__(self, "neighbor_count", int(min(k, dim + 1, n)))
        object.__setattr__(self, "_centroid_tree", cKDTree(self.cell_stats.barycenters))

    @property
    def dim(self) -> int:
        return self.problem.dim

    @property
    def codes(self) -> PointCloud:
        return self.rips.codes


def _select_neighbors(tree: cKDTree, ws: np.ndarray, cells: np.ndarray, k: int) -> np.ndarray:
    _, nb = tree.query(ws, k=k)
    nb = np.asarray(nb, dtype=np.int64).reshape(ws.shape[0], k)
    # force the containing cell into the set, replacing the farthest
    missing = ~np.any(nb == cells[:, None], axis=1)
    nb[missing, -1] = cells[missing]
    return nb


def extend_many(emap: ExtendedMap, ws: np.ndarray) -> ExtendedBatch:
    w = np.atleast_2d(np.asarray(ws, dtype=np.float64))
    if w.shape[1] != emap.dim:
        raise DimensionMismatchError(f"inputs have dim {w.shape[1]}, map has dim {emap.dim}")
    m, k = w.shape[0], emap.neighbor_count
    z = emap.codes.points
    cells = assign_cells(w, emap.problem, emap.potential)
    if m == 0:
        return ExtendedBatch(np.zeros((0, emap.dim)), cells, np.zeros((0, k), np.int64), np.zeros((0, k)), np.zeros(0, bool))
    nb = _select_neighbors(emap._centroid_tree, w, cells, k)  # type: ignore[attr-defined]
    lam, status = _barycentric_batch(w, emap.cell_stats.barycenters[nb])
    simplex = np.ones(m, dtype=bool)
    for a in range(k):
        for b in range(a + 1, k):
            simplex &= emap.rips.pairs_are_edges(nb[:, a], nb[:, b])
    use = (status == BarycentricStatus.OK) & simplex
    coeffs = np.where(use[:, None], lam, (nb == cells[:, None]).astype(np.float64))
    out = np.einsum("mk,mkd->md", lam, z[nb])
    out[~use] = z[cells[~use]]
    return ExtendedBatch(points=out, cells=cells, vertices=nb, coefficients=coeffs, interpolated=use)


def extend(emap: ExtendedMap, w: Sequence[float] | np.ndarray) -> np.ndarray:
    p = as_point(w, emap.dim)
    return extend_many(emap, p[None, :]).points[0]


def sample_latent_batch(
    emap: ExtendedMap,
    count: int,
    rng: RngStream,
    chunk_size: int = DEFAULT_CHUNK,
    workers: int = 1,
) -> ExtendedBatch:
    if count < 0:
        raise ValueError("count must be >= 0")

    def run(stream: RngStream, m: int) -> ExtendedBatch:
        return extend_many(emap, stream.generator().random((m, emap.dim)))

    parts = map_chunks(run, rng, count, chunk_size, workers)
    if not parts:
        return extend_many(emap, np.zeros((0, emap.dim)))
    return ExtendedBatch(
        points=np.concatenate([p.points for p in parts]),
        cells=np.concatenate([p.cells for p in parts]),
        vertices=np.concatenate([p.vertices for p in parts]),
        coefficients=np.concatenate([p.coefficients for p in parts]),
        interpolated=np.concatenate([p.interpolated for p in parts]),
    )


def sample_latent(
    emap: ExtendedMap,
    count: int,
    rng: RngStream,
    chunk_size: int = DEFAULT_CHUNK,
    workers: int = 1,
) -> PointCloud:
    if count < 1:
        raise ValueError("count must be >= 1")
    return PointCloud(sample_latent_batch(emap, count, rng, chunk_size, workers).points, dim=emap.dim)
