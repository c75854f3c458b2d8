"""Phase 1: covariate-based donor filtering.

Builds a forest of random-projection trees over donor covariate rows,
selects per-treated-unit nearest neighbors, and supports spillover
exclusion and random subsampling of the donor pool. Candidates pooled
from all tree leaves are re-ranked by exact distance, and an exact
brute-force mode is available for tests and small pools.

Covariates are z-scored with donor-pool column statistics before any
distance is taken (an unscaled metric would let one wide covariate
dominate); the cosine metric additionally L2-normalizes rows.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from .errors import (
    BadFraction,
    ConfigInvalid,
    EmptyDonorSet,
    EmptyGroup,
    ExcludedIsTreated,
    UnknownUnitId,
)
from .panel import CovariateTable, PanelMatrix

DEFAULT_QUANTILES = (0.01, 0.05, 0.10, 0.90, 0.95, 0.99)


@dataclass(frozen=True)
class AnnParams:
    tree_count: int = 8
    leaf_size: int = 32
    metric: str = "euclidean"
    seed: int = 0
    standardize: bool = True
    exact: bool = False

    def __post_init__(self):
        if self.tree_count < 1:
            raise ConfigInvalid("tree_count must be >= 1")
        if self.leaf_size < 1:
            raise ConfigInvalid("leaf_size must be >= 1")
        if self.metric not in ("euclidean", "cosine"):
            raise ConfigInvalid(f"unknown metric {self.metric!r}")


class _Node:
    __slots__ = ("normal", "threshold", "left", "right", "members")

    def __init__(self, normal=None, threshold=0.0, left=None, right=None, members=None):
        self.normal = normal
        self.threshold = threshold
        self.left = left
        self.right = right
        self.members = members  # local positions; leaf iff not None


def _build_node(points: np.ndarray, members: np.ndarray, leaf_size: int, rng: np.random.Generator) -> _Node:
    if members.size <= leaf_size:
        return _Node(members=members)
    normal = rng.standard_normal(points.shape[1])
    normal /= np.linalg.norm(normal)
    proj = points[members] @ normal
    threshold = float(np.median(proj))
    mask = proj <= threshold
    # degenerate split (duplicate points): fall back to an index split
    if mask.all() or not mask.any():
        half = members.size // 2
        left, right = members[:half], members[half:]
        if left.size == 0 or right.size == 0:
            return _Node(members=members)
        return _Node(
            normal,
            threshold,
            _build_node(points, left, leaf_size, rng),
            _build_node(points, right, leaf_size, rng),
        )
    return _Node(
        normal,
        threshold,
        _build_node(points, members[mask], leaf_size, rng),
        _build_node(points, members[~mask], leaf_size, rng),
    )


def _leaf_for(node: _Node, q: np.ndarray) -> np.ndarray:
    while node.members is None:
        if q @ node.normal <= node.threshold:
            node = node.left
        else:
            node = node.right
    return node.members


def _collect_leaves(node: _Node, out: list) -> None:
    if node.members is not None:
        out.append(node.members)
    else:
        _collect_leaves(node.left, out)
        _collect_leaves(node.right, out)


class AnnIndex:
    """Random-projection-tree forest over donor covariate rows.

    Queries pool candidates from every tree's leaf and re-rank them by
    exact distance, so returned distances are always true distances.
    """

    def __init__(self, cov: CovariateTable, donor_rows: np.ndarray, params: AnnParams):
        donor_rows = np.unique(np.asarray(donor_rows, dtype=np.intp))
        if donor_rows.size == 0:
            raise EmptyDonorSet("cannot build an index over zero donors")
        if donor_rows[0] < 0 or donor_rows[-1] >= cov.covariates.shape[0]:
            raise ConfigInvalid("donor row index out of range")
        self.params = params
        self.donor_rows = donor_rows
        raw = cov.covariates[donor_rows]
        if params.standardize:
            self._mean = raw.mean(axis=0)
            std = raw.std(axis=0)
            self._std = np.where(std > 0, std, 1.0)
        else:
            self._mean = np.zeros(raw.shape[1])
            self._std = np.ones(raw.shape[1])
        self._points = self.transform(raw)
        seeds = np.random.SeedSequence(params.seed).spawn(params.tree_count)
        members = np.arange(donor_rows.size)
        self.trees = [
            _build_node(self._points, members, params.leaf_size, np.random.default_rng(s))
            for s in seeds
        ]

    def transform(self, vectors: np.ndarray) -> np.ndarray:
        """Map raw covariate rows into the index's search space."""
        x = (np.atleast_2d(np.asarray(vectors, dtype=np.float64)) - self._mean) / self._std
        if self.params.metric == "cosine":
            norms = np.linalg.norm(x, axis=1, keepdims=True)
            x = x / np.where(norms > 0, norms, 1.0)
        return x

    def _distances(self, q: np.ndarray, positions: np.ndarray) -> np.ndarray:
        pts = self._points[positions]
        if self.params.metric == "cosine":
            return 1.0 - pts @ q
        return np.linalg.norm(pts - q, axis=1)

    def query(self, vector: np.ndarray, k: int) -> tuple[np.ndarray, np.ndarray]:
        """Return up to k donor row indices and their distances, nearest first.

        ``vector`` is a raw covariate row; it is transformed internally.
        Ties are broken by donor row index, so results are deterministic.
        """
        if k < 1:
            raise ConfigInvalid("k must be >= 1")
        q = self.transform(vector)[0]
        if self.params.exact:
            candidates = np.arange(self.donor_rows.size)
        else:
            pools = [_leaf_for(tree, q) for tree in self.trees]
            candidates = np.unique(np.concatenate(pools))
            if candidates.size < k:
                candidates = np.arange(self.donor_rows.size)
        dists = self._distances(q, candidates)
        order = np.lexsort((self.donor_rows[candidates], dists))[:k]
        chosen = candidates[order]
        return self.donor_rows[chosen], dists[order]

    def tree_leaf_members(self, tree_index: int) -> list[np.ndarray]:
        """Donor row indices per leaf (diagnostics / invariant checks)."""
        leaves: list[np.ndarray] = []
        _collect_leaves(self.trees[tree_index], leaves)
        return [self.donor_rows[m] for m in leaves]


def build_index(cov: CovariateTable, donor_rows, params: AnnParams | None = None) -> AnnIndex:
    """Build the phase-1 ANN index over the given donor rows."""
    return AnnIndex(cov, np.asarray(list(donor_rows), dtype=np.intp), params or AnnParams())


@dataclass(frozen=True)
class DonorFilter:
    """Per-treated-unit neighbor lists plus their pooled donor union."""

    neighbors: dict[int, list[tuple[int, float]]]
    donor_union: np.ndarray
    excluded: frozenset[int] = field(default_factory=frozenset)

    def __post_init__(self):
        union = np.unique(np.asarray(self.donor_union, dtype=np.intp))
        object.__setattr__(self, "donor_union", union)
        if set(union) & set(self.excluded):
            raise ConfigInvalid("donor_union intersects the excluded set")


def match_donors(index: AnnIndex, cov: CovariateTable, treated, k: int) -> DonorFilter:
    """Select each treated unit's k nearest donors by covariate distance."""
    if k < 1:
        raise ConfigInvalid("k must be >= 1")
    treated = np.asarray(list(treated), dtype=np.intp)
    neighbors: dict[int, list[tuple[int, float]]] = {}
    pooled: list[np.ndarray] = []
    for i in treated:
        rows, dists = index.query(cov.covariates[i], k)
        neighbors[int(i)] = [(int(r), float(d)) for r, d in zip(rows, dists)]
        pooled.append(rows)
    union = np.unique(np.concatenate(pooled)) if pooled else np.empty(0, dtype=np.intp)
    if np.intersect1d(union, treated).size:
        raise ConfigInvalid("donor union intersects treated rows")
    return DonorFilter(neighbors, union)


def exclude_spillover(filt: DonorFilter, excluded_ids, panel: PanelMatrix) -> DonorFilter:
    """Drop the listed donors from every neighbor list and the union.

    The engine provides the mechanism only; which units count as
    spillover-connected is the caller's policy.
    """
    treated = set(int(i) for i in panel.treated)
    drop: set[int] = set()
    for uid in excluded_ids:
        row = panel.index_of(uid)
        if row in treated:
            raise ExcludedIsTreated(uid)
        drop.add(row)
    neighbors = {
        t: [(d, dist) for d, dist in lst if d not in drop]
        for t, lst in filt.neighbors.items()
    }
    union = np.array(sorted(set(int(i) for i in filt.donor_union) - drop), dtype=np.intp)
    return DonorFilter(neighbors, union, frozenset(set(filt.excluded) | drop))


def subsample_donors(panel: PanelMatrix, fraction: float, seed: int = 0, eligible=None) -> np.ndarray:
    """Uniform donor subsample without replacement, deterministic per seed.

    Size is max(1, round(fraction * donor count)). ``eligible`` narrows
    the pool (e.g. to exclude experimental control units).
    """
    if not 0.0 < fraction <= 1.0:
        raise BadFraction(f"fraction must be in (0, 1], got {fraction}")
    pool = panel.donors if eligible is None else np.unique(np.asarray(list(eligible), dtype=np.intp))
    if pool.size == 0:
        raise EmptyDonorSet("no eligible donors to subsample")
    size = max(1, round(fraction * pool.size))
    rng = np.random.default_rng(seed)
    return np.sort(rng.choice(pool, size=size, replace=False))


def quantile_alignment(
    panel: PanelMatrix,
    donors,
    quantiles=DEFAULT_QUANTILES,
    control=None,
) -> list[tuple[str, list[float]]]:
    """Empirical pre-period outcome quantiles per group.

    Pools all pre-period (unit, time) values within each of donor /
    treated / optional control groups. Uses the lower-interpolation
    quantile convention: the reported value is always an observed one.
    """
    qs = list(quantiles)
    if any(not 0.0 < q < 1.0 for q in qs) or qs != sorted(qs):
        raise ConfigInvalid("quantiles must be sorted values in (0, 1)")
    pre = panel.outcomes[:, : panel.t0]

    def row(label: str, rows) -> tuple[str, list[float]]:
        rows = np.asarray(list(rows), dtype=np.intp)
        if rows.size == 0:
            raise EmptyGroup(f"group {label!r} has no units")
        vals = pre[rows].ravel()
        return label, [float(np.quantile(vals, q, method="lower")) for q in qs]

    table = [row("donor", donors), row("treated", panel.treated)]
    if control is not None:
        table.append(row("control", control))
    return table
