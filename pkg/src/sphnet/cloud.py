"""Point-cloud structures: normalization, kNN patches, balanced kd-trees and pooling."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.spatial import cKDTree


class DegenerateCloudError(ValueError):
    pass


def normalize(points) -> np.ndarray:
    """Center on the centroid and scale so the farthest point has norm 1."""
    points = np.asarray(points, dtype=np.float64)
    if points.ndim != 2 or points.shape[1] != 3 or len(points) == 0:
        raise ValueError(f"expected an (N, 3) array, got {points.shape}")
    centered = points - points.mean(axis=0)
    radius = np.sqrt((centered**2).sum(axis=1)).max()
    if radius <= 0:
        raise DegenerateCloudError("all points coincide")
    return centered / radius


def _brute_knn_row(points: np.ndarray, i: int, k: int) -> np.ndarray:
    d = ((points - points[i]) ** 2).sum(axis=1)
    not_self = np.ones(len(points), dtype=bool)
    not_self[i] = False
    order = np.lexsort((np.arange(len(points)), not_self, d))
    return order[:k]


def knn_patches(points, k: int) -> np.ndarray:
    """Exact ``k`` nearest neighbours of every point, self first.

    Rows are sorted by distance; equal distances go to the smaller index.
    ``points`` is ``(N, 3)`` or a batch ``(B, N, 3)``; returns int64 indices
    of shape ``(N, k)`` or ``(B, N, k)`` (per-cloud indices).
    """
    points = np.asarray(points, dtype=np.float64)
    batched = points.ndim == 3
    if not batched:
        points = points[None]
    batch, n, _ = points.shape
    if not 1 <= k <= n:
        raise ValueError(f"k={k} must lie in [1, {n}]")
    extra = min(k + 1, n)
    # one tree for the whole batch: clouds are translated far enough apart that
    # no neighbour list of size <= n can leave its own cloud
    lo, hi = points.min(axis=1), points.max(axis=1)
    gap = 3.0 * float((hi - lo).max()) + 1.0
    shifted = points - lo[:, None, :]
    shifted[..., 0] += gap * np.arange(batch)[:, None]
    flat = shifted.reshape(-1, 3)
    _, idx = cKDTree(flat).query(flat, k=extra)
    idx = np.asarray(idx).reshape(batch, n, extra) - (np.arange(batch) * n)[:, None, None]
    rows = np.arange(n)
    bidx = np.arange(batch)[:, None, None]
    d2 = ((points[bidx, idx] - points[:, :, None, :]) ** 2).sum(axis=-1)
    # the tree's order already satisfies the contract unless self is not first or distances tie
    bad = (idx[..., 0] != rows) | np.any(np.diff(d2[..., 1:], axis=-1) <= 0, axis=-1)
    if extra > k:
        bad |= d2[..., k] <= d2[..., k - 1]
    out = idx[..., :k].copy()
    for b, i in zip(*np.nonzero(bad)):
        out[b, i] = _brute_knn_row(points[b], i, k)
    return out if batched else out[0]


@dataclass(frozen=True)
class KdTree:
    """Perfectly balanced kd-tree over ``2**depth`` points.

    ``perm[j]`` is the original index of the point at leaf position ``j``; the
    leaves of any depth-``d`` subtree are contiguous.  Internal nodes use heap
    numbering (root 0, children ``2i+1``, ``2i+2``); ``axes`` and
    ``thresholds`` hold their split axis and separating coordinate.
    """

    depth: int
    perm: np.ndarray
    axes: np.ndarray
    thresholds: np.ndarray

    @property
    def size(self) -> int:
        return len(self.perm)

    def subtree_members(self, level: int) -> np.ndarray:
        """``(2**level, 2**(depth-level))`` original indices of each subtree at ``level``."""
        return self.perm.reshape(2**level, -1)

    def truncate(self, k: int) -> "KdTree":
        """Tree over the cloud obtained by pooling ``k`` levels away (leaf order)."""
        if not 0 <= k <= self.depth:
            raise ValueError(f"cannot truncate {k} levels from depth {self.depth}")
        depth = self.depth - k
        n_internal = 2**depth - 1
        return KdTree(depth, np.arange(2**depth), self.axes[:n_internal].copy(), self.thresholds[:n_internal].copy())


def _log2_exact(n: int) -> int:
    if n < 1 or n & (n - 1):
        raise ValueError(f"point count {n} is not a power of two")
    return n.bit_length() - 1


def build_kdtree(points) -> KdTree:
    """Median-split kd-tree, splitting each node along its axis of largest spread.

    Built level by level: every level sorts all nodes at once, so the cost is
    ``O(N log N)`` per level and ``O(N log^2 N)`` overall.
    """
    points = np.asarray(points)
    n = len(points)
    depth = _log2_exact(n)
    perm = np.arange(n)
    axes = np.zeros(max(n - 1, 0), dtype=np.int8)
    thresholds = np.zeros(max(n - 1, 0))
    for level in range(depth):
        groups = perm.reshape(2**level, -1)
        coords = points[groups]  # (nodes, size, 3)
        spread = coords.max(axis=1) - coords.min(axis=1)
        axis = np.argmax(spread, axis=1)
        key = np.take_along_axis(coords, axis[:, None, None], axis=2)[..., 0]
        order = np.lexsort((groups, key), axis=-1)
        groups = np.take_along_axis(groups, order, axis=-1)
        key = np.take_along_axis(key, order, axis=-1)
        half = groups.shape[1] // 2
        nodes = slice(2**level - 1, 2 ** (level + 1) - 1)
        axes[nodes] = axis
        thresholds[nodes] = 0.5 * (key[:, half - 1] + key[:, half])
        perm = groups.reshape(-1)
    return KdTree(depth, perm, axes, thresholds)


def pool(tree: KdTree, features, positions, k: int):
    """Max-pool features and average positions over every depth-``k`` subtree.

    Returns ``(positions', features')`` with ``N / 2**k`` rows in left-to-right
    subtree order.
    """
    if not 0 <= k <= tree.depth:
        raise ValueError(f"pool depth {k} exceeds tree depth {tree.depth}")
    features = np.asarray(features)
    positions = np.asarray(positions)
    if len(features) != tree.size or len(positions) != tree.size:
        raise ValueError("features/positions do not match the tree")
    group = 2**k
    feats = features[tree.perm].reshape(-1, group, *features.shape[1:]).max(axis=1)
    pos = positions[tree.perm].reshape(-1, group, 3).mean(axis=1)
    return pos, feats


def upsample(tree: KdTree, features, k: int) -> np.ndarray:
    """Copy each coarse feature onto all ``2**k`` children (leaf order)."""
    features = np.asarray(features)
    m = len(features)
    if k < 0 or m * 2**k > tree.size or tree.size % (m * 2**k):
        raise ValueError(f"{m} features cannot be upsampled by 2**{k} on a tree of {tree.size} points")
    return np.repeat(features, 2**k, axis=0)


def farthest_point_sampling(points, m: int) -> np.ndarray:
    """Greedy FPS seeded at the max-norm point; returns ``m`` distinct indices (ties: smaller index)."""
    points = np.asarray(points, dtype=np.float64)
    seeds = np.empty(m, dtype=np.int64)
    seeds[0] = np.argmax((points**2).sum(axis=1))
    mind = ((points - points[seeds[0]]) ** 2).sum(axis=1)
    mind[seeds[0]] = -1.0  # chosen seeds are never picked again, even among duplicates
    for s in range(1, m):
        seeds[s] = np.argmax(mind)
        np.minimum(mind, ((points - points[seeds[s]]) ** 2).sum(axis=1), out=mind)
        mind[seeds[s]] = -1.0
    return seeds


def voronoi_assign(points, seed_points, chunk: int = 1 << 20) -> np.ndarray:
    """Nearest seed for every point by exhaustive search (ties: smaller seed index)."""
    points = np.asarray(points, dtype=np.float64)
    seed_points = np.asarray(seed_points, dtype=np.float64)
    out = np.empty(len(points), dtype=np.int64)
    rows = max(1, chunk // max(len(seed_points), 1))
    for start in range(0, len(points), rows):
        diff = points[start : start + rows, None, :] - seed_points[None, :, :]
        out[start : start + rows] = np.argmin(np.einsum("psi,psi->ps", diff, diff), axis=1)
    return out


def fps_voronoi_pool(points, features, m: int):
    """Quadratic-cost baseline: FPS seeds, then max over each seed's Voronoi cell."""
    if m < 1:
        raise ValueError("target size must be at least 1")
    points = np.asarray(points, dtype=np.float64)
    features = np.asarray(features)
    if m > len(points):
        raise ValueError(f"cannot sample {m} seeds from {len(points)} points")
    seeds = farthest_point_sampling(points, m)
    cell = voronoi_assign(points, points[seeds])
    cell[seeds] = np.arange(m)  # a seed always owns itself
    order = np.argsort(cell, kind="stable")
    starts = np.searchsorted(cell[order], np.arange(m))
    pooled = np.maximum.reduceat(features[order], starts, axis=0)
    return points[seeds], pooled


def _as_generator(seed) -> np.random.Generator:
    if isinstance(seed, np.random.Generator):
        return seed
    return np.random.default_rng(seed)


def quaternion_to_matrix(q) -> np.ndarray:
    q = np.asarray(q, dtype=np.float64)
    q = q / np.linalg.norm(q, axis=-1, keepdims=True)
    w, x, y, z = np.moveaxis(q, -1, 0)
    mat = np.stack(
        [
            1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y),
            2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x),
            2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y),
        ],
        axis=-1,
    )
    return mat.reshape(q.shape[:-1] + (3, 3))


def random_rotation(seed=None) -> np.ndarray:
    """Haar-uniform rotation from a normalized 4-D Gaussian quaternion."""
    return quaternion_to_matrix(_as_generator(seed).standard_normal(4))


def random_rotations(n: int, seed=None) -> np.ndarray:
    return quaternion_to_matrix(_as_generator(seed).standard_normal((n, 4)))
