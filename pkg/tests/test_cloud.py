import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.spatial.transform import Rotation

from sphnet.cloud import (
    DegenerateCloudError,
    build_kdtree,
    farthest_point_sampling,
    fps_voronoi_pool,
    knn_patches,
    normalize,
    pool,
    quaternion_to_matrix,
    random_rotation,
    random_rotations,
    upsample,
)


def brute_knn(points, k):
    """Sort every row by (distance, self-first, index) with plain Python."""
    n = len(points)
    out = []
    for i in range(n):
        keyed = sorted(range(n), key=lambda j: (float(((points[j] - points[i]) ** 2).sum()), j != i, j))
        out.append(keyed[:k])
    return np.array(out)


def brute_fps_voronoi(points, features, m):
    n = len(points)
    d = lambda a, b: float(((points[a] - points[b]) ** 2).sum())
    seeds = [max(range(n), key=lambda i: (float((points[i] ** 2).sum()), -i))]
    while len(seeds) < m:
        best = max((i for i in range(n) if i not in seeds), key=lambda i: (min(d(i, s) for s in seeds), -i))
        seeds.append(best)
    pooled = []
    cells = {s: [] for s in range(m)}
    for i in range(n):
        if i in seeds:
            cells[seeds.index(i)].append(i)
            continue
        owner = min(range(m), key=lambda s: (d(i, seeds[s]), s))
        cells[owner].append(i)
    for s in range(m):
        pooled.append(features[cells[s]].max(axis=0))
    return np.array(seeds), np.array(pooled)


# --------------------------------------------------------------------------- normalize


def test_normalize_example():
    np.testing.assert_allclose(normalize([[1, 0, 0], [3, 0, 0]]), [[-1, 0, 0], [1, 0, 0]])


def test_normalize_postconditions_and_idempotence():
    pts = np.random.default_rng(0).normal(size=(100, 3)) * 5 + 3
    a = normalize(pts)
    assert np.abs(a.mean(axis=0)).max() < 1e-12
    assert np.linalg.norm(a, axis=1).max() == pytest.approx(1.0, abs=1e-12)
    np.testing.assert_allclose(normalize(a), a, atol=1e-12)


def test_normalize_degenerate():
    with pytest.raises(DegenerateCloudError):
        normalize(np.ones((5, 3)))
    with pytest.raises(ValueError):
        normalize(np.zeros((0, 3)))


# --------------------------------------------------------------------------- kNN


def test_knn_collinear():
    pts = np.array([[0, 0, 0], [1, 0, 0], [2, 0, 0], [3, 0, 0]], dtype=float)
    # point 1 and 2 have two neighbours at distance 1: the smaller index wins
    np.testing.assert_array_equal(knn_patches(pts, 2), [[0, 1], [1, 0], [2, 1], [3, 2]])


def test_knn_matches_brute_force_on_100_instances():
    rng = np.random.default_rng(1)
    for trial in range(100):
        n = int(rng.integers(2, 40))
        k = int(rng.integers(1, n + 1))
        if trial % 3 == 0:
            # integer grid coordinates force many exact distance ties
            pts = rng.integers(0, 3, size=(n, 3)).astype(float)
        else:
            pts = rng.normal(size=(n, 3))
        np.testing.assert_array_equal(knn_patches(pts, k), brute_knn(pts, k), err_msg=f"trial {trial}")


def test_knn_batched_equals_per_cloud():
    rng = np.random.default_rng(2)
    clouds = rng.normal(size=(4, 50, 3)) * np.array([1, 10, 0.1, 3])[:, None, None]
    batched = knn_patches(clouds, 7)
    for b in range(4):
        np.testing.assert_array_equal(batched[b], knn_patches(clouds[b], 7))


def test_knn_row_invariants():
    pts = np.random.default_rng(3).normal(size=(64, 3))
    idx = knn_patches(pts, 5)
    np.testing.assert_array_equal(idx[:, 0], np.arange(64))
    assert all(len(set(row)) == 5 for row in idx)
    d = ((pts[idx] - pts[:, None]) ** 2).sum(-1)
    assert np.all(np.diff(d, axis=1) >= 0)


def test_knn_rotation_invariant():
    pts = np.random.default_rng(4).normal(size=(200, 3))
    rot = random_rotation(5)
    np.testing.assert_array_equal(knn_patches(pts, 16), knn_patches(pts @ rot.T, 16))


def test_knn_bad_k():
    pts = np.zeros((4, 3))
    with pytest.raises(ValueError):
        knn_patches(pts, 5)
    with pytest.raises(ValueError):
        knn_patches(pts, 0)


# --------------------------------------------------------------------------- kd-tree


def test_two_point_tree():
    tree = build_kdtree(np.array([[1.0, 0, 0], [0, 0, 0]]))
    assert tree.depth == 1
    np.testing.assert_array_equal(tree.perm, [1, 0])
    assert tree.axes[0] == 0 and tree.thresholds[0] == 0.5


def test_square_corners():
    pts = np.array([[0, 0, 0], [1, 0, 0], [0, 1, 0], [1, 1, 0]], dtype=float)
    tree = build_kdtree(pts)
    assert tree.axes[0] in (0, 1)
    a = tree.axes[0]
    left, right = tree.subtree_members(1)
    assert np.all(pts[left, a] == 0) and np.all(pts[right, a] == 1)


def test_tree_structure_1024():
    pts = np.random.default_rng(6).normal(size=(1024, 3)) * [3, 1, 0.5]
    tree = build_kdtree(pts)
    assert tree.depth == 10
    assert sorted(tree.perm.tolist()) == list(range(1024))
    for level in range(11):
        members = tree.subtree_members(level)
        assert members.shape == (2**level, 2 ** (10 - level))
    # every internal node splits its members at the threshold along its axis of max spread
    for level in range(10):
        for node, members in enumerate(tree.subtree_members(level)):
            heap = 2**level - 1 + node
            sub = pts[members]
            axis = tree.axes[heap]
            assert axis == np.argmax(sub.max(0) - sub.min(0))
            half = len(members) // 2
            assert sub[:half, axis].max() <= tree.thresholds[heap] <= sub[half:, axis].min()


def test_tree_tie_break_by_index():
    pts = np.zeros((8, 3))
    pts[:, 0] = [1, 1, 1, 1, 0, 0, 0, 0]
    tree = build_kdtree(pts)
    np.testing.assert_array_equal(tree.subtree_members(1), [[4, 5, 6, 7], [0, 1, 2, 3]])


def test_tree_needs_power_of_two():
    with pytest.raises(ValueError):
        build_kdtree(np.zeros((6, 3)))


def test_truncated_tree():
    tree = build_kdtree(np.random.default_rng(7).normal(size=(64, 3)))
    small = tree.truncate(2)
    assert small.depth == 4 and small.size == 16
    np.testing.assert_array_equal(small.axes, tree.axes[:15])
    with pytest.raises(ValueError):
        tree.truncate(7)


# --------------------------------------------------------------------------- pooling


def test_pool_example():
    pts = np.array([[0, 0, 0], [0.1, 0, 0], [5, 0, 0], [5.1, 0, 0]])
    tree = build_kdtree(pts)
    np.testing.assert_array_equal(tree.perm, [0, 1, 2, 3])
    pos, feats = pool(tree, np.array([[1.0], [5.0], [2.0], [2.0]]), pts, 1)
    np.testing.assert_array_equal(feats[:, 0], [5, 2])
    np.testing.assert_allclose(pos, [[0.05, 0, 0], [5.05, 0, 0]])


def test_pool_identity_and_constant():
    pts = np.random.default_rng(8).normal(size=(32, 3))
    tree = build_kdtree(pts)
    f = np.random.default_rng(9).normal(size=(32, 4))
    pos, feats = pool(tree, f, pts, 0)
    np.testing.assert_array_equal(feats, f[tree.perm])
    np.testing.assert_array_equal(pos, pts[tree.perm])
    _, const = pool(tree, np.full((32, 2), 3.5), pts, 3)
    assert np.all(const == 3.5) and const.shape == (4, 2)
    with pytest.raises(ValueError):
        pool(tree, f, pts, 6)


def test_pool_sizes():
    pts = np.random.default_rng(10).normal(size=(256, 3))
    tree = build_kdtree(pts)
    for k in range(9):
        pos, feats = pool(tree, np.ones((256, 1)), pts, k)
        assert len(pos) == len(feats) == 2 ** (8 - k)


def test_pool_permutation_consistent():
    rng = np.random.default_rng(11)
    pts = rng.normal(size=(64, 3))
    f = rng.normal(size=(64, 3))
    tree = build_kdtree(pts)
    _, a = pool(tree, f, pts, 2)
    shuffle = rng.permutation(64)
    inverse = np.argsort(shuffle)
    moved = type(tree)(tree.depth, inverse[tree.perm], tree.axes, tree.thresholds)
    _, b = pool(moved, f[shuffle], pts[shuffle], 2)
    np.testing.assert_array_equal(np.sort(a, axis=0), np.sort(b, axis=0))


def test_upsample_examples():
    tree = build_kdtree(np.random.default_rng(12).normal(size=(4, 3)))
    np.testing.assert_array_equal(upsample(tree, np.array([[1.0], [2.0]]), 1)[:, 0], [1, 1, 2, 2])
    with pytest.raises(ValueError):
        upsample(tree, np.ones((3, 1)), 1)


@settings(max_examples=30, deadline=None)
@given(st.integers(1, 6), st.integers(0, 6), st.integers(0, 2**31 - 1))
def test_pool_upsample_roundtrip(depth, k, seed):
    k = min(k, depth)
    rng = np.random.default_rng(seed)
    n = 2**depth
    tree = build_kdtree(rng.normal(size=(n, 3)))
    coarse = rng.normal(size=(n // 2**k, 5))
    fine = np.empty_like(upsample(tree, coarse, k))
    fine[tree.perm] = upsample(tree, coarse, k)  # scatter back to original point order
    _, pooled = pool(tree, fine, rng.normal(size=(n, 3)), k)
    np.testing.assert_array_equal(pooled, coarse)


# --------------------------------------------------------------------------- FPS / Voronoi baseline


def test_fps_voronoi_matches_brute_force():
    rng = np.random.default_rng(13)
    for trial in range(30):
        n = int(rng.integers(1, 33))
        m = int(rng.integers(1, n + 1))
        pts = rng.normal(size=(n, 3)) if trial % 2 else rng.integers(0, 3, size=(n, 3)).astype(float)
        feats = rng.normal(size=(n, 2))
        seeds, pooled = brute_fps_voronoi(pts, feats, m)
        pos, got = fps_voronoi_pool(pts, feats, m)
        np.testing.assert_array_equal(farthest_point_sampling(pts, m), seeds)
        np.testing.assert_array_equal(pos, pts[seeds])
        np.testing.assert_array_equal(got, pooled)


def test_fps_extremes():
    rng = np.random.default_rng(14)
    pts = rng.normal(size=(20, 3))
    f = rng.normal(size=(20, 3))
    pos, pooled = fps_voronoi_pool(pts, f, 20)
    seeds = farthest_point_sampling(pts, 20)
    assert sorted(seeds.tolist()) == list(range(20))
    np.testing.assert_array_equal(pooled, f[seeds])
    _, top = fps_voronoi_pool(pts, f, 1)
    np.testing.assert_array_equal(top[0], f.max(axis=0))
    assert farthest_point_sampling(pts, 1)[0] == np.argmax(np.linalg.norm(pts, axis=1))
    with pytest.raises(ValueError):
        fps_voronoi_pool(pts, f, 0)
    with pytest.raises(ValueError):
        fps_voronoi_pool(pts, f, 21)


# --------------------------------------------------------------------------- rotations


def test_rotation_properties():
    for rot in random_rotations(100, seed=15):
        assert np.abs(rot.T @ rot - np.eye(3)).max() < 1e-12
        assert np.linalg.det(rot) == pytest.approx(1.0, abs=1e-12)
    np.testing.assert_array_equal(random_rotation(3), random_rotation(3))


def test_quaternion_convention_matches_scipy():
    q = np.random.default_rng(16).normal(size=(10, 4))
    # ours is scalar-first, scipy's is scalar-last
    expected = Rotation.from_quat(np.roll(q, -1, axis=1)).as_matrix()
    np.testing.assert_allclose(quaternion_to_matrix(q), expected, atol=1e-12)


def test_haar_statistics():
    rots = random_rotations(100_000, seed=17)
    assert np.abs(rots.mean(axis=0)).max() < 5e-3
    # Haar measure: the rotation angle has density (1 - cos t) / pi, so E[trace] = 0 and E[trace^2] = 1
    trace = np.trace(rots, axis1=1, axis2=2)
    assert abs(trace.mean()) < 1e-2
    assert abs((trace**2).mean() - 1.0) < 2e-2
