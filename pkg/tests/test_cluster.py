import numpy as np
import pytest
from scipy import stats
from scipy.stats import special_ortho_group

from _oracles import exhaustive_kmeans_objective
from partcontrast.cluster import (
    assign, cluster_accuracy, kmeans_fit, kmeans_pp_init, nearest_to_centroid, read_assignment,
    read_centroids, save_clustering,
)


def test_pp_init_k_equals_n():
    x = np.random.default_rng(0).standard_normal((6, 3))
    c = kmeans_pp_init(x, 6, seed=1)
    assert sorted(map(tuple, c)) == sorted(map(tuple, x))


def test_pp_init_k1_uniform():
    x = np.arange(5, dtype=float)[:, None]
    picks = [int(kmeans_pp_init(x, 1, seed=s)[0, 0]) for s in range(2000)]
    assert stats.chisquare(np.bincount(picks, minlength=5)).pvalue > 0.001


def test_pp_init_separated_blobs():
    rng = np.random.default_rng(0)
    x = np.vstack([rng.normal(0, 0.01, (20, 2)), rng.normal(0, 0.01, (20, 2)) + [1.0, 0]])
    hits = 0
    for s in range(1000):
        c = kmeans_pp_init(x, 2, seed=s)
        hits += (c[0, 0] > 0.5) != (c[1, 0] > 0.5)
    assert hits / 1000 >= 0.99


def test_pp_init_errors():
    with pytest.raises(ValueError):
        kmeans_pp_init(np.zeros((3, 2)), 4, seed=0)


def test_square_corners_match_oracle():
    x = np.array([[0.0, 0], [1, 0], [0, 1], [1, 1]])
    res = kmeans_fit(x, 2, restarts=20, seed=0)
    assert res.objective == pytest.approx(exhaustive_kmeans_objective(x, 2), rel=1e-12)


@pytest.mark.parametrize("seed", range(10))
def test_micro_oracle(seed):
    rng = np.random.default_rng(seed)
    n, k, d = int(rng.integers(3, 9)), int(rng.integers(1, 4)), int(rng.integers(1, 5))
    x = rng.standard_normal((n, d))
    res = kmeans_fit(x, k, restarts=50, seed=seed)
    opt = exhaustive_kmeans_objective(x, k)
    assert abs(res.objective - opt) <= 1e-9 * max(opt, 1e-300)
    for hist in res.restart_histories:
        assert all(b <= a for a, b in zip(hist, hist[1:]))


def test_k_equals_n_and_identical_points():
    x = np.random.default_rng(1).standard_normal((7, 2))
    assert kmeans_fit(x, 7, restarts=2).objective == 0
    same = np.ones((6, 3))
    res = kmeans_fit(same, 3, restarts=3)
    assert res.objective == 0
    assert set(res.assignment) <= {0, 1, 2}
    with pytest.raises(ValueError):
        kmeans_fit(x, 8)
    bad = x.copy()
    bad[0, 0] = np.inf
    with pytest.raises(ValueError):
        kmeans_fit(bad, 2)


def test_assign_rules():
    c = np.array([[0.0, 0], [2, 0], [5, 5], [0, 2]])
    assert assign([[5.0, 5]], c).tolist() == [2]
    assert assign([[1.0, 1]], c[[0, 1, 0, 3]]).tolist() == [0]
    # equidistant to centroids 1 and 3
    c2 = np.array([[9.0, 9], [1, 0], [8, 8], [-1, 0]])
    assert assign([[0.0, 0]], c2).tolist() == [1]
    with pytest.raises(ValueError):
        assign(np.zeros((2, 3)), c)


def test_assign_brute_force():
    rng = np.random.default_rng(2)
    x, c = rng.standard_normal((200, 4)), rng.standard_normal((7, 4))
    want = [min(range(7), key=lambda j: (np.sum((p - c[j]) ** 2), j)) for p in x]
    assert assign(x, c).tolist() == want


def test_fixpoint_and_relabel_invariance():
    rng = np.random.default_rng(3)
    x = np.vstack([rng.normal(m, 0.3, (30, 3)) for m in (0, 3, 6)])
    res = kmeans_fit(x, 3, restarts=5, seed=1)
    assert np.array_equal(assign(x, res.centroids), res.assignment)
    y = np.repeat([0, 1, 2], 30)
    perm = np.array([2, 0, 1])
    assert cluster_accuracy(perm[res.assignment], y) == cluster_accuracy(res.assignment, y) == 1.0


def test_cluster_accuracy_crafted():
    assert cluster_accuracy([0, 0, 0, 1, 1], [0, 0, 1, 1, 1]) == pytest.approx(4 / 5)
    with pytest.raises(ValueError):
        cluster_accuracy([], [])


def test_rigid_motion_stability():
    rng = np.random.default_rng(4)
    for trial in range(5):
        x = rng.standard_normal((8, 3))
        q = special_ortho_group.rvs(3, random_state=trial)
        a = kmeans_fit(x, 3, restarts=50, seed=trial)
        b = kmeans_fit(x @ q.T + 2.0, 3, restarts=50, seed=trial)
        assert b.objective == pytest.approx(a.objective, rel=1e-9)
        same = {(i, j) for i in range(8) for j in range(8) if a.assignment[i] == a.assignment[j]}
        assert same == {(i, j) for i in range(8) for j in range(8) if b.assignment[i] == b.assignment[j]}


def test_nearest_to_centroid():
    rng = np.random.default_rng(5)
    x = rng.standard_normal((60, 2))
    res = kmeans_fit(x, 4, restarts=3)
    got = nearest_to_centroid(x, res.centroids, res.assignment, 5)
    for j, idx in got.items():
        members = [i for i in range(60) if res.assignment[i] == j]
        ordered = sorted(members, key=lambda i: (np.sum((x[i] - res.centroids[j]) ** 2), i))
        assert idx == ordered[:5]
    top1 = nearest_to_centroid(x, res.centroids, res.assignment, 1)
    assert all(len(v) == 1 for v in top1.values())


def test_restart_determinism():
    x = np.random.default_rng(6).standard_normal((100, 5))
    a, b = kmeans_fit(x, 6, restarts=4, seed=9), kmeans_fit(x, 6, restarts=4, seed=9)
    assert np.array_equal(a.assignment, b.assignment) and a.objective == b.objective


def test_serialization(tmp_path):
    x = np.random.default_rng(7).standard_normal((10, 3))
    res = kmeans_fit(x, 3, restarts=2)
    ids = [f"s{i}" for i in range(10)]
    prefix = tmp_path / "k3"
    save_clustering(res, ids, prefix)
    assert read_assignment(f"{prefix}.assign.csv") == dict(zip(ids, map(int, res.assignment)))
    raw = open(f"{prefix}.centroids.bin", "rb").read()
    assert raw[:8] == (3).to_bytes(4, "little") + (3).to_bytes(4, "little") and len(raw) == 8 + 36
    np.testing.assert_allclose(read_centroids(f"{prefix}.centroids.bin"), res.centroids, rtol=1e-6)
