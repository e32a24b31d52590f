import itertools
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from furnset.attributes import (
    allocate_cluster_budget,
    category_rng,
    cluster_attributes,
    constrained_distance,
    kmeans_pp_init,
    lloyd,
    load_assignment,
    save_assignment,
)
from furnset.errors import BudgetError, ShapeError
from furnset.ingest import EmbeddingMatrix

from conftest import make_catalog


def matrix(points):
    points = np.asarray(points, dtype=np.float64)
    return EmbeddingMatrix(tuple(f"id{n:03d}" for n in range(len(points))), points)


def partition_cost(points, labels):
    cost = 0.0
    for lab in set(labels):
        members = points[np.asarray(labels) == lab]
        cost += ((members - members.mean(axis=0)) ** 2).sum()
    return cost


def best_two_partition(points):
    """Exhaustive search over every split into two non-empty groups."""
    n = len(points)
    best = (math.inf, None)
    for mask in range(1, 2 ** (n - 1)):
        labels = [(mask >> i) & 1 for i in range(n)]
        best = min(best, (partition_cost(points, labels), tuple(labels)))
    return best


class TestConstrainedDistance:
    def test_same_category(self):
        assert constrained_distance([0, 0], "chair", [3, 4], "chair") == 5.0

    def test_cross_category(self):
        assert constrained_distance([0, 0], "chair", [0, 0], "table") == math.inf

    def test_identity(self):
        assert constrained_distance([1.5, -2], "bed", [1.5, -2], "bed") == 0.0

    def test_shape_mismatch(self):
        with pytest.raises(ShapeError):
            constrained_distance([0, 0], "a", [0, 0, 0], "a")


class TestBudget:
    def test_proportional_split(self):
        assert allocate_cluster_budget({"A": 30, "B": 10}, 4) == {"A": 3, "B": 1}

    def test_one_each(self):
        counts = {f"c{i:02d}": 5 + i for i in range(11)}
        assert set(allocate_cluster_budget(counts, 11).values()) == {1}

    def test_small_category_gets_its_floor(self):
        # quotas 0.196 and 9.804: A's floor of one cluster is forced, B takes the rest
        assert allocate_cluster_budget({"A": 2, "B": 100}, 10) == {"A": 1, "B": 9}

    def test_cap_binds(self):
        # quotas 4.0 / 1.0 / 1.0 would give A five, but A only has three members
        assert allocate_cluster_budget({"A": 3, "B": 1, "C": 1}, 5) == {"A": 3, "B": 1, "C": 1}

    def test_remainder_tie_goes_to_smaller_name(self):
        assert allocate_cluster_budget({"B": 10, "A": 10}, 3) == {"A": 2, "B": 1}

    def test_too_small_budget(self):
        with pytest.raises(BudgetError):
            allocate_cluster_budget({"A": 5, "B": 5, "C": 5}, 2)

    def test_more_than_identities(self):
        with pytest.raises(BudgetError):
            allocate_cluster_budget({"A": 1, "B": 1}, 3)

    def test_accepts_catalog_and_iterable(self):
        cats = ["x"] * 6 + ["y"] * 2
        assert allocate_cluster_budget(make_catalog(cats), 4) == allocate_cluster_budget(cats, 4) == {"x": 3, "y": 1}

    @settings(max_examples=200, deadline=None)
    @given(
        counts=st.dictionaries(st.sampled_from("ABCDEFGHIJK"), st.integers(1, 60), min_size=1, max_size=11),
        extra=st.integers(0, 200),
    )
    def test_invariants(self, counts, extra):
        k = min(len(counts) + extra, sum(counts.values()))
        alloc = allocate_cluster_budget(counts, k)
        assert sum(alloc.values()) == k
        assert all(1 <= alloc[c] <= counts[c] for c in counts)


class TestSeeding:
    def test_kmeans_pp_picks_distinct_rows(self, rng):
        pts = rng.normal(size=(20, 3))
        init = kmeans_pp_init(pts, 5, np.random.default_rng(0))
        rows = {tuple(r) for r in init}
        assert len(rows) == 5 and rows <= {tuple(p) for p in pts}

    def test_coincident_points(self):
        pts = np.zeros((4, 2))
        assert kmeans_pp_init(pts, 3, np.random.default_rng(0)).shape == (3, 2)

    def test_category_stream_independent_of_order(self):
        a = category_rng(5, "sofa").random(3)
        category_rng(5, "bed").random(10)
        np.testing.assert_array_equal(a, category_rng(5, "sofa").random(3))


class TestLloyd:
    def test_cost_history_non_increasing(self, rng):
        pts = rng.normal(size=(200, 4))
        res = lloyd(pts, kmeans_pp_init(pts, 7, rng), max_iters=100, tol=0.0)
        assert all(b <= a + 1e-9 for a, b in zip(res.history, res.history[1:]))

    def test_empty_cluster_repaired(self):
        pts = np.array([[0.0], [0.1], [0.2], [10.0]])
        init = np.array([[0.1], [50.0], [100.0]])
        res = lloyd(pts, init, max_iters=10)
        assert sorted(np.bincount(res.labels, minlength=3)) == [1, 1, 2]


class TestClusterAttributes:
    def test_budget_equals_count(self, rng):
        X = matrix(rng.normal(size=(6, 2)))
        cats = make_catalog(["a", "a", "a", "b", "b", "b"])
        res = cluster_attributes(X, cats, {"a": 3, "b": 3}, seed=1)
        assert res.cost == 0.0
        assert len(set(res.labels.values())) == 6

    def test_toy_two_clusters_match_enumeration(self):
        pts = np.array([[0, 0], [0, 1], [10, 10], [10, 11]], dtype=float)
        oracle_cost, oracle_labels = best_two_partition(pts)
        assert oracle_cost == pytest.approx(1.0)
        res = cluster_attributes(matrix(pts), make_catalog(["chair"] * 4), {"chair": 2}, seed=0)
        assert res.cost == pytest.approx(oracle_cost)
        got = [res.labels[f"id{n:03d}"] for n in range(4)]
        same = [got[i] == got[j] for i, j in itertools.combinations(range(4), 2)]
        want = [oracle_labels[i] == oracle_labels[j] for i, j in itertools.combinations(range(4), 2)]
        assert same == want

    def test_category_purity_regardless_of_geometry(self, rng):
        # interleaved categories sharing the same locations
        pts = np.repeat(rng.normal(size=(10, 2)), 2, axis=0)
        cats = make_catalog(["a", "b"] * 10)
        res = cluster_attributes(matrix(pts), cats, {"a": 3, "b": 3}, seed=2)
        for attr in set(res.labels.values()):
            members = {cats.category_of(i) for i, a in res.labels.items() if a == attr}
            assert len(members) == 1
            assert members == {res.centroid_category[attr]}

    def test_deterministic_across_threads(self, rng):
        X = matrix(rng.normal(size=(120, 5)))
        cats = make_catalog([f"c{n % 6}" for n in range(120)])
        budget = allocate_cluster_budget(cats, 18)
        one = cluster_attributes(X, cats, budget, seed=3, threads=1)
        four = cluster_attributes(X, cats, budget, seed=3, threads=4)
        assert one.labels == four.labels
        assert one.centroids.tobytes() == four.centroids.tobytes()

    def test_per_category_cost_histories_monotone(self, rng):
        X = matrix(rng.normal(size=(90, 3)))
        cats = make_catalog([f"c{n % 3}" for n in range(90)])
        res = cluster_attributes(X, cats, {"c0": 4, "c1": 4, "c2": 4}, seed=0, tol=0.0)
        for hist in res.cost_history.values():
            assert all(b <= a + 1e-9 for a, b in zip(hist, hist[1:]))

    def test_positive_budget_for_missing_category(self, rng):
        X = matrix(rng.normal(size=(3, 2)))
        with pytest.raises(BudgetError):
            cluster_attributes(X, make_catalog(["a"] * 3), {"a": 1, "ghost": 1})

    def test_category_without_budget(self, rng):
        X = matrix(rng.normal(size=(3, 2)))
        with pytest.raises(BudgetError):
            cluster_attributes(X, make_catalog(["a", "a", "b"]), {"a": 1})

    def test_round_trip(self, tmp_path, rng):
        X = matrix(rng.normal(size=(12, 3)))
        cats = make_catalog(["a"] * 6 + ["b"] * 6)
        res = cluster_attributes(X, cats, {"a": 2, "b": 3}, seed=0)
        save_assignment(res, tmp_path / "attr.jsonl", tmp_path / "cent.fse")
        back = load_assignment(tmp_path / "attr.jsonl", tmp_path / "cent.fse")
        assert back.labels == res.labels
        assert back.centroid_category == res.centroid_category
        np.testing.assert_allclose(back.centroids, res.centroids, rtol=1e-6)


def global_lloyd_inf_metric(points, cats, init_idx, max_iters=100):
    """Literal k-means over all points with the infinite cross-category metric."""
    cents = [points[i].copy() for i in init_idx]
    cent_cat = [cats[i] for i in init_idx]
    labels = None
    for _ in range(max_iters):
        new = []
        for p, c in zip(points, cats):
            d = [constrained_distance(p, c, m, mc) for m, mc in zip(cents, cent_cat)]
            new.append(int(np.argmin(d)))
        if new == labels:
            break
        labels = new
        for j in range(len(cents)):
            members = points[np.asarray(labels) == j]
            if len(members):
                cents[j] = members.mean(axis=0)
    return sum(constrained_distance(p, c, cents[l], cent_cat[l]) ** 2 for p, c, l in zip(points, cats, labels))


class TestEquivalence:
    @settings(max_examples=40, deadline=None)
    @given(seed=st.integers(0, 10_000), n=st.integers(4, 10))
    def test_matches_global_infinite_metric_kmeans(self, seed, n):
        r = np.random.default_rng(seed)
        # round through float32 storage so both sides see identical inputs
        pts = matrix(r.normal(size=(n, 2)) * 3).data.astype(np.float64)
        cats = ["a" if i < n // 2 else "b" for i in range(n)]
        catalog = make_catalog(cats)
        budget = {"a": 2, "b": 2} if n // 2 >= 2 and n - n // 2 >= 2 else {"a": 1, "b": 1}
        res = cluster_attributes(matrix(pts), catalog, budget, seed=seed, n_init=1, tol=0.0)
        # recover each category's seeds from its own stream, as the clusterer does
        init_idx = []
        for cat in ("a", "b"):
            members = np.flatnonzero(np.asarray(cats) == cat)
            seeds = kmeans_pp_init(pts[members], budget[cat], category_rng(seed, cat))
            for s in seeds:
                init_idx.append(int(members[np.flatnonzero((pts[members] == s).all(axis=1))[0]]))
        assert res.cost == pytest.approx(global_lloyd_inf_metric(pts, cats, init_idx), rel=1e-9, abs=1e-12)
