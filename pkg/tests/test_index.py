import numba
import numpy as np
import pytest

from furnset.errors import EmptyPoolError, ShapeError, ValidationError
from furnset.index import (
    RetrievalMatrix,
    batch_search,
    build_index,
    load_retrieval,
    search_topk,
    write_retrieval,
)
from furnset.ingest import Catalog, CatalogEntry, EmbeddingMatrix

from conftest import make_catalog, random_matrix


@numba.njit(cache=True)
def scalar_distances(queries, vectors):
    """Direct subtraction, one element at a time: no dot-product expansion."""
    n, m, d = queries.shape[0], vectors.shape[0], queries.shape[1]
    out = np.empty((n, m))
    for i in range(n):
        for j in range(m):
            acc = 0.0
            for t in range(d):
                diff = np.float64(queries[i, t]) - np.float64(vectors[j, t])
                acc += diff * diff
            out[i, j] = np.sqrt(acc)
    return out


def naive_topk(queries, vectors, ids, k):
    dist = scalar_distances(np.asarray(queries, np.float64), np.asarray(vectors, np.float32).astype(np.float64))
    rows = []
    for r in range(dist.shape[0]):
        order = sorted(range(len(ids)), key=lambda j: (dist[r, j], ids[j]))[:k]
        rows.append(([ids[j] for j in order], dist[r, order]))
    return rows


class TestBuild:
    def test_norms(self, rng):
        X = random_matrix(rng, 3, 4)
        idx = build_index(X, make_catalog(["a"] * 3))
        assert len(idx) == 3
        np.testing.assert_allclose(idx.norms, (X.data.astype(np.float64) ** 2).sum(axis=1), rtol=1e-12)

    def test_immutable(self, rng):
        idx = build_index(random_matrix(rng, 3, 4), make_catalog(["a"] * 3))
        with pytest.raises(ValueError):
            idx.vectors[0, 0] = 1.0

    def test_empty_index_search_errors(self):
        idx = build_index(EmbeddingMatrix.empty(3), make_catalog([]))
        assert len(idx) == 0
        with pytest.raises(EmptyPoolError):
            search_topk(idx, np.zeros(3), 1)

    def test_missing_catalog_entry(self, rng):
        X = random_matrix(rng, 3, 2)
        with pytest.raises(ValidationError) as info:
            build_index(X, make_catalog(["a", "a"]))
        assert "id002" in str(info.value)


class TestSearch:
    def test_exact_hit(self, rng):
        X = random_matrix(rng, 20, 5)
        idx = build_index(X, make_catalog(["a"] * 20))
        top = search_topk(idx, X.data[7], 3)
        assert top[0] == ("id007", 0.0)

    def test_k_larger_than_pool(self, rng):
        idx = build_index(random_matrix(rng, 4, 2), make_catalog(["a"] * 4))
        top = search_topk(idx, np.zeros(2), 10)
        assert len(top) == 4
        assert [d for _, d in top] == sorted(d for _, d in top)

    def test_matches_naive_oracle(self, rng):
        X = random_matrix(rng, 1000, 16)
        idx = build_index(X, make_catalog(["a"] * 1000))
        queries = rng.normal(size=(25, 16))
        for q, (ids, dist) in zip(queries, naive_topk(queries, X.data, X.ids, 10)):
            top = search_topk(idx, q, 10)
            assert [i for i, _ in top] == ids
            np.testing.assert_allclose([d for _, d in top], dist, atol=1e-5)

    def test_ties_resolve_by_id(self):
        X = EmbeddingMatrix(("c", "a", "b", "z"), np.array([[1.0, 0.0], [0.0, 1.0], [-1.0, 0.0], [5.0, 5.0]]))
        idx = build_index(X, _catalog_for(X.ids))
        assert [i for i, _ in search_topk(idx, np.zeros(2), 2)] == ["a", "b"]

    def test_ties_at_kth_position(self):
        ids = tuple(f"v{n}" for n in (9, 3, 7, 1, 5))
        X = EmbeddingMatrix(ids, np.tile([1.0, 0.0], (5, 1)))
        idx = build_index(X, _catalog_for(ids))
        assert [i for i, _ in search_topk(idx, np.zeros(2), 3)] == ["v1", "v3", "v5"]

    def test_category_filter(self, rng):
        X = random_matrix(rng, 30, 3)
        cats = make_catalog(["a", "b", "c"] * 10)
        idx = build_index(X, cats)
        top = search_topk(idx, rng.normal(size=3), 5, category_filter="b")
        assert {cats.category_of(i) for i, _ in top} == {"b"}

    def test_filter_to_empty_pool(self, rng):
        idx = build_index(random_matrix(rng, 3, 2), make_catalog(["a"] * 3))
        with pytest.raises(EmptyPoolError):
            search_topk(idx, np.zeros(2), 1, category_filter="b")

    def test_dim_mismatch(self, rng):
        idx = build_index(random_matrix(rng, 3, 2), make_catalog(["a"] * 3))
        with pytest.raises(ShapeError):
            search_topk(idx, np.zeros(3), 1)

    def test_k_zero(self, rng):
        idx = build_index(random_matrix(rng, 3, 2), make_catalog(["a"] * 3))
        with pytest.raises(ValueError):
            search_topk(idx, np.zeros(2), 0)


def _catalog_for(ids):
    return Catalog(CatalogEntry(i, "a") for i in ids)


class TestBatch:
    def setup_method(self):
        rng = np.random.default_rng(7)
        self.X = random_matrix(rng, 600, 8)
        self.catalog = make_catalog(["a", "b", "c"] * 200)
        self.index = build_index(self.X, self.catalog)
        self.queries = rng.normal(size=(700, 8))

    def test_single_row_equals_search(self):
        res = batch_search(self.index, self.queries[:1], 5)
        top = search_topk(self.index, self.queries[0], 5)
        assert res.candidates[0] == [i for i, _ in top]
        np.testing.assert_array_equal(res.distances[0], [d for _, d in top])

    def test_rows_equal_single_searches(self):
        res = batch_search(self.index, self.queries[:40], 4)
        for r in range(40):
            assert res.candidates[r] == [i for i, _ in search_topk(self.index, self.queries[r], 4)]

    def test_permutation_equivariance(self):
        perm = np.random.default_rng(0).permutation(len(self.queries))
        a = batch_search(self.index, self.queries, 6)
        b = batch_search(self.index, self.queries[perm], 6)
        for new, old in enumerate(perm):
            assert b.candidates[new] == a.candidates[old]
            assert b.distances[new].tobytes() == a.distances[old].tobytes()

    def test_thread_count_does_not_matter(self):
        one = batch_search(self.index, self.queries, 10, threads=1)
        four = batch_search(self.index, self.queries, 10, threads=4)
        assert one.candidates == four.candidates
        assert all(x.tobytes() == y.tobytes() for x, y in zip(one.distances, four.distances))

    def test_rows_sorted_and_distinct(self):
        res = batch_search(self.index, self.queries, 10)
        for cand, dist in zip(res.candidates, res.distances):
            assert len(set(cand)) == len(cand) == 10
            assert (np.diff(dist) >= 0).all()

    def test_filtered_rows_stay_in_category(self):
        cats = ["a", "b", "c", "b"] * 5
        res = batch_search(self.index, self.queries[:20], 5, use_category_filter=True, categories=cats)
        for cand, c in zip(res.candidates, cats):
            assert {self.catalog.category_of(i) for i in cand} == {c}
        plain = batch_search(self.index, self.queries[:20], 5)
        mixed = {self.catalog.category_of(i) for row in plain.candidates for i in row}
        assert len(mixed) == 3

    def test_unknown_category_reported_per_row(self):
        res = batch_search(
            self.index, self.queries[:3], 2, use_category_filter=True, categories=["a", "ghost", "c"],
            instance_ids=["q0", "q1", "q2"],
        )
        assert list(res.errors) == ["q1"]
        assert res.candidates[1] == [] and len(res.candidates[0]) == 2

    def test_filter_without_categories(self):
        with pytest.raises(ValueError):
            batch_search(self.index, self.queries[:2], 2, use_category_filter=True)

    def test_round_trip(self, tmp_path):
        res = batch_search(self.index, EmbeddingMatrix(("x", "y"), self.queries[:2]), 3)
        write_retrieval(tmp_path / "r.jsonl", res)
        back = load_retrieval(tmp_path / "r.jsonl")
        assert back.instance_ids == ["x", "y"]
        assert back.candidates == res.candidates
        np.testing.assert_array_equal(back.distances[1], res.distances[1])

    def test_subset(self):
        res = batch_search(self.index, self.queries[:5], 3)
        sub = res.subset([4, 1])
        assert isinstance(sub, RetrievalMatrix)
        assert sub.candidates == [res.candidates[4], res.candidates[1]]
