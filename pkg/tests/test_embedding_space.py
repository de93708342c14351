from __future__ import annotations

import math
import random

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from conftest import unit
from ideaevo.embedding_space import (EmbeddingCache, Embedder, EntityCluster, HashingEmbeddingProvider,
                                     aggregate_embedding, cluster_entities, cosine, normalize, top_cluster,
                                     within_cluster_distance)
from ideaevo.errors import EmbeddingMissing, FormatError, ValidationError


def test_cosine_examples():
    assert cosine([1, 0], [1, 0]) == 1.0
    assert cosine([1, 0], [0, 1]) == 0.0
    assert cosine([1, 0], [1, 1]) == pytest.approx(1 / math.sqrt(2), abs=1e-8)
    with pytest.raises(ValidationError):
        cosine([1, 0], [1, 0, 0])
    with pytest.raises(ValidationError):
        cosine([0, 0], [1, 0])


def test_embedder_cache_and_normalization(embedder):
    a, b = embedder.embed_text("aa"), embedder.embed_text("aa")
    assert a is b or np.array_equal(a, b)
    assert abs(np.linalg.norm(a) - 1) < 1e-9
    other = Embedder(HashingEmbeddingProvider(dim=32, seed=0)).embed_text("aa")
    np.testing.assert_array_equal(a, other)
    with pytest.raises(ValidationError):
        embedder.embed_text("   ")


def test_cache_save_load(tmp_path, embedder):
    embedder.embed_many(["x", "y"])
    embedder.cache.save(tmp_path / "c.jsonl")
    back = EmbeddingCache.load(tmp_path / "c.jsonl")
    assert sorted(back.keys()) == sorted(embedder.cache.keys())
    (tmp_path / "bad.jsonl").write_text('{"key": "k", "dim": 2, "values": [1, 0]}\n{oops\n')
    with pytest.raises(FormatError) as info:
        EmbeddingCache.load(tmp_path / "bad.jsonl")
    assert info.value.offset == len('{"key": "k", "dim": 2, "values": [1, 0]}\n')


def test_aggregate_examples():
    v = unit(3, 4)
    np.testing.assert_allclose(aggregate_embedding([v]), v)
    np.testing.assert_allclose(aggregate_embedding([[1, 0], [0, 1]]), [0.70710678, 0.70710678], atol=1e-8)
    with pytest.raises(ValidationError):
        aggregate_embedding([])


@given(st.lists(st.lists(st.floats(-1, 1), min_size=3, max_size=3), min_size=1, max_size=8), st.randoms())
@settings(max_examples=60, deadline=None)
def test_aggregate_permutation_invariant(rows, rnd):
    rows = [r for r in rows if np.linalg.norm(r) > 1e-3]
    if not rows:
        return
    shuffled = rows[:]
    rnd.shuffle(shuffled)
    np.testing.assert_array_equal(aggregate_embedding(rows), aggregate_embedding(shuffled))


def _ids(n):
    return [f"e{i:05d}" for i in range(1, n + 1)]


def best_two_partition(X: np.ndarray) -> float:
    """Exhaustive oracle: lowest within-cluster cosine distance over all 2-partitions."""
    n = len(X)
    best = math.inf
    for mask in range(1, 2 ** (n - 1)):
        labels = [(mask >> i) & 1 for i in range(n)]
        best = min(best, within_cluster_distance(X, labels))
    return best


def test_singleton_cluster():
    (c,) = cluster_entities(["e1"], 1, {"e1": unit(3, 4)}, discipline="d001")
    assert c.members == {"e1"}
    np.testing.assert_allclose(c.centroid, unit(3, 4))


def test_four_points_two_clusters_match_oracle():
    vecs = dict(zip(_ids(4), [unit(1, 0), unit(0.99, 0.14), unit(0, 1), unit(0.14, 0.99)]))
    clusters = cluster_entities(list(vecs), 2, vecs, discipline="d001")
    assert sorted(sorted(c.members) for c in clusters) == [["e00001", "e00002"], ["e00003", "e00004"]]
    X = np.vstack([vecs[i] for i in sorted(vecs)])
    labels = [next(j for j, c in enumerate(clusters) if i in c.members) for i in sorted(vecs)]
    assert within_cluster_distance(X, labels) == pytest.approx(best_two_partition(X), abs=1e-9)


@pytest.mark.parametrize("seed", range(10))
def test_partition_law_and_determinism(seed):
    rng = np.random.default_rng(seed)
    ids = _ids(int(rng.integers(3, 15)))
    vecs = {i: normalize(rng.normal(size=5)) for i in ids}
    a = cluster_entities(ids, None, vecs, discipline="d001", seed=seed)
    b = cluster_entities(list(reversed(ids)), None, vecs, discipline="d001", seed=seed)
    members = [m for c in a for m in c.members]
    assert sorted(members) == sorted(ids) and len(members) == len(set(members))
    assert [c.members for c in a] == [c.members for c in b]


def test_missing_embedding():
    with pytest.raises(EmbeddingMissing):
        cluster_entities(["e1", "e2"], 1, {"e1": unit(1, 0)}, discipline="d001")


def _cluster(cid, vec):
    return EntityCluster(id=cid, discipline="d001", members=frozenset({cid + "-m"}), centroid=np.asarray(vec, float))


def test_top_cluster_examples():
    a, b = _cluster("c0", [1, 0]), _cluster("c1", [0, 1])
    assert top_cluster([b, a], [0.9, 0.436]).id == "c0"
    assert top_cluster([b], [1, 0]).id == "c1"
    tie = top_cluster([_cluster("c9", unit(1, 1)), _cluster("c2", unit(1, 1))], [1, 0])
    assert tie.id == "c2"
    with pytest.raises(ValidationError):
        top_cluster([], [1, 0])


@pytest.mark.parametrize("seed", range(5))
def test_top_cluster_matches_exhaustive_argmax(seed):
    rng = np.random.default_rng(100 + seed)
    clusters = [_cluster(f"c{i:02d}", normalize(rng.normal(size=4))) for i in range(20)]
    topic = rng.normal(size=4)
    oracle = max(clusters, key=lambda c: (float(np.dot(c.centroid, topic) / np.linalg.norm(topic)), -int(c.id[1:])))
    random.Random(seed).shuffle(clusters)
    assert top_cluster(clusters, topic).id == oracle.id
