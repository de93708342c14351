"""Embedding acquisition, cosine geometry and entity clustering.

Vectors are plain 1-D ``numpy`` float arrays. Everything handed out by an
:class:`Embedder` is L2-normalized.
"""

from __future__ import annotations

import hashlib
import json
import math
import os
import re
import threading
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Iterable, Mapping, Sequence

import numpy as np

from .errors import EmbeddingMissing, FormatError, ProviderError, ValidationError

NORM_TOL = 1e-9


def _as_vector(v) -> np.ndarray:
    arr = np.asarray(v, dtype=float)
    if arr.ndim != 1 or arr.size == 0:
        raise ValidationError("embedding must be a non-empty 1-D vector")
    if not np.all(np.isfinite(arr)):
        raise ValidationError("embedding has NaN/Inf components")
    return arr


def normalize(v) -> np.ndarray:
    arr = _as_vector(v)
    n = float(np.linalg.norm(arr))
    if n == 0.0:
        raise ValidationError("cannot normalize a zero vector")
    return arr / n


def cosine(a, b) -> float:
    """Cosine similarity clipped to [-1, 1]."""
    a = _as_vector(a)
    b = _as_vector(b)
    if a.shape != b.shape:
        raise ValidationError(f"dimension mismatch: {a.size} vs {b.size}")
    na = float(np.linalg.norm(a))
    nb = float(np.linalg.norm(b))
    if na == 0.0 or nb == 0.0:
        raise ValidationError("cosine undefined for a zero vector")
    return max(-1.0, min(1.0, float(np.dot(a, b)) / (na * nb)))


def _exact_sum(vectors: Sequence[np.ndarray]) -> np.ndarray:
    # fsum is correctly rounded, hence independent of input order
    stacked = np.vstack(vectors)
    return np.array([math.fsum(col) for col in stacked.T])


def aggregate_embedding(vectors: Sequence) -> np.ndarray:
    """Normalized arithmetic mean; permutation-invariant bit for bit."""
    vecs = [_as_vector(v) for v in vectors]
    if not vecs:
        raise ValidationError("aggregate of an empty set")
    if len({v.size for v in vecs}) != 1:
        raise ValidationError("aggregate over mixed dimensions")
    total = _exact_sum(vecs)
    if float(np.linalg.norm(total)) == 0.0:
        # order-free fallback for a cancelling set
        return normalize(min(vecs, key=lambda v: tuple(v)))
    return normalize(total)


def centroid(vectors: Sequence[np.ndarray]) -> np.ndarray:
    """Renormalized mean of unit vectors; zero mean falls back to the first member."""
    total = _exact_sum(vectors)
    if float(np.linalg.norm(total)) == 0.0:
        return normalize(vectors[0])
    return normalize(total)


# --------------------------------------------------------------------------
# providers and cache


def content_hash(text: str) -> str:
    return hashlib.sha256(text.encode("utf-8")).hexdigest()


class HashingEmbeddingProvider:
    """Seeded bag-of-tokens generator used as the offline provider.

    Each token maps to a fixed Gaussian vector derived from ``(seed, token)``;
    a text embeds to the sum of its token vectors. Texts sharing vocabulary
    therefore land close together, which keeps clustering meaningful offline.
    """

    provider_id = "mock"

    def __init__(self, dim: int = 64, seed: int = 0):
        if dim < 1:
            raise ValidationError("dim must be positive")
        self.dim = dim
        self.seed = seed
        self.model_id = f"hash-{dim}"
        self._token_cache: dict[str, np.ndarray] = {}

    def _token_vector(self, token: str) -> np.ndarray:
        vec = self._token_cache.get(token)
        if vec is None:
            digest = hashlib.sha256(f"{self.seed}\x00{token}".encode()).digest()
            rng = np.random.default_rng(int.from_bytes(digest[:16], "little"))
            vec = rng.standard_normal(self.dim)
            self._token_cache[token] = vec
        return vec

    def embed_batch(self, texts: Sequence[str]) -> list[np.ndarray]:
        out = []
        for text in texts:
            tokens = re.findall(r"[a-z0-9]+", text.lower()) or [text]
            out.append(np.sum([self._token_vector(t) for t in tokens], axis=0))
        return out


class HTTPEmbeddingProvider:
    """OpenAI-compatible ``/embeddings`` client."""

    provider_id = "http"

    def __init__(self, base_url: str, model_id: str, api_key_env: str = "OPENAI_API_KEY",
                 timeout: float = 30.0, max_retries: int = 3, sleep: Callable[[float], None] | None = None):
        import time

        self.base_url = base_url.rstrip("/")
        self.model_id = model_id
        self.api_key_env = api_key_env
        self.timeout = timeout
        self.max_retries = max_retries
        self._sleep = sleep or time.sleep

    def embed_batch(self, texts: Sequence[str]) -> list[np.ndarray]:
        import httpx

        headers = {"Authorization": f"Bearer {os.environ.get(self.api_key_env, '')}"}
        payload = {"model": self.model_id, "input": list(texts)}
        last = None
        for attempt in range(self.max_retries + 1):
            try:
                resp = httpx.post(f"{self.base_url}/embeddings", json=payload,
                                  headers=headers, timeout=self.timeout)
            except httpx.HTTPError as exc:
                last = type(exc).__name__
            else:
                if resp.status_code == 200:
                    data = sorted(resp.json()["data"], key=lambda d: d["index"])
                    return [np.asarray(d["embedding"], dtype=float) for d in data]
                last = resp.status_code
                if resp.status_code != 429 and resp.status_code < 500:
                    break
            if attempt < self.max_retries:
                self._sleep(min(2.0 ** attempt, 30.0))
        raise ProviderError(f"embedding request failed: {last}", status=last)


class EmbeddingCache:
    """Thread-safe ``key -> unit vector`` store persisted as JSON lines."""

    def __init__(self, vectors: Mapping[str, np.ndarray] | None = None):
        self._data: dict[str, np.ndarray] = dict(vectors or {})
        self._lock = threading.Lock()
        self.dim: int | None = None
        for v in self._data.values():
            self._check_dim(v)

    def _check_dim(self, v: np.ndarray) -> None:
        if self.dim is None:
            self.dim = v.size
        elif v.size != self.dim:
            raise ValidationError(f"cache holds dim {self.dim}, got {v.size}")

    def __contains__(self, key: str) -> bool:
        return key in self._data

    def __len__(self) -> int:
        return len(self._data)

    def get(self, key: str) -> np.ndarray | None:
        return self._data.get(key)

    def put(self, key: str, vector) -> np.ndarray:
        vec = normalize(vector)
        with self._lock:
            self._check_dim(vec)
            self._data[key] = vec
        return vec

    def keys(self) -> list[str]:
        return sorted(self._data)

    def copy(self) -> "EmbeddingCache":
        return EmbeddingCache({k: v.copy() for k, v in self._data.items()})

    def save(self, path) -> None:
        path = Path(path)
        tmp = path.with_suffix(path.suffix + ".tmp")
        with open(tmp, "w", encoding="utf-8") as fh:
            for key in sorted(self._data):
                vec = self._data[key]
                fh.write(json.dumps({"key": key, "dim": int(vec.size),
                                     "values": [float(x) for x in vec]}) + "\n")
        os.replace(tmp, path)

    @classmethod
    def load(cls, path) -> "EmbeddingCache":
        raw = Path(path).read_bytes()
        cache = cls()
        offset = 0
        for line in raw.splitlines(keepends=True):
            if line.strip():
                try:
                    rec = json.loads(line)
                    values = np.asarray(rec["values"], dtype=float)
                    if values.size != rec["dim"]:
                        raise ValueError("dim does not match values")
                except (ValueError, KeyError, TypeError) as exc:
                    raise FormatError(f"bad embedding record: {exc}", offset) from exc
                cache._check_dim(values)
                cache._data[rec["key"]] = values
            offset += len(line)
        return cache


class Embedder:
    """Provider + cache facade; the only way the engine obtains vectors."""

    def __init__(self, provider=None, cache: EmbeddingCache | None = None):
        self.provider = provider or HashingEmbeddingProvider()
        self.cache = cache if cache is not None else EmbeddingCache()

    def key_for(self, text: str) -> str:
        return f"{self.provider.provider_id}:{self.provider.model_id}:{content_hash(text)}"

    def embed_text(self, text: str) -> np.ndarray:
        return self.embed_many([text])[0]

    def embed_many(self, texts: Sequence[str]) -> list[np.ndarray]:
        for t in texts:
            if not isinstance(t, str) or not t.strip():
                raise ValidationError("cannot embed empty text")
        keys = [self.key_for(t) for t in texts]
        missing = sorted({(k, t) for k, t in zip(keys, texts) if k not in self.cache})
        if missing:
            vectors = self.provider.embed_batch([t for _, t in missing])
            for (k, _), v in zip(missing, vectors):
                self.cache.put(k, v)
        return [self.cache.get(k) for k in keys]

    def ref_for(self, text: str) -> str:
        """Embed ``text`` and return its cache key."""
        self.embed_text(text)
        return self.key_for(text)


# --------------------------------------------------------------------------
# clustering


@dataclass
class EntityCluster:
    id: str
    discipline: str
    members: frozenset[str]
    centroid: np.ndarray
    fitness: float | None = None
    generation: int = 0

    def __post_init__(self):
        self.members = frozenset(self.members)
        if not self.members:
            raise ValidationError(f"cluster {self.id} has no members")

    def with_members(self, members: Iterable[str], vectors: Mapping[str, np.ndarray],
                     **changes) -> "EntityCluster":
        members = frozenset(members)
        cen = centroid([vectors[m] for m in sorted(members)])
        return EntityCluster(id=changes.pop("id", self.id), discipline=self.discipline,
                             members=members, centroid=cen,
                             fitness=changes.pop("fitness", self.fitness),
                             generation=changes.pop("generation", self.generation))

    def to_dict(self) -> dict:
        return {"id": self.id, "discipline": self.discipline, "members": sorted(self.members),
                "centroid": [float(x) for x in self.centroid], "fitness": self.fitness,
                "generation": self.generation}

    @classmethod
    def from_dict(cls, d: dict) -> "EntityCluster":
        return cls(id=d["id"], discipline=d["discipline"], members=frozenset(d["members"]),
                   centroid=np.asarray(d["centroid"], dtype=float), fitness=d.get("fitness"),
                   generation=d.get("generation", 0))


def within_cluster_distance(X: np.ndarray, labels: Sequence[int]) -> float:
    """Total cosine distance of each row of ``X`` to its cluster's centroid."""
    labels = np.asarray(labels)
    total = 0.0
    for c in np.unique(labels):
        rows = X[labels == c]
        cen = centroid(list(rows))
        total += float(np.sum(1.0 - rows @ cen))
    return total


def _assign(X: np.ndarray, C: np.ndarray) -> np.ndarray:
    return np.argmax(X @ C.T, axis=1)


def _fill_empty(X: np.ndarray, labels: np.ndarray, k: int) -> np.ndarray:
    labels = labels.copy()
    for c in range(k):
        if np.any(labels == c):
            continue
        sizes = np.bincount(labels, minlength=k)
        donors = np.flatnonzero(sizes[labels] > 1)
        cents = {d: centroid(list(X[labels == d])) for d in np.unique(labels[donors])}
        dist = [1.0 - float(X[i] @ cents[labels[i]]) for i in donors]
        labels[donors[int(np.argmax(dist))]] = c
    return labels


def _hartigan(X: np.ndarray, labels: np.ndarray, k: int) -> np.ndarray:
    """Single-point moves that strictly lower the objective."""
    labels = labels.copy()
    sums = np.array([X[labels == c].sum(axis=0) for c in range(k)])
    sizes = np.bincount(labels, minlength=k)
    improved = True
    while improved:
        improved = False
        for i in range(len(X)):
            a = labels[i]
            if sizes[a] == 1:
                continue
            base_a = np.linalg.norm(sums[a])
            loss_a = np.linalg.norm(sums[a] - X[i]) - base_a
            best_gain, best_b = 1e-12, None
            for b in range(k):
                if b == a:
                    continue
                gain = loss_a + np.linalg.norm(sums[b] + X[i]) - np.linalg.norm(sums[b])
                if gain > best_gain:
                    best_gain, best_b = gain, b
            if best_b is not None:
                sums[a] -= X[i]
                sums[best_b] += X[i]
                sizes[a] -= 1
                sizes[best_b] += 1
                labels[i] = best_b
                improved = True
    return labels


def _kmeans_once(X: np.ndarray, k: int, rng: np.random.Generator, max_iter: int = 100) -> np.ndarray:
    n = len(X)
    # k-means++ seeding under cosine distance
    first = int(rng.integers(n))
    chosen = [first]
    d = 1.0 - X @ X[first]
    for _ in range(1, k):
        w = np.clip(d, 0.0, None)
        if w.sum() <= 0:
            rest = [i for i in range(n) if i not in chosen]
            nxt = int(rest[int(rng.integers(len(rest)))])
        else:
            nxt = int(rng.choice(n, p=w / w.sum()))
        chosen.append(nxt)
        d = np.minimum(d, 1.0 - X @ X[nxt])
    C = X[chosen].copy()
    labels = _fill_empty(X, _assign(X, C), k)
    for _ in range(max_iter):
        C = np.array([centroid(list(X[labels == c])) for c in range(k)])
        new = _fill_empty(X, _assign(X, C), k)
        if np.array_equal(new, labels):
            break
        labels = new
    return _fill_empty(X, _hartigan(X, labels, k), k)


def spherical_kmeans(X: np.ndarray, k: int, seed: int = 0, restarts: int = 20) -> np.ndarray:
    """Seeded cosine k-means; the best of ``restarts`` runs by within-cluster distance.

    Labels are canonicalized so that cluster 0 holds row 0, the next new
    label appears at the next unseen row, and so on.
    """
    X = np.asarray(X, dtype=float)
    n = len(X)
    if not 1 <= k <= n:
        raise ValidationError(f"need 1 <= k <= n, got k={k}, n={n}")
    if k == 1:
        return np.zeros(n, dtype=int)
    rng = np.random.default_rng(seed)
    best, best_cost = None, math.inf
    for _ in range(max(1, restarts)):
        labels = _kmeans_once(X, k, rng)
        cost = within_cluster_distance(X, labels)
        if cost < best_cost - 1e-12:
            best, best_cost = labels, cost
    remap: dict[int, int] = {}
    for lab in best:
        remap.setdefault(int(lab), len(remap))
    return np.array([remap[int(lab)] for lab in best])


def default_k(n: int) -> int:
    return max(1, math.ceil(math.sqrt(n)))


def cluster_vectors(ids: Sequence[str], vectors: Mapping[str, np.ndarray], k: int | None,
                    seed: int = 0, restarts: int = 20) -> list[list[str]]:
    """Partition ``ids`` into ``min(k, len(ids))`` groups, each sorted, groups ordered by first id."""
    ids = sorted(ids)
    if not ids:
        raise ValidationError("nothing to cluster")
    if k is None:
        k = default_k(len(ids))
    if k < 1:
        raise ValidationError("k must be positive")
    X = np.vstack([normalize(vectors[i]) for i in ids])
    labels = spherical_kmeans(X, min(k, len(ids)), seed=seed, restarts=restarts)
    groups: dict[int, list[str]] = {}
    for i, lab in zip(ids, labels):
        groups.setdefault(int(lab), []).append(i)
    return [groups[g] for g in sorted(groups)]


def cluster_entities(entities, k: int | None, vectors: Mapping[str, np.ndarray] | Callable,
                     *, discipline: str, seed: int = 0, generation: int = 0,
                     restarts: int = 20, id_prefix: str | None = None) -> list[EntityCluster]:
    """Cluster entities of one discipline into semantic groups.

    ``vectors`` maps entity id to embedding (or is a callable doing so).
    Cluster ids are ``<prefix>-c000``, ``<prefix>-c001``... in order of each
    cluster's smallest member id.
    """
    ents = list(entities)
    if not ents:
        raise ValidationError("cluster_entities needs at least one entity")
    lookup = vectors if callable(vectors) else vectors.get
    vecs = {}
    for e in ents:
        eid = getattr(e, "id", e)
        v = lookup(eid)
        if v is None:
            raise EmbeddingMissing(eid)
        vecs[eid] = v
    groups = cluster_vectors(list(vecs), vecs, k, seed=seed, restarts=restarts)
    prefix = id_prefix or discipline
    return [EntityCluster(id=f"{prefix}-c{i:03d}", discipline=discipline, members=frozenset(g),
                          centroid=centroid([normalize(vecs[m]) for m in g]), generation=generation)
            for i, g in enumerate(groups)]


def top_cluster(clusters: Sequence[EntityCluster], topic_embedding) -> EntityCluster:
    """Cluster whose centroid is most cosine-similar to the topic; ties go to the lowest id."""
    if not clusters:
        raise ValidationError("top_cluster over an empty list")
    best, best_sim = None, -math.inf
    for c in sorted(clusters, key=lambda c: c.id):
        sim = cosine(c.centroid, topic_embedding)
        if sim > best_sim:
            best, best_sim = c, sim
    return best
