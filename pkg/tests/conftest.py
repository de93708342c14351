from __future__ import annotations

import numpy as np
import pytest

from ideaevo.embedding_space import EmbeddingCache, Embedder, HashingEmbeddingProvider
from ideaevo.graph_store import KnowledgeGraph
from ideaevo.llm_provider import make_client


def unit(*xs):
    v = np.asarray(xs, dtype=float)
    return v / np.linalg.norm(v)


def graph_with_vectors(vectors: dict[str, list[float]], tau: float = 0.8, discipline: str = "Physics"):
    """Graph with one entity per label, each carrying the given embedding."""
    g = KnowledgeGraph(tau=tau, embeddings=EmbeddingCache())
    d = g.add_discipline(discipline)
    g.ingest_entities(d, [(label, "Theory", True) for label in vectors])
    for e in g.entities.values():
        e.embedding_ref = f"test:{e.label}"
        g.embeddings.put(e.embedding_ref, vectors[e.label])
    return g


@pytest.fixture
def embedder():
    return Embedder(HashingEmbeddingProvider(dim=32, seed=0))


@pytest.fixture
def mock_client():
    return make_client("mock", seed=0)


def read_tree(root) -> dict:
    """Relative path -> bytes for every file under ``root``."""
    from pathlib import Path

    root = Path(root)
    return {str(p.relative_to(root)): p.read_bytes() for p in sorted(root.rglob("*")) if p.is_file()}


def small_config(out, **kw):
    from ideaevo.pipeline import RunConfig

    base = dict(topic="grokking in overparameterized networks", target_disciplines=["Physics", "Computer science"],
                rounds=2, ideas_per_round=2, problems_per_round=4, seed=1, output_dir=str(out))
    base.update(kw)
    return RunConfig(**base)


# ---------------------------------------------------------------------------
# acceptance summary: one pass/fail line per criterion

_CRITERIA: dict[int, tuple[str, str]] = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(n, title): acceptance criterion n")


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    report = outcome.get_result()
    marker = item.get_closest_marker("criterion")
    if marker is None:
        return
    n, title = marker.args
    failed = report.failed
    if report.when == "call" or failed:
        previous = _CRITERIA.get(n, ("PASS", title))[0]
        _CRITERIA[n] = ("FAIL" if failed or previous == "FAIL" else "PASS", title)


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(_CRITERIA):
        status, title = _CRITERIA[n]
        terminalreporter.write_line(f"criterion {n}: {status} - {title}")
