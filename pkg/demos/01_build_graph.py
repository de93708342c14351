"""Build a discipline knowledge graph from the bundled wiki pages.

Runs fully offline: entity classification goes to the deterministic mock chat
backend and embeddings come from the hashing provider.

    python3 demos/01_build_graph.py [out.json]
"""

from __future__ import annotations

import sys
from collections import Counter

from ideaevo.embedding_space import cluster_entities
from ideaevo.llm_provider import make_client
from ideaevo.pipeline import EmbeddingSettings, build_graph, make_embedder

DISCIPLINES = ["Physics", "Chemistry", "Computer science", "Biology", "Materials science"]


def main(out="runs/demo_graph.json"):
    client = make_client("mock", seed=0)
    # Hashing embeddings only see shared words, so cross-discipline cosines
    # stay well below the usual 0.8 threshold; 0.5 keeps a few links visible.
    graph = build_graph(DISCIPLINES, client=client, embedder=make_embedder(EmbeddingSettings(), 0), tau=0.5)

    print(f"{len(graph.disciplines)} disciplines, {len(graph.entities)} entities, {len(graph.cross)} cross links")
    for d in graph.disciplines.values():
        ents = graph.entities_of(d.id)
        kinds = Counter(e.semantic_type.value for e in ents)
        print(f"  {d.name:<18} {len(ents):3d} entities  {dict(sorted(kinds.items()))}")

    # the strongest links between entities of different disciplines
    ranked = sorted(graph.cross.items(), key=lambda kv: -kv[1])[:5]
    if ranked:
        print("\nstrongest cross-entity links:")
        for (a, b), w in ranked:
            print(f"  {w:.3f}  {graph.entities[a].label}  <->  {graph.entities[b].label}")

    # a first look at how one discipline's entities group together
    d = next(iter(graph.disciplines.values()))
    ids = [e.id for e in graph.entities_of(d.id)]
    clusters = cluster_entities(ids, min(3, len(ids)), graph.vectors(), discipline=d.id, seed=0)
    print(f"\n{d.name} entities in {len(clusters)} clusters:")
    for c in clusters:
        print(f"  {c.id}: " + ", ".join(sorted(graph.entities[m].label for m in c.members)[:6]))

    path = graph.snapshot(out)
    print(f"\nsnapshot written to {path}")


if __name__ == "__main__":
    main(*sys.argv[1:])
