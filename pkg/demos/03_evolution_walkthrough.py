"""One evolution step on a small hand-made population, operator by operator.

Shows the log a step writes, then replays that log against the pre-step
graph and checks that it lands on the same graph and clusters.
"""

from __future__ import annotations

import numpy as np

from ideaevo.collaboration import Idea
from ideaevo.embedding_space import EmbeddingCache, Embedder, HashingEmbeddingProvider, cluster_entities
from ideaevo.evolution import EvolutionConfig, evolution_step, replay
from ideaevo.graph_store import KnowledgeGraph
from ideaevo.review import SCORE_FIELDS, Evaluation

LABELS = ["phonon scattering", "grain boundary", "vacancy migration", "Arrhenius law", "band gap",
          "strain engineering", "graphene", "molybdenum disulfide", "Monte Carlo method", "density functional theory"]


def main():
    embedder = Embedder(HashingEmbeddingProvider(dim=32, seed=0))
    graph = KnowledgeGraph(tau=0.8, embeddings=EmbeddingCache())
    disc = graph.add_discipline("Materials science")
    graph.ingest_entities(disc, [(label, "Theory", True) for label in LABELS])
    graph.embed_missing(embedder)
    rng = np.random.default_rng(3)
    for e in graph.entities.values():
        e.frequency = int(rng.integers(0, 4))

    clusters = cluster_entities(sorted(graph.entities), 4, graph.vectors(), discipline=disc.id, seed=0)
    print("population before the step:")
    for c in clusters:
        print(f"  {c.id}: {sorted(graph.entities[m].label for m in c.members)}")

    # two reviewed ideas, each built on a few entities
    evals = []
    for k, (members, score) in enumerate([(sorted(clusters[0].members)[:2], 8.0),
                                          (sorted(clusters[-1].members)[:1], 3.0)]):
        idea = Idea(id=f"idea{k}", title=f"idea {k}", body="built on " + ", ".join(members), source_problem="p", round=1, seed=True,
                    lineage=frozenset(members), embedding=np.ones(2))
        ev = Evaluation(idea_id=idea.id, title=idea.title, scores={f: score for f in SCORE_FIELDS},
                        rationales={f: "hand-set" for f in SCORE_FIELDS}, confidence=3.0,
                        suggestions="none")
        evals.append((idea, ev))

    before = graph.copy()
    cfg = EvolutionConfig(crossover_rate=0.5, variation_rate=0.3, survival_fraction=0.75)
    res = evolution_step(graph, clusters, evals, cfg, seed=7, round=1)

    print("\nstep log:")
    for rec in res.log:
        if rec["op"] == "fitness":
            print("  fitness   " + ", ".join(f"{k}={v:.2f}" for k, v in rec["outputs"].items()))
        elif rec["op"] in ("selection", "pairing", "variation"):
            print(f"  {rec['op']:<9} {rec['outputs']}")
        elif rec["op"] == "crossover":
            print(f"  crossover {rec['pair']}: {[rec['inputs'][c] for c in rec['pair']]} -> "
                  f"{[rec['outputs'][c] for c in rec['pair']]}")
        elif rec["op"] == "prune":
            print(f"  prune     {rec['outputs']}")

    print("\npopulation after the step:")
    for c in res.clusters:
        print(f"  {c.id} (gen {c.generation}): {sorted(graph.entities[m].label for m in c.members)}")

    rebuilt, rclusters = replay(before, res.log)
    same = rebuilt.structurally_equal(graph) and [c.members for c in rclusters] == [c.members for c in res.clusters]
    print(f"\nreplaying the log reproduces the step: {same}")


if __name__ == "__main__":
    main()
