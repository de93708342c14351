"""Cluster-level crossover, variation, selection and inheritance, plus the
evaluation-guided step that feeds reviewer scores back into the graph.

Every operator draws from its own generator seeded ``[seed, round, k]`` where
``k`` is the operator's position in the step. The step log records that seed with
the operator's inputs and outputs, which is enough to replay it exactly.
"""

from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass, field
from typing import Iterable, Mapping, Sequence

import numpy as np

from .embedding_space import EntityCluster
from .errors import IntegrityError, ValidationError
from .graph_store import Entity, KnowledgeGraph

log = logging.getLogger(__name__)

NEUTRAL_FITNESS = 0.5
FITNESS_FIELDS = ("novelty", "feasibility", "overall")


@dataclass
class EvolutionConfig:
    crossover_rate: float = 0.3
    variation_rate: float = 0.2
    survival_fraction: float = 0.6
    elite_count: int = 1
    low_frequency_cutoff: int = 2
    variation_mode: str = "promote"

    def __post_init__(self):
        for name in ("crossover_rate", "variation_rate"):
            if not 0.0 <= getattr(self, name) <= 1.0:
                raise ValidationError(f"{name} must lie in [0, 1]")
        if not 0.0 < self.survival_fraction <= 1.0:
            raise ValidationError("survival_fraction must lie in (0, 1]")
        if self.elite_count < 1:
            raise ValidationError("elite_count must be positive")
        if self.low_frequency_cutoff < 1:
            raise ValidationError("low_frequency_cutoff must be positive")
        if self.variation_mode not in ("promote", "invent"):
            raise ValidationError("variation_mode is 'promote' or 'invent'")


@dataclass
class FitnessRecord:
    cluster: str
    fitness: float
    supporting_ideas: frozenset[str] = frozenset()
    round: int = 0

    def __post_init__(self):
        if not 0.0 <= self.fitness <= 1.0:
            raise ValidationError(f"fitness {self.fitness} outside [0, 1]")


def _rng(seed) -> np.random.Generator:
    return seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)


def idea_score(evaluation) -> float:
    """Mean of novelty, feasibility and overall, each rescaled to [0, 1] by its template range."""
    from .review import get_template

    t = get_template(evaluation.template)
    return float(np.mean([t.rescale(f, evaluation.scores[f]) for f in FITNESS_FIELDS]))


def compute_fitness(clusters: Sequence[EntityCluster], evaluations: Iterable[tuple], round: int = 0) -> list[FitnessRecord]:
    """Fitness per cluster from the ideas whose lineage touches it; untouched clusters get 0.5."""
    scored = [(idea.id, frozenset(idea.lineage), idea_score(ev)) for idea, ev in evaluations]
    out = []
    for c in clusters:
        support = [(iid, s) for iid, lineage, s in scored if lineage & c.members]
        fit = float(np.mean([s for _, s in support])) if support else NEUTRAL_FITNESS
        out.append(FitnessRecord(c.id, min(1.0, max(0.0, fit)), frozenset(i for i, _ in support), round))
    return out


def _rebuilt(c: EntityCluster, members: frozenset[str], vectors, **changes) -> EntityCluster:
    if members == c.members or vectors is None:
        return EntityCluster(id=c.id, discipline=c.discipline, members=members, centroid=c.centroid,
                             fitness=changes.get("fitness", c.fitness),
                             generation=changes.get("generation", c.generation))
    return c.with_members(members, vectors, **changes)


def crossover_draw(m1: Sequence[str], m2: Sequence[str], rate: float, seed) -> tuple[list[str], list[str]]:
    """Which members each side sends: per-member Bernoulli(rate) in sorted order, side 1 first.

    If a side would be left empty, one of its marked members (seeded pick)
    stays behind.
    """
    rng = _rng(seed)
    a, b = sorted(m1), sorted(m2)
    send1 = [m for m in a if rng.random() < rate]
    send2 = [m for m in b if rng.random() < rate]
    if len(send1) == len(a) and not send2:
        send1.pop(int(rng.integers(len(send1))))
    if len(send2) == len(b) and not send1:
        send2.pop(int(rng.integers(len(send2))))
    return send1, send2


def crossover(c1: EntityCluster, c2: EntityCluster, rate: float, seed=0,
              vectors: Mapping[str, np.ndarray] | None = None) -> tuple[EntityCluster, EntityCluster]:
    """Swap randomly marked members between two clusters of one discipline."""
    if c1.id == c2.id:
        raise ValidationError("crossover needs two different clusters")
    if c1.discipline != c2.discipline:
        raise ValidationError("crossover is confined to one discipline")
    if len(c1.members) < 2 or len(c2.members) < 2:
        raise ValidationError("crossover needs at least two members per cluster")
    if not 0.0 <= rate <= 1.0:
        raise ValidationError("rate must lie in [0, 1]")
    send1, send2 = crossover_draw(c1.members, c2.members, rate, seed)
    n1 = (c1.members - set(send1)) | set(send2)
    n2 = (c2.members - set(send2)) | set(send1)
    return _rebuilt(c1, frozenset(n1), vectors), _rebuilt(c2, frozenset(n2), vectors)


def variation_draw(size: int, pool: Sequence[tuple[str, int]], rate: float, cutoff: int,
                   seed) -> tuple[list[str], int]:
    """Entities injected into a cluster of ``size`` members, and the number of skipped slots.

    ``pool`` holds ``(entity_id, frequency)``. There are ``ceil(rate*size)``
    slots; each fires with probability ``rate`` and takes the eligible
    (frequency <= cutoff) entity with the lowest frequency, ties to the lowest id.
    """
    rng = _rng(seed)
    slots = math.ceil(rate * size)
    remaining = sorted((f, e) for e, f in pool if f <= cutoff)
    chosen, skipped = [], 0
    for _ in range(slots):
        if rng.random() < rate:
            if remaining:
                chosen.append(remaining.pop(0)[1])
            else:
                skipped += 1
    return chosen, skipped


def variation(cluster: EntityCluster, pool: Sequence[Entity], rate: float, cutoff: int, seed=0,
              vectors: Mapping[str, np.ndarray] | None = None, events: list | None = None) -> EntityCluster:
    """Inject new or rarely used entities into ``cluster``."""
    cand = [(e.id, e.frequency) for e in pool if e.id not in cluster.members]
    chosen, skipped = variation_draw(len(cluster.members), cand, rate, cutoff, seed)
    if skipped and events is not None:
        events.append({"op": "variation.skip", "cluster": cluster.id, "slots": skipped})
    if not chosen:
        return cluster
    return _rebuilt(cluster, cluster.members | set(chosen), vectors)


def selection(records: Sequence[FitnessRecord], survival_fraction: float) -> list[str]:
    """Ids of the top ``ceil(fraction * n)`` clusters by fitness (ties to the lower id); never empty."""
    if not records:
        raise ValidationError("selection over no clusters")
    if not 0.0 < survival_fraction <= 1.0:
        raise ValidationError("survival_fraction must lie in (0, 1]")
    keep = max(1, math.ceil(survival_fraction * len(records)))
    ranked = sorted(records, key=lambda r: (-r.fitness, r.cluster))
    return [r.cluster for r in ranked[:keep]]


def inheritance(survivors: Sequence[EntityCluster], elite_count: int) -> tuple[list[EntityCluster], list[EntityCluster]]:
    """Split survivors into verbatim elite copies and clusters open to operators.

    Both lists carry the next generation index.
    """
    if not survivors:
        raise ValidationError("inheritance needs survivors")
    ranked = sorted(survivors, key=lambda c: (-(c.fitness if c.fitness is not None else NEUTRAL_FITNESS), c.id))
    bump = lambda c: EntityCluster(id=c.id, discipline=c.discipline, members=c.members,  # noqa: E731
                                   centroid=c.centroid, fitness=c.fitness, generation=c.generation + 1)
    return [bump(c) for c in ranked[:elite_count]], [bump(c) for c in ranked[elite_count:]]


# --------------------------------------------------------------------------
# the step


@dataclass
class EvolutionResult:
    clusters: list[EntityCluster]
    fitness: list[FitnessRecord]
    log: list[dict]
    pruned: list[str] = field(default_factory=list)
    events: list[dict] = field(default_factory=list)


def _reintegration(scored: Sequence[tuple[str, list[str], float, float]]) -> tuple[float | None, dict[str, float]]:
    """``scored`` rows are ``(idea_id, lineage, overall, score01)``.

    Entities in the lineage of ideas whose overall score is strictly above
    the median gain one frequency point; their fitness becomes the mean score
    of those ideas.
    """
    if not scored:
        return None, {}
    med = float(np.median([row[2] for row in scored]))
    acc: dict[str, list[float]] = {}
    for _, lineage, overall, s in scored:
        if overall > med:
            for e in lineage:
                acc.setdefault(e, []).append(s)
    return med, {e: float(np.mean(v)) for e, v in sorted(acc.items())}


def _prune_candidates(entities: Mapping[str, tuple[int, list[str]]], disciplines: set[str], kept: set[str],
                      cutoff: int) -> list[str]:
    """``entities`` maps id to ``(frequency, disciplines)``."""
    return sorted(e for e, (freq, ds) in entities.items()
                  if set(ds) & disciplines and e not in kept and freq < cutoff)


def evolution_step(graph: KnowledgeGraph, clusters: Sequence[EntityCluster], evaluations: Sequence[tuple],
                   config: EvolutionConfig | None = None, seed: int = 0, *, round: int = 0,
                   protected: Iterable[str] = (), inventor=None) -> EvolutionResult:
    """Fitness, selection, inheritance, crossover, variation, re-integration and pruning.

    All graph changes are made on a copy and swapped in only when the whole
    step succeeded. ``protected`` entity ids are never pruned (members of
    other disciplines' populations). ``inventor`` (used only when
    ``variation_mode == "invent"``) maps ``(discipline_name, graph) -> list of
    (label, semantic_type, relevant)`` candidates which pass the usual
    relevance filter before joining the variation pool; it must also embed them.
    """
    config = config or EvolutionConfig()
    if not clusters:
        raise ValidationError("evolution_step needs clusters")
    work = graph.copy()
    for c in clusters:
        missing = [m for m in c.members if m not in work.entities]
        if missing:
            raise ValidationError(f"cluster {c.id} references unknown entities {missing}")
    records: list[dict] = []
    events: list[dict] = []
    counter = iter(range(1_000_000))

    def op_seed() -> list[int]:
        return [int(seed), int(round), next(counter)]

    evaluations = list(evaluations)
    fit = compute_fitness(clusters, evaluations, round)
    records.append({"op": "fitness", "inputs": {"clusters": [c.id for c in clusters]},
                    "outputs": {r.cluster: r.fitness for r in fit},
                    "support": {r.cluster: sorted(r.supporting_ideas) for r in fit}})
    fmap = {r.cluster: r.fitness for r in fit}
    by_id = {c.id: EntityCluster(id=c.id, discipline=c.discipline, members=c.members, centroid=c.centroid,
                                 fitness=fmap[c.id], generation=c.generation) for c in clusters}

    survivors = selection(fit, config.survival_fraction)
    records.append({"op": "selection", "inputs": {"fitness": fmap, "fraction": config.survival_fraction},
                    "outputs": survivors})
    elites, rest = inheritance([by_id[s] for s in survivors], config.elite_count)
    records.append({"op": "inheritance", "inputs": {"survivors": survivors, "elite_count": config.elite_count},
                    "outputs": {"elites": [c.id for c in elites], "rest": [c.id for c in rest]}})

    vectors = work.vectors()
    current = {c.id: c for c in [*elites, *rest]}

    # crossover over seeded pairings inside each discipline
    for disc in sorted({c.discipline for c in rest}):
        ids = sorted(c.id for c in rest if c.discipline == disc)
        if len(ids) < 2:
            continue
        s = op_seed()
        order = [ids[i] for i in np.random.default_rng(s).permutation(len(ids))]
        records.append({"op": "pairing", "seed": s, "inputs": ids, "outputs": order})
        for a, b in zip(order[0::2], order[1::2]):
            ca, cb = current[a], current[b]
            if len(ca.members) < 2 or len(cb.members) < 2:
                events.append({"op": "crossover.skip", "pair": [a, b], "reason": "fewer than two members"})
                continue
            s = op_seed()
            na, nb = crossover(ca, cb, config.crossover_rate, s, vectors)
            records.append({"op": "crossover", "seed": s, "pair": [a, b],
                            "inputs": {"rate": config.crossover_rate, a: sorted(ca.members), b: sorted(cb.members)},
                            "outputs": {a: sorted(na.members), b: sorted(nb.members)}})
            current[a], current[b] = na, nb

    if config.variation_mode == "invent" and inventor is not None:
        for disc in sorted({c.discipline for c in rest}):
            before = set(work.entities)
            cands = list(inventor(work.disciplines[disc].name, work))
            added = work.ingest_entities(disc, cands)
            new = [e for e in added if e.id not in before]
            for e in new:
                if e.embedding_ref is None:
                    raise ValidationError("inventor must embed the entities it proposes")
            records.append({"op": "invent", "inputs": {"discipline": disc, "candidates": [list(c) for c in cands]},
                            "outputs": [{"id": e.id, "label": e.label, "embedding_ref": e.embedding_ref,
                                         "vector": [float(x) for x in work.vector(e.id)]} for e in new]})
        vectors = work.vectors()

    for cid in sorted(c.id for c in rest):
        c = current[cid]
        in_clusters = {m for x in current.values() for m in x.members}
        pool = [e for e in work.entities_of(c.discipline) if e.id not in in_clusters]
        s = op_seed()
        nc = variation(c, pool, config.variation_rate, config.low_frequency_cutoff, s, vectors, events)
        records.append({"op": "variation", "seed": s,
                        "inputs": {"cluster": sorted(c.members), "pool": [[e.id, e.frequency] for e in pool],
                                   "rate": config.variation_rate, "cutoff": config.low_frequency_cutoff},
                        "outputs": sorted(nc.members)})
        current[cid] = nc

    # re-integrate entities behind well-reviewed ideas
    scored = [(idea.id, sorted(e for e in idea.lineage if e in work.entities), ev.scores["overall"], idea_score(ev))
              for idea, ev in evaluations]
    med, updates = _reintegration(scored)
    for e, f in updates.items():
        work.entities[e].frequency += 1
        work.entities[e].fitness = f
    records.append({"op": "reintegrate", "inputs": {"scored": [list(r) for r in scored]},
                    "outputs": {"median": med, "fitness": updates}})

    kept = {m for c in current.values() for m in c.members} | set(protected)
    ents = {e.id: (e.frequency, sorted(e.disciplines)) for e in work.entities.values()}
    discs = {c.discipline for c in clusters}
    doomed = _prune_candidates(ents, discs, kept, config.low_frequency_cutoff)
    work.prune_entities(doomed)
    records.append({"op": "prune", "inputs": {"entities": {k: [v[0], v[1]] for k, v in ents.items()},
                                              "disciplines": sorted(discs), "kept": sorted(kept),
                                              "cutoff": config.low_frequency_cutoff},
                    "outputs": doomed})

    out = sorted(current.values(), key=lambda c: c.id)
    for c in out:
        if not c.members <= work.entities.keys():
            raise IntegrityError("no orphaned cluster members", c.id)
    records.append({"op": "result", "outputs": [c.to_dict() for c in out]})
    graph.restore_from(work)
    return EvolutionResult(clusters=out, fitness=fit, log=records, pruned=doomed, events=events)


# --------------------------------------------------------------------------
# replay


class ReplayMismatch(IntegrityError):
    pass


def write_log(records: Sequence[dict], path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for rec in records:
            fh.write(json.dumps(rec, sort_keys=True) + "\n")


def read_log(path) -> list[dict]:
    with open(path, encoding="utf-8") as fh:
        return [json.loads(line) for line in fh if line.strip()]


def replay(graph: KnowledgeGraph, records: Sequence[dict]) -> tuple[KnowledgeGraph, list[EntityCluster]]:
    """Re-execute a logged step against the pre-step ``graph`` (left untouched).

    Every seeded operator is re-run from its logged inputs and checked
    against its logged outputs; graph mutations are recomputed, not copied.
    Returns the reconstructed post-step graph and clusters.
    """
    g = graph.copy()
    clusters: list[EntityCluster] = []
    for rec in records:
        op = rec["op"]
        if op == "selection":
            fit = [FitnessRecord(k, v) for k, v in rec["inputs"]["fitness"].items()]
            got = selection(fit, rec["inputs"]["fraction"])
            if got != rec["outputs"]:
                raise ReplayMismatch("selection replays identically", str(got))
        elif op == "pairing":
            ids = rec["inputs"]
            got = [ids[i] for i in np.random.default_rng(rec["seed"]).permutation(len(ids))]
            if got != rec["outputs"]:
                raise ReplayMismatch("pairing replays identically", str(got))
        elif op == "crossover":
            inputs = dict(rec["inputs"])
            rate = inputs.pop("rate")
            a, b = rec["pair"]
            ma, mb = inputs[a], inputs[b]
            s1, s2 = crossover_draw(ma, mb, rate, rec["seed"])
            got = {a: sorted((set(ma) - set(s1)) | set(s2)), b: sorted((set(mb) - set(s2)) | set(s1))}
            if got != rec["outputs"]:
                raise ReplayMismatch("crossover replays identically", str(got))
        elif op == "invent":
            disc = rec["inputs"]["discipline"]
            g.ingest_entities(disc, [tuple(c) for c in rec["inputs"]["candidates"]])
            for new in rec["outputs"]:
                ent = g.entities.get(new["id"])
                if ent is None or ent.label != new["label"]:
                    raise ReplayMismatch("invented entities replay identically", new["id"])
                ent.embedding_ref = new["embedding_ref"]
                g.embeddings.put(new["embedding_ref"], new["vector"])
        elif op == "variation":
            inp = rec["inputs"]
            chosen, _ = variation_draw(len(inp["cluster"]), [tuple(p) for p in inp["pool"]], inp["rate"],
                                       inp["cutoff"], rec["seed"])
            got = sorted(set(inp["cluster"]) | set(chosen))
            if got != rec["outputs"]:
                raise ReplayMismatch("variation replays identically", str(got))
        elif op == "reintegrate":
            med, updates = _reintegration([tuple(r) for r in rec["inputs"]["scored"]])
            if med != rec["outputs"]["median"] or updates != rec["outputs"]["fitness"]:
                raise ReplayMismatch("re-integration replays identically")
            for e, f in updates.items():
                g.entities[e].frequency += 1
                g.entities[e].fitness = f
        elif op == "prune":
            inp = rec["inputs"]
            ents = {k: (v[0], v[1]) for k, v in inp["entities"].items()}
            doomed = _prune_candidates(ents, set(inp["disciplines"]), set(inp["kept"]), inp["cutoff"])
            if doomed != rec["outputs"]:
                raise ReplayMismatch("pruning replays identically", str(doomed))
            g.prune_entities(doomed)
        elif op == "result":
            clusters = []
            for d in rec["outputs"]:
                c = EntityCluster.from_dict(d)
                if not c.members <= g.entities.keys():
                    raise ReplayMismatch("replayed clusters resolve in the graph", c.id)
                clusters.append(c)
    return g, clusters
