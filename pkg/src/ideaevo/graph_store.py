"""Two-layer knowledge graph: static disciplines over an evolving entity layer."""

from __future__ import annotations

import copy
import json
import logging
import os
import re
from dataclasses import dataclass, field
from enum import Enum
from html.parser import HTMLParser
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .embedding_space import EmbeddingCache, cosine
from .errors import (DuplicateDiscipline, EmbeddingMissing, FormatError, IntegrityError,
                     NotFound, SourceUnavailable, ValidationError)

log = logging.getLogger(__name__)

SCHEMA_VERSION = 1
DEFAULT_TAU = 0.8
WEIGHT_TOL = 1e-9


class SemanticType(str, Enum):
    THEORY = "Theory"
    MODEL = "Model"
    MATERIAL = "Material"
    PHENOMENON = "Phenomenon"
    METHOD = "Method"
    OTHER = "Other"

    @classmethod
    def parse(cls, value) -> "SemanticType":
        if isinstance(value, cls):
            return value
        for member in cls:
            if str(value).strip().lower() == member.value.lower():
                return member
        raise ValidationError(f"unknown semantic type {value!r}")


class EdgeKind(str, Enum):
    HAS_ENTITY = "HasEntity"
    CROSS_ENTITY = "CrossEntity"


@dataclass(frozen=True)
class Discipline:
    id: str
    name: str
    layer: int = 1


@dataclass
class Entity:
    id: str
    label: str
    semantic_type: SemanticType
    disciplines: set[str] = field(default_factory=set)
    embedding_ref: str | None = None
    frequency: int = 0
    fitness: float | None = None

    def to_dict(self) -> dict:
        return {"id": self.id, "label": self.label, "semantic_type": self.semantic_type.value,
                "disciplines": sorted(self.disciplines), "embedding_ref": self.embedding_ref,
                "frequency": self.frequency, "fitness": self.fitness}


@dataclass(frozen=True)
class GraphEdge:
    kind: EdgeKind
    endpoints: tuple[str, str]
    weight: float | None = None


def label_key(label: str) -> str:
    return " ".join(label.split()).casefold()


class KnowledgeGraph:
    """Disciplines, entities, ``HasEntity`` membership and thresholded ``CrossEntity`` links.

    ``HasEntity`` edges are derived from each entity's discipline set, so the
    two can never disagree. Cross edges are keyed by the sorted endpoint pair
    and read back symmetrically.

    Mutation is single-writer: the pipeline only mutates between phases.
    """

    def __init__(self, tau: float = DEFAULT_TAU, embeddings: EmbeddingCache | None = None):
        self.tau = tau
        self.disciplines: dict[str, Discipline] = {}
        self.entities: dict[str, Entity] = {}
        self.cross: dict[tuple[str, str], float] = {}
        self.embeddings = embeddings if embeddings is not None else EmbeddingCache()
        self.warnings: list[dict] = []
        self._next_discipline = 1
        self._next_entity = 1

    # ---- disciplines -------------------------------------------------

    def add_discipline(self, name: str) -> Discipline:
        name = (name or "").strip()
        if not name:
            raise ValidationError("discipline name must be non-empty")
        if self.find_discipline(name) is not None:
            raise DuplicateDiscipline(name)
        d = Discipline(id=f"d{self._next_discipline:03d}", name=name)
        self._next_discipline += 1
        self.disciplines[d.id] = d
        return d

    def find_discipline(self, name: str) -> Discipline | None:
        key = label_key(name)
        for d in self.disciplines.values():
            if label_key(d.name) == key:
                return d
        return None

    def discipline(self, ref) -> Discipline:
        """Resolve a Discipline, its id, or its name."""
        if isinstance(ref, Discipline):
            ref = ref.id
        if ref in self.disciplines:
            return self.disciplines[ref]
        found = self.find_discipline(str(ref))
        if found is None:
            raise NotFound(f"unknown discipline {ref!r}")
        return found

    # ---- entities ----------------------------------------------------

    def find_entity(self, label: str) -> Entity | None:
        key = label_key(label)
        for e in self.entities.values():
            if label_key(e.label) == key:
                return e
        return None

    def entities_of(self, discipline) -> list[Entity]:
        did = self.discipline(discipline).id
        return [self.entities[i] for i in sorted(self.entities) if did in self.entities[i].disciplines]

    def ingest_entities(self, discipline, candidates: Iterable[Sequence]) -> list[Entity]:
        """Insert relevant candidates under ``discipline``.

        Each candidate is ``(label, semantic_type, relevant)``. Irrelevant ones
        are dropped; a label already in the graph gains the discipline instead
        of being duplicated.
        """
        d = self.discipline(discipline)
        touched: dict[str, Entity] = {}
        for label, semantic_type, relevant in candidates:
            if not relevant:
                continue
            label = " ".join(str(label).split())
            if not label:
                raise ValidationError("entity label must be non-empty")
            stype = SemanticType.parse(semantic_type)
            ent = self.find_entity(label)
            if ent is None:
                ent = Entity(id=f"e{self._next_entity:05d}", label=label, semantic_type=stype,
                             disciplines={d.id})
                self._next_entity += 1
                self.entities[ent.id] = ent
            else:
                ent.disciplines.add(d.id)
            touched[ent.id] = ent
        return list(touched.values())

    def embed_missing(self, embedder) -> int:
        """Give every entity without an embedding one computed from its label."""
        n = 0
        pending = [e for e in self.entities.values() if e.embedding_ref is None
                   or self.embeddings.get(e.embedding_ref) is None]
        if pending:
            vectors = embedder.embed_many([e.label for e in pending])
            for e, v in zip(pending, vectors):
                e.embedding_ref = embedder.key_for(e.label)
                self.embeddings.put(e.embedding_ref, v)
                n += 1
        return n

    def vector(self, entity_id: str) -> np.ndarray:
        ent = self.entities.get(entity_id)
        if ent is None:
            raise NotFound(f"unknown entity {entity_id!r}")
        vec = self.embeddings.get(ent.embedding_ref) if ent.embedding_ref else None
        if vec is None:
            raise EmbeddingMissing(entity_id)
        return vec

    def vectors(self, ids: Iterable[str] | None = None) -> dict[str, np.ndarray]:
        ids = sorted(self.entities) if ids is None else ids
        return {i: self.vector(i) for i in ids}

    # ---- edges -------------------------------------------------------

    def link_cross_entities(self, tau: float | None = None) -> int:
        """Recompute the cross-entity edge set at threshold ``tau`` (strict ``>``).

        Stale edges are removed, so repeated calls are idempotent. Returns the
        number of edges that were not present before.
        """
        tau = self.tau if tau is None else tau
        if not 0.0 < tau < 1.0:
            raise ValidationError("tau must lie in (0, 1)")
        ids = sorted(self.entities)
        vecs = [self.vector(i) for i in ids]
        new: dict[tuple[str, str], float] = {}
        if ids:
            X = np.vstack(vecs)
            S = X @ X.T
            rows, cols = np.nonzero(np.triu(S > tau - 1e-6, k=1))
            for a, b in zip(rows, cols):
                w = cosine(vecs[a], vecs[b])
                if w > tau:
                    new[(ids[a], ids[b])] = w
        added = sum(1 for k in new if k not in self.cross)
        self.cross = new
        self.tau = tau
        return added

    def cross_weight(self, a: str, b: str) -> float | None:
        return self.cross.get((a, b) if a < b else (b, a))

    def neighbors(self, entity_id: str) -> list[str]:
        out = []
        for a, b in self.cross:
            if a == entity_id:
                out.append(b)
            elif b == entity_id:
                out.append(a)
        return sorted(out)

    def edges(self) -> list[GraphEdge]:
        out = [GraphEdge(EdgeKind.HAS_ENTITY, (d, e.id))
               for e in (self.entities[i] for i in sorted(self.entities))
               for d in sorted(e.disciplines)]
        out.extend(GraphEdge(EdgeKind.CROSS_ENTITY, k, w) for k, w in sorted(self.cross.items()))
        return out

    def incident_edges(self, entity_id: str) -> list[GraphEdge]:
        return [e for e in self.edges() if entity_id in e.endpoints]

    # ---- pruning -----------------------------------------------------

    def prune_entities(self, ids: Iterable[str]) -> int:
        removed = 0
        for eid in sorted(set(ids)):
            if eid not in self.entities:
                self.warnings.append({"op": "prune", "entity": eid, "reason": "unknown id"})
                log.warning("prune ignored unknown entity %s", eid)
                continue
            del self.entities[eid]
            removed += 1
        if removed:
            self.cross = {k: w for k, w in self.cross.items()
                          if k[0] in self.entities and k[1] in self.entities}
        return removed

    # ---- integrity and persistence -----------------------------------

    def check_integrity(self) -> None:
        names = set()
        for d in self.disciplines.values():
            if not d.name.strip():
                raise IntegrityError("discipline name non-empty", d.id)
            if d.layer != 1:
                raise IntegrityError("discipline layer is 1", d.id)
            if label_key(d.name) in names:
                raise IntegrityError("discipline names unique", d.name)
            names.add(label_key(d.name))
        for e in self.entities.values():
            if not e.label.strip():
                raise IntegrityError("entity label non-empty", e.id)
            if not isinstance(e.semantic_type, SemanticType):
                raise IntegrityError("semantic type in enumeration", e.id)
            if not e.disciplines:
                raise IntegrityError("entity has a discipline", e.id)
            unknown = e.disciplines - self.disciplines.keys()
            if unknown:
                raise IntegrityError("HasEntity connects a Discipline to an Entity",
                                     f"{e.id} -> {sorted(unknown)}")
            if e.frequency < 0:
                raise IntegrityError("frequency non-negative", e.id)
            if e.fitness is not None and not 0.0 <= e.fitness <= 1.0:
                raise IntegrityError("entity fitness in [0,1]", e.id)
        for (a, b), w in self.cross.items():
            if a == b:
                raise IntegrityError("CrossEntity endpoints distinct", a)
            if a not in self.entities or b not in self.entities:
                raise IntegrityError("no edge references a missing entity", f"{a}-{b}")
            if not w > self.tau:
                raise IntegrityError("CrossEntity weight > tau", f"{a}-{b} weight {w} tau {self.tau}")
            if not -1.0 <= w <= 1.0:
                raise IntegrityError("CrossEntity weight in [-1,1]", f"{a}-{b}")
            ra, rb = self.entities[a].embedding_ref, self.entities[b].embedding_ref
            va = self.embeddings.get(ra) if ra else None
            vb = self.embeddings.get(rb) if rb else None
            if va is not None and vb is not None and abs(cosine(va, vb) - w) > WEIGHT_TOL:
                raise IntegrityError("CrossEntity weight equals embedding cosine", f"{a}-{b}")

    def to_dict(self, embedding_file: str | None = None) -> dict:
        return {
            "schema_version": SCHEMA_VERSION,
            "tau": self.tau,
            "counters": {"discipline": self._next_discipline, "entity": self._next_entity},
            "embedding_cache": embedding_file,
            "disciplines": [{"id": d.id, "name": d.name, "layer": d.layer}
                            for d in sorted(self.disciplines.values(), key=lambda d: d.id)],
            "entities": [self.entities[i].to_dict() for i in sorted(self.entities)],
            "edges": [{"kind": e.kind.value, "source": e.endpoints[0], "target": e.endpoints[1],
                       **({"weight": e.weight} if e.weight is not None else {})}
                      for e in self.edges()],
        }

    def snapshot(self, path) -> Path:
        """Write the graph document plus a ``.emb.jsonl`` sidecar next to it."""
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        sidecar = path.with_name(path.name + ".emb.jsonl")
        self.embeddings.save(sidecar)
        doc = json.dumps(self.to_dict(embedding_file=sidecar.name), indent=1, sort_keys=True)
        tmp = path.with_name(path.name + ".tmp")
        tmp.write_text(doc + "\n", encoding="utf-8")
        os.replace(tmp, path)
        return path

    @classmethod
    def load(cls, path) -> "KnowledgeGraph":
        path = Path(path)
        raw = path.read_bytes()
        try:
            doc = json.loads(raw.decode("utf-8"))
        except UnicodeDecodeError as exc:
            raise FormatError("graph file is not UTF-8", exc.start) from exc
        except json.JSONDecodeError as exc:
            offset = len(raw.decode("utf-8")[: exc.pos].encode("utf-8"))
            raise FormatError(f"graph file does not parse: {exc.msg}", offset) from exc
        embeddings = None
        if isinstance(doc, dict) and doc.get("embedding_cache"):
            sidecar = path.with_name(doc["embedding_cache"])
            if sidecar.exists():
                embeddings = EmbeddingCache.load(sidecar)
        return cls.from_dict(doc, embeddings)

    @classmethod
    def from_dict(cls, doc, embeddings: EmbeddingCache | None = None) -> "KnowledgeGraph":
        if not isinstance(doc, dict):
            raise FormatError("graph document must be an object")
        version = doc.get("schema_version")
        if version != SCHEMA_VERSION:
            raise FormatError(f"unsupported graph schema version {version!r}")
        try:
            g = cls(tau=float(doc["tau"]), embeddings=embeddings)
            for d in doc["disciplines"]:
                if d["id"] in g.disciplines:
                    raise IntegrityError("discipline ids unique", d["id"])
                g.disciplines[d["id"]] = Discipline(id=d["id"], name=d["name"], layer=d.get("layer", 1))
            for e in doc["entities"]:
                if e["id"] in g.entities:
                    raise IntegrityError("entity ids unique", e["id"])
                try:
                    stype = SemanticType.parse(e["semantic_type"])
                except ValidationError as exc:
                    raise IntegrityError("semantic type in enumeration", e["id"]) from exc
                g.entities[e["id"]] = Entity(
                    id=e["id"], label=e["label"], semantic_type=stype,
                    disciplines=set(e["disciplines"]), embedding_ref=e.get("embedding_ref"),
                    frequency=int(e.get("frequency", 0)), fitness=e.get("fitness"))
            has_entity = set()
            for edge in doc["edges"]:
                kind = edge["kind"]
                a, b = edge["source"], edge["target"]
                if kind == EdgeKind.HAS_ENTITY.value:
                    has_entity.add((a, b))
                elif kind == EdgeKind.CROSS_ENTITY.value:
                    key = (a, b) if a < b else (b, a)
                    if key in g.cross:
                        raise IntegrityError("CrossEntity edges unique", f"{a}-{b}")
                    g.cross[key] = float(edge["weight"])
                else:
                    raise IntegrityError("edge kind in enumeration", str(kind))
            counters = doc.get("counters", {})
        except (KeyError, TypeError, ValueError) as exc:
            raise FormatError(f"malformed graph document: {exc!r}") from exc
        derived = {(d, e.id) for e in g.entities.values() for d in e.disciplines}
        if has_entity != derived:
            raise IntegrityError("HasEntity edges match entity discipline sets",
                                 f"{len(has_entity ^ derived)} mismatched")
        g._next_discipline = counters.get("discipline", len(g.disciplines) + 1)
        g._next_entity = counters.get("entity", len(g.entities) + 1)
        g.check_integrity()
        return g

    def copy(self) -> "KnowledgeGraph":
        g = KnowledgeGraph(self.tau, self.embeddings.copy())
        g.disciplines = dict(self.disciplines)
        g.entities = copy.deepcopy(self.entities)
        g.cross = dict(self.cross)
        g.warnings = list(self.warnings)
        g._next_discipline = self._next_discipline
        g._next_entity = self._next_entity
        return g

    def restore_from(self, other: "KnowledgeGraph") -> None:
        """Swap in the full state of ``other`` (used for atomic updates)."""
        self.__dict__.update(other.copy().__dict__)

    def structurally_equal(self, other: "KnowledgeGraph", tol: float = 1e-12) -> bool:
        if self.disciplines != other.disciplines or self.tau != other.tau:
            return False
        if {k: v.to_dict() for k, v in self.entities.items()} != \
                {k: v.to_dict() for k, v in other.entities.items()}:
            return False
        if self.cross.keys() != other.cross.keys():
            return False
        return all(abs(self.cross[k] - other.cross[k]) <= tol for k in self.cross)


# --------------------------------------------------------------------------
# Wikipedia candidate extraction

WIKI_REST = "https://en.wikipedia.org/api/rest_v1/page/summary/{title}"
WIKI_API = "https://en.wikipedia.org/w/api.php"


def page_filename(title: str) -> str:
    return re.sub(r"[^A-Za-z0-9_.-]", "", title.strip().replace(" ", "_")) + ".json"


class _AnchorCollector(HTMLParser):
    def __init__(self):
        super().__init__()
        self.anchors: list[str] = []
        self._depth = 0
        self._buf: list[str] = []

    def handle_starttag(self, tag, attrs):
        if tag == "a":
            self._depth += 1
            self._buf = []

    def handle_endtag(self, tag):
        if tag == "a" and self._depth:
            self._depth -= 1
            text = " ".join("".join(self._buf).split())
            if text:
                self.anchors.append(text)

    def handle_data(self, data):
        if self._depth:
            self._buf.append(data)


def _sentences(text: str) -> list[str]:
    return [s.strip() for s in re.split(r"(?<=[.!?])\s+", text) if s.strip()]


def extract_candidates(page: dict) -> list[tuple[str, str]]:
    """Hyperlinked terms of a recorded page, in document order, with a context sentence."""
    summary = page.get("summary") or {}
    extract = (summary.get("extract") or "").strip()
    if not extract:
        return []
    sentences = _sentences(extract)
    lowered = extract.casefold()

    def context(term: str) -> str:
        for s in sentences:
            if term.casefold() in s.casefold():
                return s
        return sentences[0] if sentences else extract

    found: list[tuple[int, str]] = []
    parser = _AnchorCollector()
    parser.feed(summary.get("extract_html") or "")
    for a in parser.anchors:
        pos = lowered.find(a.casefold())
        found.append((pos if pos >= 0 else len(lowered), a))
    for title in page.get("links") or []:
        title = " ".join(str(title).split())
        m = re.search(r"(?<!\w)" + re.escape(title.casefold()) + r"(?!\w)", lowered)
        if m:
            found.append((m.start(), title))
    found.sort(key=lambda p: p[0])  # stable: equal positions keep insertion order
    seen, out = set(), []
    for _, term in found:
        key = label_key(term)
        if key not in seen:
            seen.add(key)
            out.append((term, context(term)))
    return out


def fetch_live_page(title: str, timeout: float = 20.0) -> dict:
    import httpx

    headers = {"User-Agent": "ideaevo/0.1 (research tooling)"}
    try:
        r1 = httpx.get(WIKI_REST.format(title=title.replace(" ", "_")), headers=headers, timeout=timeout)
        r1.raise_for_status()
        links: list[str] = []
        params = {"action": "query", "prop": "links", "titles": title, "pllimit": "max",
                  "plnamespace": 0, "format": "json"}
        while True:
            r2 = httpx.get(WIKI_API, params=params, headers=headers, timeout=timeout)
            r2.raise_for_status()
            data = r2.json()
            for page in data.get("query", {}).get("pages", {}).values():
                links.extend(link["title"] for link in page.get("links", []))
            if "continue" not in data:
                break
            params.update(data["continue"])
    except (httpx.HTTPError, ValueError) as exc:
        raise SourceUnavailable(f"wikipedia fetch failed for {title!r}: {exc}") from exc
    summary = r1.json()
    return {"title": title,
            "summary": {"extract": summary.get("extract", ""),
                        "extract_html": summary.get("extract_html", "")},
            "links": links}


def wiki_ingest(discipline: Discipline, source, *, record_dir=None,
                fetcher=fetch_live_page) -> list[tuple[str, str]]:
    """Candidate ``(label, context)`` pairs for a discipline's page.

    ``source`` is ``"live"`` or a fixtures directory holding one recorded
    page per file. In live mode ``record_dir`` optionally captures the page as
    a new fixture, written only after every fetch succeeded.
    """
    title = discipline.name if isinstance(discipline, Discipline) else str(discipline)
    if source == "live":
        page = fetcher(title)
        if record_dir is not None:
            out = Path(record_dir) / page_filename(title)
            out.parent.mkdir(parents=True, exist_ok=True)
            out.write_text(json.dumps(page, indent=1, sort_keys=True), encoding="utf-8")
    else:
        path = Path(source) / page_filename(title)
        if not path.exists():
            raise NotFound(f"no recorded page for {title!r} under {source}")
        try:
            page = json.loads(path.read_text(encoding="utf-8"))
        except json.JSONDecodeError as exc:
            raise FormatError(f"recorded page {path.name} does not parse", exc.pos) from exc
    return extract_candidates(page)
