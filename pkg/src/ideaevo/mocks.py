"""Offline stand-ins for model calls.

Each handler receives ``(request, rng, backend)`` and returns a payload
dict (wrapped in a JSON fence by the backend), plain text, or a ``Reply``.
Handlers only read ``request.hints``; the rendered prompt is never parsed.

Review scores come from a latent quality per idea title plus Gaussian noise
of standard deviation ``backend.sigma`` (in score points), so reviews of one
idea scatter around a stable centre the way independent reviewers do.
"""

from __future__ import annotations

import hashlib
from typing import Sequence

import numpy as np

from .graph_store import SemanticType

SCORE_FIELDS = ("novelty", "feasibility", "effectiveness", "excitement", "overall")

# Small per-discipline term banks. Expert exchanges mention these and the
# entity extractor recognises them, which is how the graph grows offline.
DISCIPLINE_TERMS = {
    "physics": ["phase transition", "spin glass", "Brownian motion", "renormalization group",
                "lattice model", "critical exponent", "mean field theory", "random walk"],
    "chemistry": ["catalysis", "reaction kinetics", "activation energy", "adsorption",
                  "molecular dynamics", "density functional theory", "diffusion coefficient", "ligand"],
    "computer science": ["graph neural network", "reinforcement learning", "Monte Carlo method",
                         "gradient descent", "active learning", "transformer model",
                         "Bayesian optimization", "message passing"],
    "biology": ["gene regulatory network", "protein folding", "cell signaling", "natural selection",
                "enzyme", "metabolic pathway", "morphogenesis", "population genetics"],
    "materials science": ["grain boundary", "crystal lattice", "vacancy defect", "thin film",
                          "two-dimensional material", "dislocation", "phonon", "heterostructure"],
}
GENERIC_TERMS = ["scaling law", "optimization", "uncertainty quantification", "network theory",
                 "statistical mechanics", "inverse problem", "surrogate model", "symmetry"]

_WORDS = ("adaptive coupled sparse hierarchical stochastic multiscale inverse latent robust "
          "emergent nonlocal anisotropic dynamic topological constrained federated causal "
          "spectral generative hybrid kinetic modular scalable interpretable differentiable "
          "amortized quantized coarse-grained self-organizing equivariant probabilistic "
          "transferable data-efficient physics-informed closed-loop high-throughput").split()
_NOUNS = ("framework benchmark pipeline estimator simulator probe descriptor protocol ansatz "
          "representation dataset metric sampler controller emulator workflow map atlas library "
          "criterion").split()
_VERBS = ("predict control explain accelerate discover quantify design stabilize map "
          "screen reconstruct forecast").split()

_TYPES = [t.value for t in SemanticType if t is not SemanticType.OTHER]


def _digest(*parts) -> int:
    h = hashlib.sha256("\x1f".join(str(p) for p in parts).encode("utf-8")).hexdigest()
    return int(h[:15], 16)


def unit_hash(*parts) -> float:
    """Stable pseudo-uniform value in [0, 1) derived from ``parts``."""
    return _digest(*parts) / float(16 ** 15)


def latent_quality(title: str) -> float:
    """Hidden merit of an idea in [0.25, 0.85]; every mock judge reads the same value."""
    return 0.25 + 0.6 * unit_hash("quality", " ".join(title.split()).casefold())


def terms_for(discipline: str) -> list[str]:
    return DISCIPLINE_TERMS.get(" ".join(discipline.split()).casefold(), GENERIC_TERMS)


def _pick(rng: np.random.Generator, items: Sequence, n: int) -> list:
    items = list(items)
    if not items:
        return []
    idx = rng.choice(len(items), size=min(n, len(items)), replace=False)
    return [items[i] for i in sorted(idx)]


def _phrase(rng: np.random.Generator, n: int = 3) -> str:
    return " ".join(_pick(rng, _WORDS, n))


# --------------------------------------------------------------------------
# topic analysis and graph construction


def topic_classify(request, rng, backend):
    topic = request.hints.get("topic", "").casefold()
    names = list(request.hints.get("disciplines", []))
    hit = [n for n in names if any(t.casefold() in topic for t in terms_for(n))
           or n.casefold() in topic]
    return {"disciplines": hit or names[:1]}


def topic_expert(request, rng, backend):
    h = request.hints
    terms = _pick(rng, terms_for(h.get("discipline", "")), 3)
    return (f"Exchange {h.get('exchange', 1)}: from the {h.get('discipline', '')} side, "
            f"{h.get('topic', 'the topic')} touches on {', '.join(terms)}. "
            f"A {_phrase(rng, 2)} view of {terms[0] if terms else 'the problem'} seems the most promising entry point.")


def topic_entities(request, rng, backend):
    h = request.hints
    text = " ".join(h.get("history", [])).casefold()
    bank = [t for terms in DISCIPLINE_TERMS.values() for t in terms] + GENERIC_TERMS
    found = [t for t in dict.fromkeys(bank) if t.casefold() in text]
    ents = [{"label": t, "semantic_type": _TYPES[_digest("type", t) % len(_TYPES)], "relevant": True}
            for t in found]
    ents.append({"label": "press release", "semantic_type": "Other", "relevant": False})
    return {"entities": ents}


def graph_classify(request, rng, backend):
    out = []
    for label in request.hints.get("labels", []):
        relevant = len(label) > 2 and unit_hash("relevant", label) > 0.1
        out.append({"label": label, "semantic_type": _TYPES[_digest("type", label) % len(_TYPES)],
                    "relevant": relevant})
    return {"entities": out}


def evolution_invent(request, rng, backend):
    h = request.hints
    known = {x.casefold() for x in h.get("labels", [])}
    fresh = [t for t in terms_for(h.get("discipline", "")) + GENERIC_TERMS if t.casefold() not in known]
    return {"entities": [{"label": t, "semantic_type": _TYPES[_digest("type", t) % len(_TYPES)],
                          "relevant": True} for t in _pick(rng, fresh, 2)]}


# --------------------------------------------------------------------------
# problems


def problems_generate(request, rng, backend):
    h = request.hints
    labels = list(h.get("labels", [])) or ["the core mechanism"]
    out = []
    for _ in range(int(h.get("count", 1))):
        ents = _pick(rng, labels, 2)
        verb = _VERBS[int(rng.integers(len(_VERBS)))]
        noun = _NOUNS[int(rng.integers(len(_NOUNS)))]
        style = _phrase(rng, 2)
        out.append({
            "statement": f"How can a {style} {noun} built on {' and '.join(ents)} {verb} {h.get('topic', '')}?",
            "description": f"{h.get('discipline', '')} offers {', '.join(ents)}; their link to the topic is untested "
                           f"and a {_phrase(rng, 2)} treatment could expose it.",
            "guidance": f"Start from {ents[0]}, derive a {noun}, and test it against a {_phrase(rng, 1)} baseline.",
            "entities": ents,
        })
    return {"problems": out}


def problems_focus(request, rng, backend):
    statements = request.hints.get("statements", [])
    words = [w.strip("?,.").casefold() for s in statements for w in s.split()]
    common = [w for w in dict.fromkeys(words) if len(w) > 5 and sum(x == w for x in words) > 1]
    return {"focus": "Shared focus: " + (" ".join(common[:4]) or (statements[0][:60] if statements else "open"))}


def _rubric(rng, ids, fields):
    return {"scores": [{"id": i, **{f: float(round(rng.uniform(4.0, 9.0), 2)) for f in fields}} for i in ids]}


def problems_select(request, rng, backend):
    return _rubric(rng, request.hints.get("ids", []), ("relevance", "interdisciplinary", "extensibility"))


# --------------------------------------------------------------------------
# collaboration


def collab_delegate(request, rng, backend):
    h = request.hints
    n = int(h.get("max_subtasks", 2))
    return {"subtasks": [{"description": f"Subtask {i + 1} of {h.get('task_id', '')}: examine the "
                                         f"{_phrase(rng, 2)} aspect of the assigned task."}
                         for i in range(n)]}


def collab_task(request, rng, backend):
    h = request.hints
    labels = _pick(rng, h.get("labels", []), 2)
    about = " and ".join(labels) if labels else "the selected problems"
    return (f"[{h.get('task_id', '')}] {h.get('stage', '')} notes: {about} suggest a "
            f"{_phrase(rng, 3)} {_NOUNS[int(rng.integers(len(_NOUNS)))]} for {h.get('topic', '')}. "
            f"Key risk: {_phrase(rng, 2)} effects.")


def memory_summarize(request, rng, backend):
    words = str(request.hints.get("response", "")).split()
    budget = max(1, int(request.hints.get("budget", 40)) // 2)
    return " ".join(words[:budget])


def collab_integrate(request, rng, backend):
    ids = request.hints.get("task_ids", [])
    return f"Integrated findings from {', '.join(ids)}: the subtasks agree on a {_phrase(rng, 2)} direction."


def collab_seed_ideas(request, rng, backend):
    h = request.hints
    labels = list(h.get("labels", [])) or ["the core mechanism"]
    pids = list(h.get("problem_ids", [])) or ["p000.00"]
    out = []
    for _ in range(int(h.get("count", 1))):
        ents = _pick(rng, labels, 2)
        style = _phrase(rng, 3)
        noun = _NOUNS[int(rng.integers(len(_NOUNS)))]
        verb = _VERBS[int(rng.integers(len(_VERBS)))]
        out.append({
            "title": f"{style.title()} {noun.title()} via {' + '.join(ents)}",
            "body": f"We {verb} {h.get('topic', '')} with a {style} {noun} coupling {' and '.join(ents)}. "
                    f"The method is {_phrase(rng, 3)}; validation uses a {_phrase(rng, 2)} {_NOUNS[int(rng.integers(len(_NOUNS)))]}.",
            "problem_id": pids[int(rng.integers(len(pids)))],
            "entities": ents,
        })
    return {"ideas": out}


def collab_refine(request, rng, backend):
    return _rubric(rng, request.hints.get("ids", []), ("novelty", "feasibility", "interdisciplinary"))


def loop_handoff(request, rng, backend):
    titles = request.hints.get("titles", [])
    best = request.hints.get("best", titles[0] if titles else "")
    return (f"Round {request.hints.get('round', '')}: {len(titles)} ideas reviewed. Strongest direction: {best}. "
            f"Next round should push the {_phrase(rng, 2)} angle.")


# --------------------------------------------------------------------------
# evaluation


def review(request, rng, backend):
    h = request.hints
    ranges = h.get("ranges", {})
    title = h.get("title", "")
    q = latent_quality(title)
    scores = {}
    for f in SCORE_FIELDS:
        lo, hi = ranges.get(f, (1.0, 10.0))
        centre = lo + (hi - lo) * min(1.0, max(0.0, q + 0.1 * (unit_hash(f, title) - 0.5)))
        scores[f] = float(round(min(hi, max(lo, centre + rng.normal(0.0, backend.sigma))), 4))
    clo, chi = ranges.get("confidence", (1.0, 5.0))
    return {"title": title, "scores": scores,
            "rationales": {f: f"{f.title()} judged from the {_phrase(rng, 2)} framing." for f in SCORE_FIELDS},
            "confidence": float(round(rng.uniform(clo + 0.4 * (chi - clo), chi), 2)),
            "suggestions": f"Clarify the {_phrase(rng, 2)} assumptions and add a stronger baseline."}


def meta(request, rng, backend):
    h = request.hints
    reviews = h.get("reviews", [])
    scores = {f: float(np.mean([r["scores"][f] for r in reviews])) for f in SCORE_FIELDS}
    return {"title": h.get("title", ""), "scores": scores,
            "rationales": {f: "Consensus of the panel." for f in SCORE_FIELDS},
            "confidence": float(np.mean([r["confidence"] for r in reviews])),
            "suggestions": "; ".join(dict.fromkeys(r["suggestions"] for r in reviews))}


def tournament_compare(request, rng, backend):
    h = request.hints
    qa, qb = latent_quality(h.get("title_a", "")), latent_quality(h.get("title_b", ""))
    if qa == qb:
        return {"accepted": "A" if h.get("a", "") < h.get("b", "") else "B"}
    return {"accepted": "A" if qa > qb else "B"}


DEFAULT_HANDLERS = {
    "topic.classify": topic_classify,
    "topic.expert": topic_expert,
    "topic.entities": topic_entities,
    "graph.classify": graph_classify,
    "evolution.invent": evolution_invent,
    "problems.generate": problems_generate,
    "problems.focus": problems_focus,
    "problems.select": problems_select,
    "collab.delegate": collab_delegate,
    "collab.task": collab_task,
    "memory.summarize": memory_summarize,
    "collab.integrate": collab_integrate,
    "collab.seed_ideas": collab_seed_ideas,
    "collab.refine": collab_refine,
    "loop.handoff": loop_handoff,
    "review.": review,
    "meta.": meta,
    "tournament.compare": tournament_compare,
}
