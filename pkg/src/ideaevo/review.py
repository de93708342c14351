"""Idea evaluation: reviewer panels with reflection, meta-review, and a point tournament."""

from __future__ import annotations

import csv
import io
import json
import logging
from dataclasses import dataclass, field
from typing import Callable, Mapping, Sequence

import numpy as np

from .errors import ParseError, ProviderError, ReviewError, SchemaError, ValidationError
from .llm_provider import TEMPERATURES, ChatRequest, Field, extract_structured
from .prompts import render

log = logging.getLogger(__name__)

SCORE_FIELDS = ("novelty", "feasibility", "effectiveness", "excitement", "overall")
DEFAULT_REVIEWERS = 3
DEFAULT_REFLECTIONS = 1
DEFAULT_TOURNAMENT_ROUNDS = 5


@dataclass(frozen=True)
class ReviewTemplate:
    style: str
    ranges: Mapping[str, tuple[float, float]]
    prompt_asset: str

    def __post_init__(self):
        for name in (*SCORE_FIELDS, "confidence"):
            lo, hi = self.ranges[name]
            if not (np.isfinite(lo) and np.isfinite(hi) and lo < hi):
                raise ValidationError(f"{self.style}: bad range for {name}")

    def schema(self) -> dict:
        return {"title": Field(str, required=False),
                "scores": Field(dict, fields={f: Field(float, lo=self.ranges[f][0], hi=self.ranges[f][1])
                                              for f in SCORE_FIELDS}),
                "rationales": Field(dict, fields={f: str for f in SCORE_FIELDS}),
                "confidence": Field(float, lo=self.ranges["confidence"][0], hi=self.ranges["confidence"][1]),
                "suggestions": str}

    def rescale(self, name: str, value: float) -> float:
        lo, hi = self.ranges[name]
        return (value - lo) / (hi - lo)


_ASPECTS = {f: (1.0, 10.0) for f in SCORE_FIELDS[:4]}
ICLR = ReviewTemplate("ICLR", {**_ASPECTS, "overall": (1.0, 10.0), "confidence": (1.0, 5.0)}, "review_iclr")
NEURIPS = ReviewTemplate("NeurIPS", {**_ASPECTS, "overall": (1.0, 6.0), "confidence": (1.0, 5.0)}, "review_neurips")
TEMPLATES = {"ICLR": ICLR, "NeurIPS": NEURIPS}


def get_template(style: str | ReviewTemplate) -> ReviewTemplate:
    if isinstance(style, ReviewTemplate):
        return style
    try:
        return TEMPLATES[style]
    except KeyError:
        raise ValidationError(f"unknown review template {style!r}") from None


@dataclass
class Evaluation:
    """Title, five scores with rationales, confidence and suggestions for one idea."""

    idea_id: str
    title: str
    scores: dict[str, float]
    rationales: dict[str, str]
    confidence: float
    suggestions: str
    template: str = "ICLR"
    reviewer: str = ""
    clamps: list[dict] = field(default_factory=list)

    def __post_init__(self):
        t = get_template(self.template)
        for name in SCORE_FIELDS:
            lo, hi = t.ranges[name]
            if name not in self.scores or not lo <= self.scores[name] <= hi:
                raise ValidationError(f"{name} score outside [{lo}, {hi}]")
            if not str(self.rationales.get(name, "")).strip():
                raise ValidationError(f"missing rationale for {name}")
        lo, hi = t.ranges["confidence"]
        if not lo <= self.confidence <= hi:
            raise ValidationError("confidence outside template range")

    @property
    def overall(self) -> float:
        return self.scores["overall"]

    @classmethod
    def from_payload(cls, payload: dict, idea_id: str, title: str, template: ReviewTemplate,
                     reviewer: str = "") -> "Evaluation":
        return cls(idea_id=idea_id, title=payload.get("title") or title,
                   scores={f: float(payload["scores"][f]) for f in SCORE_FIELDS},
                   rationales={f: payload["rationales"][f] for f in SCORE_FIELDS},
                   confidence=float(payload["confidence"]), suggestions=payload["suggestions"],
                   template=template.style, reviewer=reviewer)

    def to_dict(self) -> dict:
        return {"idea_id": self.idea_id, "title": self.title, "scores": self.scores,
                "rationales": self.rationales, "confidence": self.confidence,
                "suggestions": self.suggestions, "template": self.template, "reviewer": self.reviewer,
                "clamps": self.clamps}

    @classmethod
    def from_dict(cls, d: dict) -> "Evaluation":
        return cls(**{k: d[k] for k in ("idea_id", "title", "scores", "rationales", "confidence",
                                         "suggestions", "template")},
                   reviewer=d.get("reviewer", ""), clamps=d.get("clamps", []))


def _idea_fields(idea) -> tuple[str, str, str]:
    if isinstance(idea, Mapping):
        return str(idea["id"]), str(idea["title"]), str(idea.get("body", ""))
    return idea.id, idea.title, idea.body


def _parse_or_repair(client, request: ChatRequest, text: str, template: ReviewTemplate, idea_id: str,
                     title: str, reviewer: str) -> Evaluation:
    schema = template.schema()
    try:
        return Evaluation.from_payload(extract_structured(text, schema), idea_id, title, template, reviewer)
    except (ParseError, SchemaError, ValidationError) as first:
        note = f"Your review could not be used ({first}). Return the complete review again in the JSON format."
        repaired = client.complete(request.followup(text, note, tag=request.tag.rsplit(".", 1)[0] + ".repair"))
        try:
            return Evaluation.from_payload(extract_structured(repaired.text, schema), idea_id, title,
                                           template, reviewer)
        except (ParseError, SchemaError, ValidationError) as exc:
            raise ReviewError(idea_id, exc) from exc


def review_idea(idea, template: str | ReviewTemplate = ICLR, reflections: int = DEFAULT_REFLECTIONS, *,
                client, reviewer=None, seed: int = 0, template_dir=None) -> Evaluation:
    """One reviewer's evaluation: an initial review plus ``reflections`` self-revisions."""
    if reflections < 0:
        raise ValidationError("reflections must be >= 0")
    t = get_template(template)
    idea_id, title, body = _idea_fields(idea)
    system = reviewer.system_prompt if reviewer is not None else render("reviewer", template_dir)
    name = reviewer.alias if reviewer is not None else "Reviewer"
    r = t.ranges
    user = render(t.prompt_asset, template_dir, title=title, body=body, lo=int(r["novelty"][0]),
                  hi=int(r["novelty"][1]), overall_lo=int(r["overall"][0]), overall_hi=int(r["overall"][1]),
                  conf_lo=int(r["confidence"][0]), conf_hi=int(r["confidence"][1]))
    hints = {"idea_id": idea_id, "title": title, "body": body, "ranges": {k: list(v) for k, v in r.items()},
             "reviewer": name}
    req = ChatRequest.build(system, user, tag=f"review.{t.style}.initial",
                            temperature=TEMPERATURES["reviewer"], seed=seed, hints=hints)
    text = client.complete(req).text
    for k in range(1, reflections + 1):
        req = req.followup(text, render("reflect", template_dir, round=k, total=reflections),
                           tag=f"review.{t.style}.reflect")
        text = client.complete(req).text
    return _parse_or_repair(client, req, text, t, idea_id, title, name)


def _envelope(reviews: Sequence[Evaluation], name: str) -> tuple[float, float]:
    vals = [r.confidence if name == "confidence" else r.scores[name] for r in reviews]
    return min(vals), max(vals)


def meta_review(reviews: Sequence[Evaluation], *, mode: str = "llm", client=None, idea=None, seed: int = 0,
                template_dir=None) -> Evaluation:
    """Unify several reviews of one idea.

    ``mode="mean"`` averages the fields directly (offline). ``mode="llm"``
    asks a meta-reviewer, then clamps every score into the reviewers'
    min-max envelope and records each clamp on the result.
    """
    if len(reviews) < 2:
        raise ValidationError("meta_review needs at least two reviews")
    styles = {r.template for r in reviews}
    ids = {r.idea_id for r in reviews}
    if len(styles) != 1 or len(ids) != 1:
        raise ValidationError("reviews must share one template and one idea")
    t = get_template(styles.pop())
    idea_id = ids.pop()
    title = reviews[0].title
    if mode == "mean":
        return Evaluation(
            idea_id=idea_id, title=title,
            scores={f: float(np.mean([r.scores[f] for r in reviews])) for f in SCORE_FIELDS},
            rationales={f: " / ".join(r.rationales[f] for r in reviews) for f in SCORE_FIELDS},
            confidence=float(np.mean([r.confidence for r in reviews])),
            suggestions="\n".join(dict.fromkeys(r.suggestions for r in reviews)),
            template=t.style, reviewer="meta(mean)")
    if mode != "llm":
        raise ValidationError(f"unknown meta-review mode {mode!r}")
    if client is None:
        raise ValidationError("llm meta-review needs a client")
    listing = "\n\n".join(f"Review by {r.reviewer or i + 1}:\n" + json.dumps(
        {k: v for k, v in r.to_dict().items() if k in ("scores", "rationales", "confidence", "suggestions")},
        sort_keys=True) for i, r in enumerate(reviews))
    req = ChatRequest.build(render("reviewer", template_dir),
                            render("meta_review", template_dir, title=title, reviews=listing),
                            tag=f"meta.{t.style}", temperature=TEMPERATURES["reviewer"], seed=seed,
                            hints={"idea_id": idea_id, "title": title,
                                   "reviews": [r.to_dict() for r in reviews],
                                   "ranges": {k: list(v) for k, v in t.ranges.items()}})
    text = client.complete(req).text
    # range checks happen before the clamp, so a strayed-but-valid score is clamped, not rejected
    meta = _parse_or_repair(client, req, text, t, idea_id, title, "meta")
    clamps = []
    for name in (*SCORE_FIELDS, "confidence"):
        lo, hi = _envelope(reviews, name)
        val = meta.confidence if name == "confidence" else meta.scores[name]
        new = min(max(val, lo), hi)
        if new != val:
            clamps.append({"field": name, "from": val, "to": new})
            if name == "confidence":
                meta.confidence = new
            else:
                meta.scores[name] = new
    meta.clamps = clamps
    return meta


def review_panel(idea, template, reviewers: Sequence, *, client, reflections: int = DEFAULT_REFLECTIONS,
                 meta_mode: str = "llm", seed: int = 0, template_dir=None) -> tuple[list[Evaluation], Evaluation]:
    """Independent reviews from every reviewer persona plus their meta-review."""
    reviews = [review_idea(idea, template, reflections, client=client, reviewer=r, seed=seed,
                           template_dir=template_dir) for r in reviewers]
    if len(reviews) == 1:
        return reviews, reviews[0]
    return reviews, meta_review(reviews, mode=meta_mode, client=client, idea=idea, seed=seed,
                                template_dir=template_dir)


# --------------------------------------------------------------------------
# tournament


@dataclass
class TournamentState:
    points: dict[str, int]
    round_log: list[dict] = field(default_factory=list)
    rounds_completed: int = 0

    def ranking(self) -> list[str]:
        return sorted(self.points, key=lambda i: (-self.points[i], i))

    def to_dict(self) -> dict:
        return {"points": self.points, "round_log": self.round_log, "rounds_completed": self.rounds_completed}


@dataclass
class CompareOutcome:
    winner: str
    retried: bool = False
    coin_flip: bool = False


Comparator = Callable[[str, str], "str | None"]


def pair_round(ideas: Sequence[str], seed) -> tuple[list[tuple[str, str]], str | None]:
    """Seeded shuffle then adjacent pairing; with an odd pool the last idea sits out."""
    ids = list(ideas)
    if len(ids) < 2:
        raise ValidationError("pairing needs at least two ideas")
    order = [ids[i] for i in np.random.default_rng(seed).permutation(len(ids))]
    pairs = [(order[i], order[i + 1]) for i in range(0, len(order) - 1, 2)]
    return pairs, (order[-1] if len(order) % 2 else None)


def compare(pair: tuple[str, str], comparator: Comparator, seed=0) -> CompareOutcome:
    """Ask ``comparator`` for a winner; retry once with the order swapped, then flip a seeded coin."""
    a, b = pair
    if a == b:
        raise ValidationError("cannot compare an idea with itself")
    verdict = comparator(a, b)
    if verdict in pair:
        return CompareOutcome(verdict)
    verdict = comparator(b, a)
    if verdict in pair:
        return CompareOutcome(verdict, retried=True)
    pick = int(np.random.default_rng(seed).integers(2))
    return CompareOutcome(pair[pick], retried=True, coin_flip=True)


def smaller_id_comparator(a: str, b: str) -> str:
    return min(a, b)


class ScoreComparator:
    """Higher score wins; equal scores go to the smaller id."""

    def __init__(self, scores: Mapping[str, float]):
        self.scores = scores

    def __call__(self, a: str, b: str) -> str:
        sa, sb = self.scores[a], self.scores[b]
        if sa != sb:
            return a if sa > sb else b
        return min(a, b)


class LLMComparator:
    """Pairwise verdicts from a temperature-0 model call; ``None`` when unusable."""

    def __init__(self, client, ideas: Mapping[str, object], seed: int = 0, template_dir=None):
        self.client = client
        self.ideas = ideas
        self.seed = seed
        self.template_dir = template_dir

    def __call__(self, a: str, b: str) -> str | None:
        _, ta, ba = _idea_fields(self.ideas[a])
        _, tb, bb = _idea_fields(self.ideas[b])
        req = ChatRequest.build("You are an experienced area chair.",
                                render("compare", self.template_dir, title_a=ta, body_a=ba, title_b=tb, body_b=bb),
                                tag="tournament.compare", temperature=TEMPERATURES["comparator"], seed=self.seed,
                                hints={"a": a, "b": b, "title_a": ta, "title_b": tb})
        try:
            verdict = str(extract_structured(self.client.complete(req).text, {"accepted": str})["accepted"])
        except (ProviderError, ParseError, SchemaError):
            return None
        verdict = verdict.strip().upper()
        return {"A": a, "B": b}.get(verdict)


def run_tournament(ideas: Sequence[str], rounds: int = DEFAULT_TOURNAMENT_ROUNDS, comparator: Comparator = None,
                   seed: int = 0) -> TournamentState:
    """Everyone starts on one point; each decided comparison gives the winner one more.

    Round ``r`` pairs with seed ``[seed, r]``; the coin flip for pair ``j``
    uses ``[seed, r, j]``.
    """
    ids = list(ideas)
    if len(ids) < 2:
        raise ValidationError("tournament needs at least two ideas")
    if len(set(ids)) != len(ids):
        raise ValidationError("idea ids must be unique")
    comparator = comparator or smaller_id_comparator
    state = TournamentState(points={i: 1 for i in ids})
    for r in range(1, rounds + 1):
        pairs, bye = pair_round(ids, [seed, r])
        outcomes = []
        for j, pair in enumerate(pairs):
            out = compare(pair, comparator, seed=[seed, r, j])
            outcomes.append({"pair": list(pair), "winner": out.winner, "retried": out.retried,
                             "coin_flip": out.coin_flip})
        for o in outcomes:  # points update at the round join
            state.points[o["winner"]] += 1
        state.round_log.append({"round": r, "bye": bye, "outcomes": outcomes, "points": dict(state.points)})
        state.rounds_completed = r
    return state


def compute_metrics(states: Mapping[str, TournamentState], labels: Mapping[str, str],
                    k: int = 10) -> tuple[dict[str, float], dict[str, int]]:
    """Average wins (final points minus the starting point) and top-``k`` counts per method.

    ``states`` maps topic to tournament; ``labels`` maps idea id to method.
    Ranking within a topic is by final points, ties to the smaller id.
    """
    wins: dict[str, list[int]] = {}
    top: dict[str, int] = {}
    for topic in sorted(states):
        st = states[topic]
        for idea in st.points:
            if idea not in labels:
                raise ValidationError(f"idea {idea} has no method label")
        for idea, pts in st.points.items():
            wins.setdefault(labels[idea], []).append(pts - 1)
            top.setdefault(labels[idea], 0)
        for idea in st.ranking()[:k]:
            top[labels[idea]] += 1
    return {m: float(np.mean(v)) for m, v in wins.items()}, top


def tournament_csv(states: Mapping[str, TournamentState], labels: Mapping[str, str]) -> str:
    buf = io.StringIO()
    rounds = max((s.rounds_completed for s in states.values()), default=0)
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["idea", "method", "topic", *[f"round_{r}" for r in range(1, rounds + 1)], "final"])
    for topic in sorted(states):
        st = states[topic]
        for idea in sorted(st.points):
            per_round = [log_["points"][idea] for log_ in st.round_log]
            w.writerow([idea, labels.get(idea, ""), topic, *per_round, st.points[idea]])
    return buf.getvalue()


def tournament_markdown(states: Mapping[str, TournamentState], labels: Mapping[str, str], k: int = 10) -> str:
    avg, top = compute_metrics(states, labels, k)
    lines = ["# Tournament ranking", "",
             "Avg Wins = mean over a method's ideas of (final points - 1). Points come from a plain "
             "win-a-point tournament (no rating updates).", "",
             f"| Method | Avg Wins | Top-{k} Count |", "|---|---|---|"]
    for m in sorted(avg):
        lines.append(f"| {m} | {avg[m]:.2f} | {top[m]} |")
    total = sum(sum(s.points.values()) for s in states.values())
    lines += ["", f"Total points across topics: {total}"]
    return "\n".join(lines) + "\n"
