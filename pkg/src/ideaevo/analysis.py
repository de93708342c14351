"""Run analysis: convergence and continuity of idea embeddings, growth of
technical vocabulary, and quality trends over fixed-size idea groups."""

from __future__ import annotations

import csv
import io
import json
import logging
import re
from dataclasses import dataclass, field
from itertools import combinations
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np

from .embedding_space import aggregate_embedding, cosine
from .errors import FormatError, ValidationError

log = logging.getLogger(__name__)

DEFAULT_GROUP_SIZE = 10
DEFAULT_MARGIN = 0.1
ARROW = "→"


def normalize_term(term: str) -> str:
    return " ".join(str(term).split()).casefold()


@dataclass
class TermLexicon:
    terms: dict[str, str | None] = field(default_factory=dict)

    def __post_init__(self):
        clean: dict[str, str | None] = {}
        for t, d in dict(self.terms).items():
            key = normalize_term(t)
            if not key:
                raise ValidationError("lexicon terms must be non-empty")
            clean.setdefault(key, d)
        self.terms = clean

    @classmethod
    def from_terms(cls, terms: Iterable[str]) -> "TermLexicon":
        return cls({t: None for t in terms})

    def __len__(self) -> int:
        return len(self.terms)

    def matches(self, text: str) -> set[str]:
        low = normalize_term(text)
        return {t for t in self.terms if re.search(r"(?<!\w)" + re.escape(t) + r"(?!\w)", low)}


def load_lexicon(path) -> TermLexicon:
    """One term per line (``term<TAB>definition`` allowed), or a JSON list of
    strings / ``{"term", "definition"}`` records."""
    text = Path(path).read_text(encoding="utf-8")
    if text.lstrip().startswith("["):
        try:
            data = json.loads(text)
        except json.JSONDecodeError as exc:
            raise FormatError(f"lexicon {path} does not parse", exc.pos) from exc
        terms = {}
        for rec in data:
            if isinstance(rec, str):
                terms[rec] = None
            else:
                terms[rec["term"]] = rec.get("definition")
        return TermLexicon(terms)
    terms = {}
    for line in text.splitlines():
        if not line.strip() or line.lstrip().startswith("#"):
            continue
        term, _, definition = line.partition("\t")
        terms[term] = definition.strip() or None
    return TermLexicon(terms)


# --------------------------------------------------------------------------
# metrics


def _vec(x) -> np.ndarray:
    if isinstance(x, Mapping):
        x = x["embedding"]
    return np.asarray(getattr(x, "embedding", x), dtype=float)


def intra_round_convergence(ideas_by_round: Mapping[int, Sequence]) -> dict[int, float]:
    """Mean pairwise cosine between the ideas of each round; rounds with < 2 ideas are omitted."""
    out = {}
    for r in sorted(ideas_by_round):
        vecs = [_vec(x) for x in ideas_by_round[r]]
        if len(vecs) < 2:
            log.info("round %s has %d idea(s); intra-round similarity omitted", r, len(vecs))
            continue
        sims = [cosine(a, b) for a, b in combinations(vecs, 2)]
        out[r] = float(np.mean(sims))
    return out


def inter_round_continuity(ideas_by_round: Mapping[int, Sequence]) -> list[tuple[int, int, float]]:
    """Cosine between aggregate embeddings of each pair of consecutive rounds."""
    rounds = [r for r in sorted(ideas_by_round) if len(ideas_by_round[r])]
    aggs = {r: aggregate_embedding([_vec(x) for x in ideas_by_round[r]]) for r in rounds}
    return [(a, b, cosine(aggs[a], aggs[b])) for a, b in zip(rounds, rounds[1:])]


def _text(x) -> str:
    if isinstance(x, str):
        return x
    if isinstance(x, Mapping):
        return f"{x.get('title', '')} {x.get('body', '')}"
    return f"{getattr(x, 'title', '')} {getattr(x, 'body', '')}"


def term_growth(ideas_by_round: Mapping[int, Sequence], lexicon: TermLexicon) -> dict[int, int]:
    """Cumulative count of distinct lexicon terms seen in ideas up to each round."""
    if not len(lexicon):
        raise ValidationError("lexicon is empty")
    seen: set[str] = set()
    out = {}
    for r in sorted(ideas_by_round):
        for idea in ideas_by_round[r]:
            seen |= lexicon.matches(_text(idea))
        out[r] = len(seen)
    return out


GROUP_METRICS = ("novelty", "iclr_overall", "neurips_overall")


@dataclass
class QualityGroups:
    groups: list[dict]
    margin: float
    emergent_group: int | None = None
    improvements: dict[str, str] = field(default_factory=dict)
    partial: bool = False

    def table(self) -> str:
        lines = ["| Group | Ideas | Novelty | ICLR Overall | NeurIPS Overall |", "|---|---|---|---|---|"]
        for g in self.groups:
            vals = [("-" if g[m] is None else f"{g[m]:.2f}") for m in GROUP_METRICS]
            lines.append(f"| {g['group']} | {g['n']} | " + " | ".join(vals) + " |")
        return "\n".join(lines)


def format_jump(before: float, after: float) -> str:
    return f"{before:.2f} {ARROW} {after:.2f}"


def quality_groups(rows: Sequence[Mapping], group_size: int = DEFAULT_GROUP_SIZE,
                   margin: float = DEFAULT_MARGIN) -> QualityGroups:
    """Mean scores per block of ``group_size`` ideas in creation order.

    ``rows`` hold ``novelty``, ``iclr_overall`` and ``neurips_overall`` (any
    may be ``None``). The first group is the baseline; the earliest later group
    where some metric beats it by more than ``margin`` is flagged, with each
    improving metric written as ``"X → Y"``.
    """
    if group_size < 1:
        raise ValidationError("group_size must be >= 1")
    if not rows:
        raise ValidationError("no ideas to group")
    groups = []
    for g, start in enumerate(range(0, len(rows), group_size), start=1):
        block = rows[start:start + group_size]
        entry = {"group": g, "n": len(block), "first": start + 1, "last": start + len(block)}
        for m in GROUP_METRICS:
            vals = [float(r[m]) for r in block if r.get(m) is not None]
            entry[m] = float(np.mean(vals)) if vals else None
        groups.append(entry)
    out = QualityGroups(groups=groups, margin=margin, partial=len(rows) < group_size)
    base = groups[0]
    for g in groups[1:]:
        jumps = {m: format_jump(base[m], g[m]) for m in GROUP_METRICS
                 if base[m] is not None and g[m] is not None and g[m] - base[m] > margin}
        if jumps:
            out.emergent_group, out.improvements = g["group"], jumps
            break
    return out


# --------------------------------------------------------------------------
# run directories


def load_run(run_dir) -> tuple[dict[int, list[dict]], list[dict]]:
    """Ideas by round (with embeddings) and per-idea score rows in creation order."""
    run_dir = Path(run_dir)
    files = sorted((run_dir / "rounds").glob("round_*.json"))
    if not files:
        raise FormatError(f"{run_dir} holds no round records")
    embeddings = {}
    ideas_file = run_dir / "ideas.json"
    if ideas_file.exists():
        embeddings = {d["id"]: d["embedding"] for d in json.loads(ideas_file.read_text(encoding="utf-8"))}
    by_round: dict[int, list[dict]] = {}
    rows: list[dict] = []
    for f in files:
        rec = json.loads(f.read_text(encoding="utf-8"))
        r = int(rec["round"])
        metas = rec.get("meta_reviews", {})
        ideas = []
        for idea in rec["ideas"]:
            emb = idea.get("embedding") or embeddings.get(idea["id"])
            if emb is None:
                raise FormatError(f"idea {idea['id']} has no stored embedding")
            ideas.append({**idea, "embedding": emb})
            iclr = metas.get("ICLR", {}).get(idea["id"])
            neurips = metas.get("NeurIPS", {}).get(idea["id"])
            rows.append({"idea": idea["id"], "round": r,
                         "novelty": iclr["scores"]["novelty"] if iclr else None,
                         "iclr_overall": iclr["scores"]["overall"] if iclr else None,
                         "neurips_overall": neurips["scores"]["overall"] if neurips else None})
        by_round[r] = ideas
    return by_round, rows


@dataclass
class AnalysisReport:
    intra: dict[int, float]
    inter: list[tuple[int, int, float]]
    terms: dict[int, int]
    quality: QualityGroups

    def csvs(self) -> dict[str, str]:
        def table(header, body):
            buf = io.StringIO()
            w = csv.writer(buf, lineterminator="\n")
            w.writerow(header)
            w.writerows(body)
            return buf.getvalue()

        q = self.quality
        return {
            "intra_round.csv": table(["round", "intra_round_similarity"],
                                     [[r, f"{v:.10f}"] for r, v in self.intra.items()]),
            "inter_round.csv": table(["round_from", "round_to", "inter_round_similarity"],
                                     [[a, b, f"{v:.10f}"] for a, b, v in self.inter]),
            "term_growth.csv": table(["round", "cumulative_term_count"], [[r, n] for r, n in self.terms.items()]),
            "quality_groups.csv": table(
                ["group", "ideas", "first_idea", "last_idea", *GROUP_METRICS, "emergent"],
                [[g["group"], g["n"], g["first"], g["last"],
                  *[("" if g[m] is None else f"{g[m]:.4f}") for m in GROUP_METRICS],
                  int(g["group"] == q.emergent_group)] for g in q.groups]),
        }

    def write(self, out_dir) -> list[Path]:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        paths = []
        for name, text in self.csvs().items():
            p = out_dir / name
            p.write_text(text, encoding="utf-8")
            paths.append(p)
        return paths


def analyze_run(run_dir, lexicon: TermLexicon | None = None, group_size: int = DEFAULT_GROUP_SIZE,
                margin: float = DEFAULT_MARGIN) -> AnalysisReport:
    """Every metric for a finished run directory; reads only, never writes."""
    from .pipeline import bundled

    by_round, rows = load_run(run_dir)
    lexicon = lexicon or load_lexicon(bundled("lexicon.txt"))
    return AnalysisReport(intra=intra_round_convergence(by_round), inter=inter_round_continuity(by_round),
                          terms=term_growth(by_round, lexicon),
                          quality=quality_groups(rows, group_size, margin))


def markdown_report(run_dir, report: AnalysisReport | None = None) -> str:
    run_dir = Path(run_dir)
    report = report or analyze_run(run_dir)
    cfg = json.loads((run_dir / "config.json").read_text(encoding="utf-8")) if (run_dir / "config.json").exists() else {}
    lines = ["# Run report", ""]
    if cfg:
        lines += [f"- Topic: {cfg.get('topic')}", f"- Target disciplines: {', '.join(cfg.get('target_disciplines', []))}",
                  f"- Rounds: {cfg.get('rounds')}, ideas per round: {cfg.get('ideas_per_round')}, seed: {cfg.get('seed')}",
                  ""]
    lines += ["## Rounds", "", "| Round | Discipline | Problem cluster | Ideas | Best idea (ICLR overall) |",
              "|---|---|---|---|---|"]
    for f in sorted((run_dir / "rounds").glob("round_*.json")):
        rec = json.loads(f.read_text(encoding="utf-8"))
        metas = rec.get("meta_reviews", {}).get("ICLR", {})
        best = max(rec["ideas"], key=lambda i: (metas[i["id"]]["scores"]["overall"] if i["id"] in metas else -1, i["id"]),
                   default=None)
        best_txt = f"{best['title']} ({metas[best['id']]['scores']['overall']:.2f})" if best and best["id"] in metas else "-"
        lines.append(f"| {rec['round']} | {rec['discipline']} | {rec['selected_cluster']} | {len(rec['ideas'])} | {best_txt} |")
    lines += ["", "## Convergence", "", "| Round | Intra-round similarity | Cumulative terms |", "|---|---|---|"]
    for r in sorted(report.terms):
        intra = report.intra.get(r)
        lines.append(f"| {r} | {'-' if intra is None else f'{intra:.4f}'} | {report.terms[r]} |")
    lines += ["", "| Rounds | Inter-round similarity |", "|---|---|"]
    lines += [f"| {a}-{b} | {v:.4f} |" for a, b, v in report.inter]
    q = report.quality
    lines += ["", "## Quality by idea group", "",
              "Groups are blocks of consecutive ideas in creation order, numbered from 1. The emergent index below "
              "is a group index, not a round index; quality_groups.csv lists the first and last idea of every group.", "",
              q.table(), ""]
    if q.partial:
        lines.append("Fewer ideas than one full group; the single group is partial.")
    if q.emergent_group is None:
        lines.append(f"No group improves on group 1 by more than {q.margin}.")
    else:
        lines.append(f"Earliest improvement at group {q.emergent_group}: " +
                     ", ".join(f"{m} {v}" for m, v in q.improvements.items()))
    return "\n".join(lines) + "\n"
