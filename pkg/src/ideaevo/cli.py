"""Command-line entry point: ``ideaevo <subcommand> ...``.

Exit status is 0 on success, 1 on a usage error and 2 when the command
itself fails.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from .errors import IdeaEvoError, RunHalted

EXIT_OK, EXIT_USAGE, EXIT_RUNTIME = 0, 1, 2


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(f"{self.prog}: error: {message}")


def _client(args, transcript_path=None):
    from .llm_provider import Transcript, make_client
    from .pipeline import ProviderSettings

    settings = ProviderSettings(kind=args.provider, sigma=getattr(args, "sigma", 0.2))
    transcript = Transcript(transcript_path) if transcript_path else None
    if args.provider == "mock":
        return make_client("mock", seed=args.seed, sigma=settings.sigma, transcript=transcript)
    return make_client("http", config=settings.provider_config(), transcript=transcript)


def _load_ideas(path) -> list[dict]:
    data = json.loads(Path(path).read_text(encoding="utf-8"))
    if isinstance(data, dict) and "ideas" in data:
        data = data["ideas"]
    if not isinstance(data, list) or not all(isinstance(d, dict) and {"id", "title"} <= d.keys() for d in data):
        raise IdeaEvoError(f"{path}: expected a list of ideas with 'id' and 'title'")
    return data


# --------------------------------------------------------------------------
# subcommands


def cmd_build_graph(args) -> int:
    from .pipeline import build_graph, make_embedder, EmbeddingSettings

    names = [d.strip() for d in args.disciplines.split(",") if d.strip()]
    if not names:
        raise UsageError("--disciplines needs at least one name")
    client = _client(args)
    graph = build_graph(names, client=client, embedder=make_embedder(EmbeddingSettings(), args.seed),
                        source=args.fixtures, tau=args.tau, seed=args.seed)
    graph.snapshot(args.out)
    print(f"{len(graph.disciplines)} disciplines, {len(graph.entities)} entities, "
          f"{len(graph.cross)} cross links -> {args.out}")
    return EXIT_OK


def cmd_run(args) -> int:
    from .pipeline import load_config, resume, run

    if args.resume:
        summary = resume(Path(args.resume))
    else:
        cfg = load_config(args.config, seed=args.seed, output_dir=args.output, rounds=args.rounds)
        summary = run(cfg)
    print(json.dumps(summary.to_dict(), indent=1, sort_keys=True))
    return EXIT_OK


def cmd_review(args) -> int:
    from .agent_corpus import PersonaRole, make_persona
    from .review import review_panel

    ideas = _load_ideas(args.ideas)
    styles = ["ICLR", "NeurIPS"] if args.template == "both" else [args.template]
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    client = _client(args, out / "transcript.jsonl")
    reviewers = [make_persona(PersonaRole.REVIEWER, name=f"Reviewer{i + 1}") for i in range(args.reviewers)]
    results = []
    for idea in ideas:
        entry = {"idea_id": idea["id"], "title": idea["title"]}
        for style in styles:
            singles, meta = review_panel(idea, style, reviewers, client=client, reflections=args.reflections,
                                         meta_mode=args.meta_mode, seed=args.seed)
            entry[style] = {"reviews": [e.to_dict() for e in singles], "meta": meta.to_dict()}
        results.append(entry)
    (out / "reviews.json").write_text(json.dumps(results, indent=1, sort_keys=True) + "\n", encoding="utf-8")
    lines = ["| Idea | " + " | ".join(f"{s} overall" for s in styles) + " |", "|---|" + "---|" * len(styles)]
    for e in results:
        lines.append(f"| {e['title']} | " + " | ".join(f"{e[s]['meta']['scores']['overall']:.2f}" for s in styles) + " |")
    (out / "reviews.md").write_text("# Reviews\n\n" + "\n".join(lines) + "\n", encoding="utf-8")
    print(f"reviewed {len(results)} ideas -> {out}")
    return EXIT_OK


def cmd_tournament(args) -> int:
    from .review import (LLMComparator, ScoreComparator, run_tournament, smaller_id_comparator,
                         tournament_csv, tournament_markdown)

    ideas = _load_ideas(args.ideas)
    by_topic: dict[str, list[dict]] = {}
    for d in ideas:
        by_topic.setdefault(str(d.get("topic", "all")), []).append(d)
    labels = {d["id"]: str(d.get("method", "ideaevo")) for d in ideas}
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    client = _client(args, out / "transcript.jsonl") if args.comparator == "llm" else None
    states = {}
    for topic, group in sorted(by_topic.items()):
        if args.comparator == "llm":
            comp = LLMComparator(client, {d["id"]: d for d in group}, seed=args.seed)
        elif args.comparator == "score":
            comp = ScoreComparator({d["id"]: float(d["score"]) for d in group})
        else:
            comp = smaller_id_comparator
        states[topic] = run_tournament([d["id"] for d in group], rounds=args.rounds, comparator=comp, seed=args.seed)
    (out / "tournament.csv").write_text(tournament_csv(states, labels), encoding="utf-8")
    (out / "tournament.md").write_text(tournament_markdown(states, labels, k=args.top_k), encoding="utf-8")
    (out / "tournament.json").write_text(json.dumps({t: s.to_dict() for t, s in states.items()}, indent=1,
                                                    sort_keys=True) + "\n", encoding="utf-8")
    for topic, st in states.items():
        n = len(st.points)
        expected = n + st.rounds_completed * (n // 2)
        print(f"{topic}: {n} ideas, {st.rounds_completed} rounds, total points {sum(st.points.values())} "
              f"(expected {expected})")
    return EXIT_OK


def cmd_analyze(args) -> int:
    from .analysis import analyze_run, load_lexicon

    lex = load_lexicon(args.lexicon) if args.lexicon else None
    report = analyze_run(args.run, lex, group_size=args.group_size, margin=args.margin)
    out = Path(args.out) if args.out else Path(args.run) / "analysis"
    for p in report.write(out):
        print(p)
    return EXIT_OK


def cmd_report(args) -> int:
    from .analysis import analyze_run, load_lexicon, markdown_report

    lex = load_lexicon(args.lexicon) if args.lexicon else None
    text = markdown_report(args.run, analyze_run(args.run, lex, group_size=args.group_size, margin=args.margin))
    out = Path(args.out) if args.out else Path(args.run) / "report.md"
    out.parent.mkdir(parents=True, exist_ok=True)
    out.write_text(text, encoding="utf-8")
    print(out)
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="ideaevo", description="Evolutionary multi-agent research ideation.")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", parser_class=_Parser)
    sub.required = True

    def provider_flags(sp):
        sp.add_argument("--provider", choices=["mock", "http"], default="mock")
        sp.add_argument("--seed", type=int, default=0)

    sp = sub.add_parser("build-graph", help="disciplines + recorded pages -> graph file")
    sp.add_argument("--disciplines", required=True, help="comma-separated discipline names")
    sp.add_argument("--fixtures", default="bundled", help="'bundled', 'live', or a directory of recorded pages")
    sp.add_argument("--out", required=True)
    sp.add_argument("--tau", type=float, default=0.8)
    provider_flags(sp)
    sp.set_defaults(func=cmd_build_graph)

    sp = sub.add_parser("run", help="run config -> full pipeline")
    g = sp.add_mutually_exclusive_group(required=True)
    g.add_argument("--config")
    g.add_argument("--resume", help="run directory or checkpoint file to continue")
    sp.add_argument("--seed", type=int)
    sp.add_argument("--output")
    sp.add_argument("--rounds", type=int)
    sp.set_defaults(func=cmd_run)

    sp = sub.add_parser("review", help="ideas file -> review reports")
    sp.add_argument("--ideas", required=True)
    sp.add_argument("--out", required=True)
    sp.add_argument("--template", choices=["ICLR", "NeurIPS", "both"], default="both")
    sp.add_argument("--reviewers", type=int, default=3)
    sp.add_argument("--reflections", type=int, default=1)
    sp.add_argument("--meta-mode", choices=["llm", "mean"], default="llm")
    sp.add_argument("--sigma", type=float, default=0.2, help="score noise of the mock reviewer")
    provider_flags(sp)
    sp.set_defaults(func=cmd_review)

    sp = sub.add_parser("tournament", help="ideas file -> ranking reports")
    sp.add_argument("--ideas", required=True)
    sp.add_argument("--out", default="tournament")
    sp.add_argument("--rounds", type=int, default=5)
    sp.add_argument("--comparator", choices=["llm", "score", "id"], default="llm")
    sp.add_argument("--top-k", type=int, default=10)
    provider_flags(sp)
    sp.set_defaults(func=cmd_tournament)

    for name, func, helptext in (("analyze", cmd_analyze, "run dir -> analysis CSVs"),
                                 ("report", cmd_report, "run dir -> Markdown summary")):
        sp = sub.add_parser(name, help=helptext)
        sp.add_argument("--run", required=True)
        sp.add_argument("--out")
        sp.add_argument("--lexicon")
        sp.add_argument("--group-size", type=int, default=10)
        sp.add_argument("--margin", type=float, default=0.1)
        sp.set_defaults(func=func)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return EXIT_USAGE
    logging.basicConfig(level=logging.INFO if args.verbose else logging.ERROR, format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"ideaevo: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except RunHalted as exc:
        print(f"ideaevo: {exc} (checkpoint: {exc.checkpoint}, completed rounds: {exc.completed_rounds})",
              file=sys.stderr)
        return EXIT_RUNTIME
    except (IdeaEvoError, OSError, ValueError, KeyError, json.JSONDecodeError) as exc:
        print(f"ideaevo: error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
