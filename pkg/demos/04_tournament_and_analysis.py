"""Pairwise tournament plus the convergence metrics on a finished run.

    python3 demos/04_tournament_and_analysis.py [run_dir]

Uses the run written by 02_run_pipeline.py (runs/demo by default). The
tournament ranks that run's ideas against a handful of plain baseline
ideas with the mock comparator.
"""

from __future__ import annotations

import json
import sys
from pathlib import Path

from ideaevo.analysis import analyze_run
from ideaevo.llm_provider import make_client
from ideaevo.review import LLMComparator, compute_metrics, run_tournament


def main(run_dir="runs/demo"):
    run_dir = Path(run_dir)
    if not (run_dir / "ideas.json").exists():
        sys.exit(f"{run_dir} has no ideas.json; run demos/02_run_pipeline.py first")
    ideas = json.loads((run_dir / "ideas.json").read_text())[:12]
    baseline = [{"id": f"base{k:02d}", "title": f"Survey of diffusion measurements, part {k}",
                 "body": "Collect published diffusion coefficients and fit a single model."} for k in range(6)]
    pool = {d["id"]: d for d in ideas + baseline}
    labels = {i: ("baseline" if i.startswith("base") else "evolved") for i in pool}

    client = make_client("mock", seed=0)
    state = run_tournament(sorted(pool), rounds=5, comparator=LLMComparator(client, pool, seed=0), seed=0)
    n = len(pool)
    print(f"{n} ideas, 5 rounds: total points {sum(state.points.values())} (expected {n + 5 * (n // 2)})")
    avg, top = compute_metrics({"demo": state}, labels, k=5)
    for method in sorted(avg):
        print(f"  {method:<9} avg wins {avg[method]:.2f}  in top 5: {top[method]}")

    report = analyze_run(run_dir)
    print("\nround  intra-sim  cumulative terms")
    for r in sorted(report.terms):
        intra = report.intra.get(r)
        print(f"  {r:3d}   {'-' if intra is None else f'{intra:.3f}':>7}   {report.terms[r]:5d}")
    print("inter-round similarity: " + ", ".join(f"{a}->{b} {v:.3f}" for a, b, v in report.inter))


if __name__ == "__main__":
    main(*sys.argv[1:])
