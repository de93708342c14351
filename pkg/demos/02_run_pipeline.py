"""Run the full ideation loop from demos/config.yaml and look at what it wrote.

    python3 demos/02_run_pipeline.py [config.yaml]

The default config runs 10 rounds of 5 ideas against the mock backend in a
few seconds. Rerunning it reproduces every record byte for byte.
"""

from __future__ import annotations

import json
import sys
from pathlib import Path

from ideaevo.analysis import analyze_run, markdown_report
from ideaevo.pipeline import load_config, run

HERE = Path(__file__).resolve().parent


def main(config_path=HERE / "config.yaml"):
    cfg = load_config(config_path)
    print(f"topic: {cfg.topic}")
    print(f"targets: {', '.join(cfg.target_disciplines)}; {cfg.rounds} rounds x {cfg.ideas_per_round} ideas")
    summary = run(cfg)
    out = Path(summary.output_dir)
    print(f"\n{summary.rounds_completed} rounds, {summary.ideas} ideas -> {out}")

    for f in sorted((out / "rounds").glob("round_*.json")):
        rec = json.loads(f.read_text())
        best = max(rec["ideas"], key=lambda i: rec["meta_reviews"]["ICLR"][i["id"]]["scores"]["overall"])
        score = rec["meta_reviews"]["ICLR"][best["id"]]["scores"]["overall"]
        print(f"  round {rec['round']:2d}  {rec['discipline']:<18} pruned {len(rec['pruned']):2d}  "
              f"best {score:.2f}  {best['title'][:60]}")

    report = analyze_run(out)
    paths = report.write(out / "analysis")
    (out / "report.md").write_text(markdown_report(out, report))
    print("\nanalysis tables: " + ", ".join(p.name for p in paths))
    q = report.quality
    if q.emergent_group is None:
        print("no idea group cleared the improvement margin on every metric")
    else:
        print(f"quality jump at idea group {q.emergent_group}: " +
              ", ".join(f"{m} {v}" for m, v in q.improvements.items()))


if __name__ == "__main__":
    main(*sys.argv[1:])
