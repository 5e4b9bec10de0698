#!/usr/bin/env python3
"""Generate a synthetic demo workspace: corpus, criteria, planted mock script, labels.

The mock script plants a ground truth with deliberate actor mistakes so the
evaluation report is non-trivial. Everything is deterministic for a given
seed.

Usage:
    python3 scripts/make_demo_fixtures.py demo/ --n-records 200 --seed 7
"""

from __future__ import annotations

import argparse
import csv
import json
import random
from pathlib import Path


CRITERIA = {
    "form": "stratified",
    "inclusion_bias": False,
    "inclusion": [
        {"label": "Population", "body": "Adults receiving care for the condition of interest."},
        {"label": "Outcome / Exposure", "body": "Reports prevalence or incidence of the outcome "
                                                "with a consistent definition."},
        {"label": "Study Type / Design", "body": "Any quantitative primary study design."},
    ],
    "exclusion": [
        {"label": "Study Type / Design", "body": "Reviews, protocols, conference abstracts, and "
                                                 "case reports."},
    ],
}

TOPICS = [
    "remote symptom monitoring", "wearable actigraphy", "speech biomarkers",
    "prodromal symptom prevalence", "cohort follow-up", "screening questionnaires",
]


def main() -> None:
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("out_dir", type=Path)
    parser.add_argument("--n-records", type=int, default=200)
    parser.add_argument("--seed", type=int, default=7)
    parser.add_argument("--include-rate", type=float, default=0.2)
    parser.add_argument("--actor-miss-rate", type=float, default=0.1,
                        help="fraction of true includes the planted actor misses")
    parser.add_argument("--actor-false-include-rate", type=float, default=0.08)
    args = parser.parse_args()

    rng = random.Random(args.seed)
    out = args.out_dir
    out.mkdir(parents=True, exist_ok=True)

    rows = []
    truth_include = []
    for i in range(args.n_records):
        topic = rng.choice(TOPICS)
        title = f"Study {i:04d}: {topic} in a clinical cohort"
        missing = rng.random() < 0.03
        abstract = "" if missing else (
            f"Background on {topic}. Methods and cohort description. "
            f"Findings paragraph {i}. " * rng.randint(2, 8)
        )
        year = rng.randint(1995, 2024)
        rows.append({"id": f"rec{i:04d}", "title": title, "abstract": abstract, "year": year})
        truth_include.append(rng.random() < args.include_rate)

    with (out / "corpus.csv").open("w", encoding="utf-8", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=["id", "title", "abstract", "year"])
        writer.writeheader()
        writer.writerows(rows)

    (out / "criteria.json").write_text(json.dumps(CRITERIA, indent=2) + "\n", encoding="utf-8")

    def plant_script(miss_rate: float, false_include_rate: float, path: Path) -> None:
        records = {}
        for row, truth in zip(rows, truth_include):
            if truth:
                decision = "exclude" if rng.random() < miss_rate else "include"
            else:
                decision = "include" if rng.random() < false_include_rate else "exclude"
            confidence = round(rng.uniform(0.55, 0.99), 2)
            records[row["id"]] = {"decision": decision, "confidence": confidence}
        path.write_text(
            json.dumps({"records": records,
                        "default": {"decision": "exclude", "confidence": 0.8}}, indent=2) + "\n",
            encoding="utf-8",
        )

    # Distinct error profiles: a recall-leaning actor, a conservative critic.
    plant_script(args.actor_miss_rate, args.actor_false_include_rate, out / "mock_script.json")
    plant_script(args.actor_miss_rate * 2, args.actor_false_include_rate / 2,
                 out / "mock_critic_script.json")

    with (out / "includes.csv").open("w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["title"])
        writer.writerows([[r["title"]] for r, t in zip(rows, truth_include) if t])
    with (out / "excludes.csv").open("w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["title"])
        writer.writerows([[r["title"]] for r, t in zip(rows, truth_include) if not t])

    config = {
        "corpus_path": str(out / "corpus.csv"),
        "criteria_path": str(out / "criteria.json"),
        "actor_model_id": f"mock:script:{out / 'mock_script.json'}",
        "critic_model_id": f"mock:script:{out / 'mock_critic_script.json'}",
        "mode": "actor_critic",
        "rule": "any_include",
        "labels": {"final": {"includes": str(out / "includes.csv"),
                             "excludes": str(out / "excludes.csv")}},
    }
    (out / "config.json").write_text(json.dumps(config, indent=2) + "\n", encoding="utf-8")

    n_inc = sum(truth_include)
    print(f"wrote {args.n_records} records ({n_inc} true includes) to {out}")
    print(f"next: abscreen screen --config {out / 'config.json'} --run-dir {out / 'run'}")


if __name__ == "__main__":
    main()
