#!/usr/bin/env python3
"""End-to-end demo: generate fixtures, screen with the mock provider, evaluate.

Runs the full actor-critic pipeline on a synthetic corpus and prints the
final-includes evaluation report, then compares the three ensemble rules on
the same planted decisions.

Usage:
    python3 scripts/run_demo.py [workdir] [--n-records 200]
"""

from __future__ import annotations

import argparse
import json
import subprocess
import sys
from pathlib import Path

from abscreen.cli import main as cli_main


def run(workdir: Path, n_records: int) -> None:
    subprocess.run(
        [sys.executable, str(Path(__file__).with_name("make_demo_fixtures.py")),
         str(workdir), "--n-records", str(n_records)],
        check=True,
    )
    config = json.loads((workdir / "config.json").read_text(encoding="utf-8"))

    for rule in ("any_include", "critic_veto", "agreement_required"):
        run_dir = workdir / f"run_{rule}"
        rule_config = dict(config, rule=rule)
        config_path = workdir / f"config_{rule}.json"
        config_path.write_text(json.dumps(rule_config, indent=2), encoding="utf-8")
        code = cli_main(["screen", "--config", str(config_path), "--run-dir", str(run_dir)])
        if code != 0:
            raise SystemExit(code)
        report = json.loads((run_dir / "report_final.json").read_text(encoding="utf-8"))
        d = report["display"]
        print(f"{rule:>20}: sensitivity {d['sensitivity']:>8}  specificity {d['specificity']:>8}  "
              f"auc {d['auc']}  brier {d['brier']}  ece {d['ece']}")


def main() -> None:
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("workdir", nargs="?", type=Path, default=Path("demo"))
    parser.add_argument("--n-records", type=int, default=200)
    args = parser.parse_args()
    run(args.workdir, args.n_records)


if __name__ == "__main__":
    main()
