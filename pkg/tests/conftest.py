"""Shared fixtures: synthetic corpora, criteria, and file builders."""

from __future__ import annotations

import csv
import json
from pathlib import Path

import pytest

from abscreen.corpus import Record, load_corpus
from abscreen.prompts import Criteria, CriterionSection, PromptOptions


def write_corpus_csv(path: Path, rows: list[dict], header: list[str] | None = None) -> Path:
    header = header or ["id", "title", "abstract", "year", "doi"]
    with path.open("w", encoding="utf-8", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=header, extrasaction="ignore")
        writer.writeheader()
        for row in rows:
            writer.writerow(row)
    return path


def write_label_csv(path: Path, titles: list[str]) -> Path:
    with path.open("w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["title"])
        for t in titles:
            writer.writerow([t])
    return path


def make_record(record_id: str = "r1", title: str = "A study", abstract: str = "Some text",
                **kwargs) -> Record:
    return Record(record_id=record_id, title=title, abstract=abstract, **kwargs)


@pytest.fixture
def criteria() -> Criteria:
    return Criteria(
        inclusion=(
            CriterionSection("Population", "Adults with the condition of interest."),
            CriterionSection("Outcome", "Reports prevalence of the outcome."),
        ),
        exclusion=(
            CriterionSection("Study Type", "Reviews, protocols, and case reports."),
        ),
    )


@pytest.fixture
def actor_options() -> PromptOptions:
    return PromptOptions(role="actor")


@pytest.fixture
def critic_options() -> PromptOptions:
    return PromptOptions(role="critic")


@pytest.fixture
def criteria_file(tmp_path: Path, criteria: Criteria) -> Path:
    from abscreen.prompts import save_criteria

    path = tmp_path / "criteria.json"
    save_criteria(criteria, path)
    return path


@pytest.fixture
def small_corpus(tmp_path: Path):
    rows = [
        {"id": f"rec{i:02d}", "title": f"Study number {i}", "abstract": f"Abstract body {i} " * 3,
         "year": 2000 + i}
        for i in range(10)
    ]
    path = write_corpus_csv(tmp_path / "corpus.csv", rows)
    return load_corpus(path)


def review1_style_rows(n: int = 821, n_missing: int = 25) -> list[dict]:
    """Deterministic corpus shaped like a large review export."""
    rows = []
    for i in range(n):
        missing = i % (n // n_missing) == 0 and i // (n // n_missing) < n_missing
        rows.append(
            {
                "id": f"rv{i:04d}",
                "title": f"Digital phenotyping study {i:04d}",
                "abstract": "" if missing else "Background and methods. " * (5 + i % 40),
                "year": 2010 + (i % 15),
            }
        )
    assert sum(1 for r in rows if not r["abstract"]) == n_missing
    return rows


def median_1779_rows() -> list[dict]:
    """63 final-include records whose non-empty abstract median is 1779 chars."""
    rows = []
    for i in range(63):
        length = 1748 + i  # sorted middle (index 31) is 1779
        rows.append(
            {
                "id": f"fi{i:02d}",
                "title": f"Included record {i:02d}",
                "abstract": "x" * length,
                "year": 2021,
            }
        )
    return rows
