"""Corpus ingestion: title/abstract CSV loading, label files, descriptive stats.

Input CSVs are heterogeneous review exports, so decoding is UTF-8 with
replacement and all fields are whitespace-normalized on the way in. Records
with an empty title are rejected at load (counted, not fatal); records with
an empty abstract are kept and flagged so they can be screened title-only.
"""

from __future__ import annotations

import csv
import hashlib
import io
import json
import re
import statistics
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Optional


class CorpusError(Exception):
    """Base class for corpus-loading failures."""


class MissingTitleColumn(CorpusError):
    pass


class DuplicateRecordId(CorpusError):
    def __init__(self, ids: Iterable[str]):
        self.ids = sorted(set(ids))
        super().__init__(f"duplicate record ids: {', '.join(self.ids)}")


class EmptyCorpus(CorpusError):
    pass


class LabelConflict(CorpusError):
    def __init__(self, ids: Iterable[str]):
        self.ids = sorted(set(ids))
        super().__init__(f"records labeled both include and exclude: {', '.join(self.ids)}")


OPEN_ACCESS_STATES = ("open", "closed", "unknown")

# Default header names tried, in order, for each logical column.
DEFAULT_COLUMNS = {
    "id": ("id", "record_id", "Id", "ID"),
    "title": ("title", "Title"),
    "abstract": ("abstract", "Abstract"),
    "year": ("year", "Year", "publication_year"),
    "doi": ("doi", "DOI"),
    "open_access": ("open_access", "oa_status"),
}

_WS_RE = re.compile(r"\s+")
_YEAR_RE = re.compile(r"\b(\d{4})\b")


def collapse_ws(text: str) -> str:
    """Trim and collapse internal whitespace runs to single spaces."""
    return _WS_RE.sub(" ", text).strip()


def normalize_title_key(title: str) -> str:
    """Matching key for a title: case-folded, whitespace-collapsed, trailing punctuation stripped."""
    return collapse_ws(title).casefold().rstrip(" .,;:!?")


def title_record_id(title: str) -> str:
    """Stable record id derived from the normalized title."""
    digest = hashlib.sha1(normalize_title_key(title).encode("utf-8")).hexdigest()
    return f"t{digest[:16]}"


@dataclass(frozen=True)
class Record:
    """One abstract-screening unit."""

    record_id: str
    title: str
    abstract: str
    year: Optional[int] = None
    doi: Optional[str] = None
    open_access: str = "unknown"

    @property
    def abstract_missing(self) -> bool:
        return self.abstract == ""

    @property
    def title_key(self) -> str:
        return normalize_title_key(self.title)


@dataclass(frozen=True)
class CorpusStats:
    n_records: int
    n_missing_abstract: int
    abstract_length_chars: tuple[int, ...]
    publication_years: tuple[int, ...]
    median_abstract_length: Optional[float]
    open_access_counts: dict[str, int]

    def to_dict(self) -> dict:
        return {
            "n_records": self.n_records,
            "n_missing_abstract": self.n_missing_abstract,
            "median_abstract_length": self.median_abstract_length,
            "open_access_counts": dict(self.open_access_counts),
            "abstract_length_chars": list(self.abstract_length_chars),
            "publication_years": list(self.publication_years),
        }


@dataclass(frozen=True)
class Corpus:
    records: tuple[Record, ...]
    stats: CorpusStats
    n_rejected_no_title: int = 0

    def __len__(self) -> int:
        return len(self.records)

    def by_id(self) -> dict[str, Record]:
        return {r.record_id: r for r in self.records}

    def by_title_key(self) -> dict[str, Record]:
        return {r.title_key: r for r in self.records}


@dataclass(frozen=True)
class LabelSet:
    """Human ground truth at one evaluation level.

    ``unmatched`` carries label rows that matched no corpus record; they are
    reported, never fatal. ``unlabeled`` is the set of corpus records absent
    from both files.
    """

    level: str  # "fulltext" | "final"
    includes: frozenset[str]
    excludes: frozenset[str]
    unlabeled: frozenset[str] = frozenset()
    unmatched: tuple[str, ...] = ()

    def truth_of(self, record_id: str) -> Optional[bool]:
        if record_id in self.includes:
            return True
        if record_id in self.excludes:
            return False
        return None


def corpus_stats(records: Iterable[Record]) -> CorpusStats:
    """Descriptive statistics over raw (untruncated) abstracts and parsed years."""
    records = list(records)
    if not records:
        raise EmptyCorpus("cannot compute stats for an empty corpus")
    lengths = tuple(len(r.abstract) for r in records)
    nonempty = [n for n in lengths if n > 0]
    years = tuple(r.year for r in records if r.year is not None)
    counts = {state: 0 for state in OPEN_ACCESS_STATES}
    for r in records:
        counts[r.open_access] += 1
    return CorpusStats(
        n_records=len(records),
        n_missing_abstract=sum(1 for n in lengths if n == 0),
        abstract_length_chars=lengths,
        publication_years=years,
        median_abstract_length=float(statistics.median(nonempty)) if nonempty else None,
        open_access_counts=counts,
    )


def _resolve_column(header: list[str], logical: str, column_map: Optional[dict]) -> Optional[str]:
    if column_map and logical in column_map:
        name = column_map[logical]
        return name if name in header else None
    for candidate in DEFAULT_COLUMNS[logical]:
        if candidate in header:
            return candidate
    return None


def _parse_year(raw: str) -> Optional[int]:
    raw = raw.strip()
    if not raw:
        return None
    try:
        return int(raw)
    except ValueError:
        m = _YEAR_RE.search(raw)
        return int(m.group(1)) if m else None


def load_corpus(path: str | Path, column_map: Optional[dict] = None) -> Corpus:
    """Load a title/abstract CSV into a normalized, immutable corpus.

    The title column is required (default names ``title``/``Title``,
    overridable via ``column_map``). Record ids come from an id column when
    present, otherwise from a hash of the normalized title; collisions raise
    :class:`DuplicateRecordId`.
    """
    text = Path(path).read_bytes().decode("utf-8", errors="replace")
    reader = csv.DictReader(io.StringIO(text))
    header = reader.fieldnames or []
    title_col = _resolve_column(header, "title", column_map)
    if title_col is None:
        raise MissingTitleColumn(f"no title column among {header!r}")
    cols = {k: _resolve_column(header, k, column_map) for k in DEFAULT_COLUMNS}

    records: list[Record] = []
    rejected = 0
    for row in reader:
        title = collapse_ws(row.get(title_col) or "")
        if not title:
            rejected += 1
            continue
        abstract = collapse_ws(row.get(cols["abstract"]) or "") if cols["abstract"] else ""
        rid = collapse_ws(row.get(cols["id"]) or "") if cols["id"] else ""
        if not rid:
            rid = title_record_id(title)
        year = _parse_year(row.get(cols["year"]) or "") if cols["year"] else None
        doi = collapse_ws(row.get(cols["doi"]) or "") if cols["doi"] else ""
        oa = (row.get(cols["open_access"]) or "").strip().lower() if cols["open_access"] else ""
        records.append(
            Record(
                record_id=rid,
                title=title,
                abstract=abstract,
                year=year,
                doi=doi or None,
                open_access=oa if oa in OPEN_ACCESS_STATES else "unknown",
            )
        )

    if not records:
        raise EmptyCorpus(f"{path}: no usable rows")
    seen: dict[str, int] = {}
    for r in records:
        seen[r.record_id] = seen.get(r.record_id, 0) + 1
    dupes = [rid for rid, n in seen.items() if n > 1]
    if dupes:
        raise DuplicateRecordId(dupes)

    return Corpus(records=tuple(records), stats=corpus_stats(records), n_rejected_no_title=rejected)


def save_corpus(corpus: Corpus, path: str | Path) -> None:
    """Serialize a corpus back to normalized CSV (round-trips byte-for-byte)."""
    with Path(path).open("w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["id", "title", "abstract", "year", "doi", "open_access"])
        for r in corpus.records:
            writer.writerow(
                [r.record_id, r.title, r.abstract, r.year if r.year is not None else "", r.doi or "", r.open_access]
            )


def write_stats(stats: CorpusStats, path: str | Path) -> None:
    Path(path).write_text(json.dumps(stats.to_dict(), indent=2, sort_keys=True) + "\n", encoding="utf-8")


def _read_label_rows(path: str | Path) -> list[str]:
    """Read one title or id per row; a leading header row is optional."""
    text = Path(path).read_bytes().decode("utf-8", errors="replace")
    rows = [collapse_ws(row[0]) for row in csv.reader(io.StringIO(text)) if row and collapse_ws(row[0])]
    if rows and rows[0].casefold() in {"title", "id", "record_id"}:
        rows = rows[1:]
    return rows


def load_labels(
    includes_path: str | Path,
    excludes_path: str | Path,
    level: str,
    corpus: Corpus,
) -> LabelSet:
    """Assign every corpus record an include/exclude/unlabeled status.

    Label rows match on record id first, then on the normalized title. A
    record present in both files raises :class:`LabelConflict`; rows matching
    nothing are collected in ``unmatched``.
    """
    if level not in ("fulltext", "final"):
        raise ValueError(f"unknown label level {level!r}")
    by_id = corpus.by_id()
    by_key = corpus.by_title_key()

    def match(rows: list[str]) -> tuple[set[str], list[str]]:
        hit: set[str] = set()
        miss: list[str] = []
        for row in rows:
            if row in by_id:
                hit.add(row)
                continue
            rec = by_key.get(normalize_title_key(row))
            if rec is not None:
                hit.add(rec.record_id)
            else:
                miss.append(row)
        return hit, miss

    includes, miss_inc = match(_read_label_rows(includes_path))
    excludes, miss_exc = match(_read_label_rows(excludes_path))
    both = includes & excludes
    if both:
        raise LabelConflict(both)
    unlabeled = frozenset(by_id) - includes - excludes
    return LabelSet(
        level=level,
        includes=frozenset(includes),
        excludes=frozenset(excludes),
        unlabeled=unlabeled,
        unmatched=tuple(miss_inc + miss_exc),
    )


def verify_level_nesting(fulltext: LabelSet, final: LabelSet) -> None:
    """Check final includes are a subset of full-text includes."""
    stray = final.includes - fulltext.includes
    if stray:
        raise LabelConflict(stray)
