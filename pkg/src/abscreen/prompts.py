"""Inclusion/exclusion criteria and deterministic screening-prompt rendering.

Criteria are data, not code: the raw and stratified forms are both just
ordered lists of labeled sections, and the inclusion-bias variant appends a
single heuristic section. Rendering is a pure function of (criteria, record,
options), so identical inputs always produce identical prompt bytes.
"""

from __future__ import annotations

import json
import re
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Optional, Sequence

from .corpus import Record

DEFAULT_INCLUDE_TOKEN = "INCLUDE"
DEFAULT_EXCLUDE_TOKEN = "EXCLUDE"
ABSTRACT_SENTINEL = "[not available]"
DEFAULT_HEURISTIC = (
    "If the inclusion criteria are plausibly satisfied, lean towards inclusion. "
    "When unsure, include."
)


class CriteriaError(Exception):
    pass


class EmptyCriteria(CriteriaError):
    pass


class InvalidCriteria(CriteriaError):
    pass


class AlreadyBiased(CriteriaError):
    pass


class AmbiguousCriteriaText(CriteriaError):
    """A decision token appears verbatim in the criteria text."""


@dataclass(frozen=True)
class CriterionSection:
    label: str
    body: str


@dataclass(frozen=True)
class Criteria:
    inclusion: tuple[CriterionSection, ...]
    exclusion: tuple[CriterionSection, ...]
    form: str = "raw"  # "raw" | "stratified"
    inclusion_bias: bool = False

    def __post_init__(self):
        if not self.inclusion or not self.exclusion:
            raise EmptyCriteria("need at least one inclusion and one exclusion criterion")
        if self.form not in ("raw", "stratified"):
            raise InvalidCriteria(f"unknown criteria form {self.form!r}")
        for side, sections in (("inclusion", self.inclusion), ("exclusion", self.exclusion)):
            labels = [s.label for s in sections]
            if len(set(labels)) != len(labels):
                raise InvalidCriteria(f"duplicate {side} section labels")
            for s in sections:
                if not s.body.strip():
                    raise InvalidCriteria(f"{side} section {s.label!r} has an empty body")


@dataclass(frozen=True)
class PromptOptions:
    decision_tokens: tuple[str, str] = (DEFAULT_INCLUDE_TOKEN, DEFAULT_EXCLUDE_TOKEN)
    max_rationale_words: Optional[int] = None
    role: str = "actor"  # "actor" | "critic"

    def __post_init__(self):
        inc, exc = self.decision_tokens
        if not inc or not exc or inc == exc:
            raise InvalidCriteria("decision tokens must be distinct and non-empty")
        if self.role not in ("actor", "critic"):
            raise InvalidCriteria(f"unknown prompt role {self.role!r}")

    @property
    def include_token(self) -> str:
        return self.decision_tokens[0]

    @property
    def exclude_token(self) -> str:
        return self.decision_tokens[1]


@dataclass(frozen=True)
class Exemplar:
    """A human-labeled worked example injected into few-shot prompts."""

    title: str
    decision: str  # "include" | "exclude"


def apply_inclusion_bias(criteria: Criteria, heuristic: str = DEFAULT_HEURISTIC) -> Criteria:
    """Return a biased copy with a Heuristic section appended to the inclusions.

    The original criteria object is never modified; applying the bias twice
    raises :class:`AlreadyBiased`.
    """
    if criteria.inclusion_bias:
        raise AlreadyBiased("criteria already carry an inclusion-bias heuristic")
    section = CriterionSection(label="Heuristic", body=heuristic)
    return replace(criteria, inclusion=criteria.inclusion + (section,), inclusion_bias=True)


def _check_token_safety(criteria: Criteria, options: PromptOptions) -> None:
    # Tokens are matched case-sensitively here: ordinary prose like
    # "lean towards inclusion" must pass, a literal INCLUDE must not.
    for token in options.decision_tokens:
        pattern = re.compile(rf"\b{re.escape(token)}\b")
        for section in criteria.inclusion + criteria.exclusion:
            if pattern.search(section.body) or pattern.search(section.label):
                raise AmbiguousCriteriaText(
                    f"decision token {token!r} appears in criteria section {section.label!r}"
                )


def _sections_block(sections: Sequence[CriterionSection]) -> str:
    letters = "ABCDEFGHIJKLMNOPQRSTUVWXYZ"
    lines = []
    for i, s in enumerate(sections):
        letter = letters[i] if i < len(letters) else str(i + 1)
        lines.append(f"{letter}) {s.label}: {s.body}")
    return "\n".join(lines)


def _checklist_block(criteria: Criteria) -> str:
    lines = []
    for i, s in enumerate(criteria.inclusion, start=1):
        lines.append(f"- Inclusion-{i} ({s.label}) met? (yes/no)")
    for i, s in enumerate(criteria.exclusion, start=1):
        lines.append(f"- Exclusion-{i} ({s.label}) applies? (yes/no)")
    return "\n".join(lines)


def _output_contract(options: PromptOptions) -> str:
    inc, exc = options.decision_tokens
    lines = [
        f"Decision: {inc} or {exc}",
        "Confidence: number between 0 and 1",
    ]
    if options.max_rationale_words is not None:
        lines.append(f"Rationale: at most {options.max_rationale_words} words")
        head = "Output exactly three lines:"
    else:
        head = "Output exactly two lines:"
    return head + "\n\n" + "\n\n".join(lines)


def _exemplar_block(exemplars: Sequence[Exemplar], options: PromptOptions) -> str:
    lines = ["Worked examples from human reviewers:"]
    for ex in exemplars:
        token = options.include_token if ex.decision == "include" else options.exclude_token
        lines.append(f"- Human-labeled {token}: {ex.title}")
    return "\n".join(lines)


def truncate_words(text: str, max_words: Optional[int]) -> str:
    if max_words is None:
        return text
    words = text.split()
    if len(words) <= max_words:
        return text
    return " ".join(words[:max_words])


def render_prompt(
    criteria: Criteria,
    record: Record,
    options: PromptOptions,
    exemplars: Sequence[Exemplar] = (),
) -> str:
    """Render the actor screening prompt for one record."""
    if options.role != "actor":
        raise InvalidCriteria("render_prompt requires actor options; use render_critic_prompt")
    return _render(criteria, record, options, context_block=None, exemplars=exemplars)


def render_critic_prompt(
    criteria: Criteria,
    record: Record,
    actor_decision: "ScreeningDecision",
    options: PromptOptions,
    exemplars: Sequence[Exemplar] = (),
) -> str:
    """Render the critic prompt: same structure plus the actor's verdict in context."""
    if options.role != "critic":
        raise InvalidCriteria("render_critic_prompt requires critic options")
    if actor_decision is None:
        raise InvalidCriteria("critic prompt needs the actor decision")
    token = options.include_token if actor_decision.decision == "include" else options.exclude_token
    lines = [
        "A first reviewer has already screened this abstract.",
        f"They decided {token} with confidence {actor_decision.confidence:g}.",
    ]
    if actor_decision.rationale:
        rationale = truncate_words(actor_decision.rationale, options.max_rationale_words)
        lines.append(f"Their rationale: {rationale}")
    lines.append(
        "Re-evaluate the abstract yourself against the full criteria and either "
        "endorse or correct that decision."
    )
    return _render(criteria, record, options, context_block="\n".join(lines), exemplars=exemplars)


def _render(
    criteria: Criteria,
    record: Record,
    options: PromptOptions,
    context_block: Optional[str],
    exemplars: Sequence[Exemplar],
) -> str:
    _check_token_safety(criteria, options)
    abstract = record.abstract if record.abstract else ABSTRACT_SENTINEL
    parts = [
        "You are assisting with abstract screening.",
        "Inclusion Criteria:\n" + _sections_block(criteria.inclusion),
        "Exclusion Criteria:\n" + _sections_block(criteria.exclusion),
        f"Title: {record.title}",
        f"Abstract: {abstract}",
    ]
    if context_block is not None:
        parts.append(context_block)
    if exemplars:
        parts.append(_exemplar_block(exemplars, options))
    parts.append("Decide whether to Include or Exclude based on the criteria.")
    parts.append("Evaluate in this strict order:\n" + _checklist_block(criteria))
    parts.append(
        "Rules:\n"
        '- Include only if ALL inclusions are "yes" AND ALL exclusions are "no".\n'
        '- If any inclusion is "no" or any exclusion is "yes", Exclude.\n'
        '- Quote ≤12 words of supporting evidence from the Abstract when you say "yes".'
    )
    parts.append(_output_contract(options))
    return "\n\n".join(parts) + "\n"


def load_criteria(path: str | Path) -> Criteria:
    """Load a criteria document (JSON; round-trips losslessly via save_criteria)."""
    data = json.loads(Path(path).read_text(encoding="utf-8"))
    try:
        inclusion = tuple(CriterionSection(s["label"], s["body"]) for s in data["inclusion"])
        exclusion = tuple(CriterionSection(s["label"], s["body"]) for s in data["exclusion"])
    except (KeyError, TypeError) as exc:
        raise InvalidCriteria(f"malformed criteria file {path}: {exc}") from exc
    return Criteria(
        inclusion=inclusion,
        exclusion=exclusion,
        form=data.get("form", "raw"),
        inclusion_bias=bool(data.get("inclusion_bias", False)),
    )


def save_criteria(criteria: Criteria, path: str | Path) -> None:
    doc = {
        "form": criteria.form,
        "inclusion_bias": criteria.inclusion_bias,
        "inclusion": [{"label": s.label, "body": s.body} for s in criteria.inclusion],
        "exclusion": [{"label": s.label, "body": s.body} for s in criteria.exclusion],
    }
    Path(path).write_text(json.dumps(doc, indent=2, ensure_ascii=False) + "\n", encoding="utf-8")
