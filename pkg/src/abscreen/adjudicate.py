"""Decision parsing and actor-critic adjudication.

Providers are told to output exactly two lines, but in practice they often
echo the checklist first, so the parser keys on the LAST matching decision
and confidence lines. Combination rules:

* ``any_include``         include iff actor OR critic said include
* ``agreement_required``  include iff actor AND critic said include
* ``critic_veto``         actor excludes stand; actor includes are decided
                          by the critic

Whenever both verdicts are present the aggregated confidence is their
arithmetic mean; a veto-mode actor exclude never reaches the critic, so it
keeps the actor's confidence.
"""

from __future__ import annotations

import csv
import re
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Optional, Sequence

from .prompts import PromptOptions

RULES = ("single", "any_include", "critic_veto", "agreement_required")
CRITIC_RULES = ("any_include", "critic_veto", "agreement_required")


class ParseError(Exception):
    pass


class MissingDecisionLine(ParseError):
    pass


class MissingConfidenceLine(ParseError):
    pass


class UnknownDecisionToken(ParseError):
    pass


class ConfidenceOutOfRange(ParseError):
    pass


class AdjudicationError(Exception):
    pass


class MixedRecordIds(AdjudicationError):
    pass


class MissingCriticDecision(AdjudicationError):
    pass


@dataclass(frozen=True)
class ScreeningDecision:
    """One model verdict for one record."""

    record_id: str
    role: str  # "actor" | "critic"
    decision: str  # "include" | "exclude"
    confidence: float
    rationale: Optional[str] = None
    replicate: int = 0

    def __post_init__(self):
        if not 0.0 <= self.confidence <= 1.0:
            raise ConfidenceOutOfRange(f"confidence {self.confidence} outside [0, 1]")
        if self.decision not in ("include", "exclude"):
            raise AdjudicationError(f"unknown decision {self.decision!r}")


@dataclass(frozen=True)
class FinalDecision:
    """Adjudicated verdict with the provenance of both model verdicts."""

    record_id: str
    decision: str
    aggregated_confidence: float
    rule: str
    actor: ScreeningDecision
    critic: Optional[ScreeningDecision] = None

    def __post_init__(self):
        if self.rule not in RULES:
            raise AdjudicationError(f"unknown rule {self.rule!r}")
        if self.rule == "single" and self.critic is not None:
            raise AdjudicationError("single rule cannot carry a critic verdict")


@dataclass(frozen=True)
class ReplicateSummary:
    record_id: str
    n_replicates: int
    include_votes: int
    majority_decision: str
    mean_confidence: float
    unanimous: bool


_DECISION_RE = re.compile(r"^[\s>*#-]*decision\s*:\s*(.+?)\s*$", re.IGNORECASE)
_CONFIDENCE_RE = re.compile(
    r"^[\s>*#-]*confidence\s*:\s*([-+]?(?:\d+\.?\d*|\.\d+)(?:[eE][-+]?\d+)?)\s*$",
    re.IGNORECASE,
)
_RATIONALE_RE = re.compile(r"^[\s>*#-]*rationale\s*:\s*(.*?)\s*$", re.IGNORECASE)


def parse_decision(
    raw_text: str,
    options: PromptOptions,
    *,
    record_id: str = "",
    role: str = "actor",
    replicate: int = 0,
) -> ScreeningDecision:
    """Extract (decision, confidence[, rationale]) from raw model output.

    Leading checklist chatter is tolerated; only the last matching lines
    count. Confidence is never clamped: out-of-range values are an error.
    """
    decision_raw = confidence_raw = rationale = None
    for line in raw_text.splitlines():
        m = _DECISION_RE.match(line)
        if m:
            decision_raw = m.group(1)
            continue
        m = _CONFIDENCE_RE.match(line)
        if m:
            confidence_raw = m.group(1)
            continue
        m = _RATIONALE_RE.match(line)
        if m:
            rationale = m.group(1) or None

    if decision_raw is None:
        raise MissingDecisionLine("no 'Decision:' line found")
    if confidence_raw is None:
        raise MissingConfidenceLine("no parseable 'Confidence:' line found")

    token = decision_raw.strip().strip("*_`").rstrip(".,;:!").strip()
    if token.casefold() == options.include_token.casefold():
        decision = "include"
    elif token.casefold() == options.exclude_token.casefold():
        decision = "exclude"
    else:
        raise UnknownDecisionToken(f"decision token {token!r} is neither "
                                   f"{options.include_token!r} nor {options.exclude_token!r}")

    confidence = float(confidence_raw)
    if not 0.0 <= confidence <= 1.0:
        raise ConfidenceOutOfRange(f"confidence {confidence} outside [0, 1]")

    return ScreeningDecision(
        record_id=record_id,
        role=role,
        decision=decision,
        confidence=confidence,
        rationale=rationale,
        replicate=replicate,
    )


def aggregate_replicates(decisions: Sequence[ScreeningDecision]) -> ReplicateSummary:
    """Fold replicate verdicts for one record into a majority summary.

    Ties break toward include: missing a relevant study costs more than an
    extra full-text read.
    """
    if not decisions:
        raise AdjudicationError("no decisions to aggregate")
    record_ids = {d.record_id for d in decisions}
    roles = {d.role for d in decisions}
    if len(record_ids) > 1 or len(roles) > 1:
        raise MixedRecordIds(f"mixed record ids {record_ids} or roles {roles}")
    votes = sum(1 for d in decisions if d.decision == "include")
    n = len(decisions)
    majority = "include" if votes * 2 >= n else "exclude"
    return ReplicateSummary(
        record_id=decisions[0].record_id,
        n_replicates=n,
        include_votes=votes,
        majority_decision=majority,
        mean_confidence=sum(d.confidence for d in decisions) / n,
        unanimous=votes in (0, n),
    )


def plan_critic_set(rule: str, actor_decisions: Iterable[ScreeningDecision]) -> set[str]:
    """Which records the critic pass must screen under the given rule."""
    if rule not in CRITIC_RULES:
        raise AdjudicationError(f"rule {rule!r} has no critic pass")
    if rule == "critic_veto":
        return {d.record_id for d in actor_decisions if d.decision == "include"}
    return {d.record_id for d in actor_decisions}


def combine(
    rule: str,
    actor: ScreeningDecision,
    critic: Optional[ScreeningDecision] = None,
) -> FinalDecision:
    """Apply one ensemble rule to an actor verdict and (maybe) a critic verdict."""
    if rule == "single":
        return FinalDecision(
            record_id=actor.record_id,
            decision=actor.decision,
            aggregated_confidence=actor.confidence,
            rule=rule,
            actor=actor,
        )
    if rule not in CRITIC_RULES:
        raise AdjudicationError(f"unknown rule {rule!r}")

    if rule == "critic_veto" and actor.decision == "exclude":
        # The critic never sees actor excludes in veto mode.
        return FinalDecision(
            record_id=actor.record_id,
            decision="exclude",
            aggregated_confidence=actor.confidence,
            rule=rule,
            actor=actor,
        )
    if critic is None:
        raise MissingCriticDecision(f"rule {rule!r} needs a critic verdict for {actor.record_id}")
    if critic.record_id != actor.record_id:
        raise MixedRecordIds(f"actor {actor.record_id} vs critic {critic.record_id}")

    if rule == "any_include":
        decision = "include" if "include" in (actor.decision, critic.decision) else "exclude"
    elif rule == "agreement_required":
        decision = "include" if actor.decision == critic.decision == "include" else "exclude"
    else:  # critic_veto with an actor include: the critic's verdict stands
        decision = critic.decision

    return FinalDecision(
        record_id=actor.record_id,
        decision=decision,
        aggregated_confidence=(actor.confidence + critic.confidence) / 2.0,
        rule=rule,
        actor=actor,
        critic=critic,
    )


DECISION_COLUMNS = ["record_id", "role", "replicate", "decision", "confidence", "rationale"]
FINAL_COLUMNS = DECISION_COLUMNS + ["rule", "aggregated_confidence", "actor_confidence", "critic_confidence"]


def write_decisions(decisions: Iterable[ScreeningDecision], path: str | Path) -> None:
    rows = sorted(decisions, key=lambda d: (d.record_id, d.role, d.replicate))
    with Path(path).open("w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(DECISION_COLUMNS)
        for d in rows:
            writer.writerow([d.record_id, d.role, d.replicate, d.decision, d.confidence, d.rationale or ""])


def write_finals(finals: Iterable[FinalDecision], path: str | Path) -> None:
    rows = sorted(finals, key=lambda f: f.record_id)
    with Path(path).open("w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(FINAL_COLUMNS)
        for f in rows:
            writer.writerow(
                [
                    f.record_id,
                    "final",
                    0,
                    f.decision,
                    f.aggregated_confidence,
                    f.actor.rationale or "",
                    f.rule,
                    f.aggregated_confidence,
                    f.actor.confidence,
                    f.critic.confidence if f.critic is not None else "",
                ]
            )


def read_finals(path: str | Path) -> list[dict]:
    """Read a final-decisions CSV back as dict rows (confidences as floats)."""
    out = []
    with Path(path).open("r", encoding="utf-8", newline="") as fh:
        for row in csv.DictReader(fh):
            row["aggregated_confidence"] = float(row["aggregated_confidence"])
            row["confidence"] = float(row["confidence"])
            row["actor_confidence"] = float(row["actor_confidence"])
            row["critic_confidence"] = float(row["critic_confidence"]) if row["critic_confidence"] else None
            out.append(row)
    return out
