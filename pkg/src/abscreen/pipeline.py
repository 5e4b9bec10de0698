"""End-to-end screening orchestration shared by the CLI and the HTTP service.

A run directory is laid out as::

    run_dir/
      config.json               resolved run configuration
      actor/                    engine state for the actor pass
      critic/                   engine state for the critic pass (when used)
      decisions.csv             every parsed model verdict (all replicates)
      finals.csv                adjudicated decisions
      errors.jsonl              responses that failed or did not parse
      report_<level>.json       evaluation reports (when labels are given)
      roc_points_<level>.json / reliability_bins_<level>.json
      training_labels.json      reviewer feedback captured for later runs

Phases advance building -> actor_pass -> [critic_pass] -> adjudicating ->
[evaluating] -> done; a phase callback lets callers surface progress.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Optional

from . import adjudicate, engine, evaluation
from .adjudicate import CRITIC_RULES, ScreeningDecision
from .clock import Clock
from .corpus import Corpus, load_corpus, load_labels
from .engine import ChatRequest, RateBudget, make_custom_id, split_custom_id
from .prompts import Exemplar, PromptOptions, load_criteria, render_critic_prompt, render_prompt
from .providers import ChatProvider, resolve_provider

PHASES = ("building", "actor_pass", "critic_pass", "adjudicating", "evaluating", "done", "failed")

DEFAULT_BUDGET = RateBudget(
    requests_per_minute=600,
    tokens_per_minute=1_000_000,
    max_in_flight=8,
    max_attempts=4,
    base_backoff=0.5,
)


class ConfigValidation(Exception):
    """Invalid run configuration; ``field`` names the offending entry."""

    def __init__(self, field_name: str, message: str):
        self.field = field_name
        super().__init__(f"{field_name}: {message}")


@dataclass(frozen=True)
class TrainingLabel:
    record_id: str
    human_decision: str  # "include" | "exclude"
    labeled_at: float
    labeler: str = "reviewer"


@dataclass(frozen=True)
class RunConfig:
    corpus_path: str
    criteria_path: str
    actor_model_id: str
    mode: str = "single"  # "single" | "actor_critic"
    rule: Optional[str] = None
    critic_model_id: Optional[str] = None
    replicates: int = 1
    budget: RateBudget = DEFAULT_BUDGET
    decision_tokens: tuple[str, str] = ("INCLUDE", "EXCLUDE")
    max_rationale_words: Optional[int] = None
    max_output_tokens: int = 512
    temperature: float = 0.0
    labels: dict = field(default_factory=dict)  # {level: {"includes": path, "excludes": path}}
    few_shot: bool = False
    few_shot_k: int = 4
    training_labels_path: Optional[str] = None
    critic_sees_actor_context: Optional[bool] = None  # default depends on rule
    price_table: Optional[dict] = None
    run_dir: Optional[str] = None

    @property
    def effective_rule(self) -> str:
        return "single" if self.mode == "single" else (self.rule or "")

    @property
    def critic_context_enabled(self) -> bool:
        if self.critic_sees_actor_context is not None:
            return self.critic_sees_actor_context
        # Agreement mode asks for independent support; the other rules give
        # the critic the actor's verdict to endorse or correct.
        return self.effective_rule != "agreement_required"

    def to_dict(self) -> dict:
        return {
            "corpus_path": self.corpus_path,
            "criteria_path": self.criteria_path,
            "actor_model_id": self.actor_model_id,
            "mode": self.mode,
            "rule": self.rule,
            "critic_model_id": self.critic_model_id,
            "replicates": self.replicates,
            "budget": {
                "requests_per_minute": self.budget.requests_per_minute,
                "tokens_per_minute": self.budget.tokens_per_minute,
                "max_in_flight": self.budget.max_in_flight,
                "max_attempts": self.budget.max_attempts,
                "base_backoff": self.budget.base_backoff,
            },
            "decision_tokens": list(self.decision_tokens),
            "max_rationale_words": self.max_rationale_words,
            "max_output_tokens": self.max_output_tokens,
            "temperature": self.temperature,
            "labels": self.labels,
            "few_shot": self.few_shot,
            "few_shot_k": self.few_shot_k,
            "training_labels_path": self.training_labels_path,
            "critic_sees_actor_context": self.critic_sees_actor_context,
            "price_table": self.price_table,
            "run_dir": self.run_dir,
        }


def validate_run_config(data: dict) -> RunConfig:
    """Build a RunConfig from a raw mapping, naming the offending field on error."""

    def need(field_name: str) -> str:
        value = data.get(field_name)
        if not value or not isinstance(value, str):
            raise ConfigValidation(field_name, "required")
        return value

    corpus_path = need("corpus_path")
    if not Path(corpus_path).exists():
        raise ConfigValidation("corpus_path", f"file not found: {corpus_path}")
    criteria_path = need("criteria_path")
    if not Path(criteria_path).exists():
        raise ConfigValidation("criteria_path", f"file not found: {criteria_path}")
    actor_model_id = need("actor_model_id")

    mode = data.get("mode", "single")
    if mode not in ("single", "actor_critic"):
        raise ConfigValidation("mode", f"must be 'single' or 'actor_critic', got {mode!r}")
    rule = data.get("rule")
    critic_model_id = data.get("critic_model_id")
    if mode == "actor_critic":
        if not critic_model_id:
            raise ConfigValidation("critic_model_id", "required when mode is actor_critic")
        if not rule:
            raise ConfigValidation("rule", "required when mode is actor_critic")
        if rule not in CRITIC_RULES:
            raise ConfigValidation("rule", f"must be one of {CRITIC_RULES}, got {rule!r}")
    elif rule not in (None, "single"):
        raise ConfigValidation("rule", "only 'single' is valid outside actor_critic mode")

    replicates = data.get("replicates", 1)
    if not isinstance(replicates, int) or replicates < 1:
        raise ConfigValidation("replicates", "must be an integer >= 1")

    budget_data = data.get("budget") or {}
    budget_kwargs = {
        "requests_per_minute": budget_data.get("requests_per_minute", DEFAULT_BUDGET.requests_per_minute),
        "tokens_per_minute": budget_data.get("tokens_per_minute", DEFAULT_BUDGET.tokens_per_minute),
        "max_in_flight": budget_data.get("max_in_flight", DEFAULT_BUDGET.max_in_flight),
        "max_attempts": budget_data.get("max_attempts", DEFAULT_BUDGET.max_attempts),
        "base_backoff": budget_data.get("base_backoff", DEFAULT_BUDGET.base_backoff),
    }
    for key, value in budget_kwargs.items():
        if not isinstance(value, (int, float)) or value <= 0:
            raise ConfigValidation(f"budget.{key}", "must be a positive number")
    budget = RateBudget(**budget_kwargs)

    tokens = data.get("decision_tokens", ["INCLUDE", "EXCLUDE"])
    if len(tokens) != 2 or not all(tokens) or tokens[0] == tokens[1]:
        raise ConfigValidation("decision_tokens", "need two distinct non-empty tokens")

    labels = data.get("labels") or {}
    for level, spec_paths in labels.items():
        if level not in ("fulltext", "final"):
            raise ConfigValidation(f"labels.{level}", "level must be 'fulltext' or 'final'")
        for kind in ("includes", "excludes"):
            p = (spec_paths or {}).get(kind)
            if not p or not Path(p).exists():
                raise ConfigValidation(f"labels.{level}.{kind}", "file not found")

    return RunConfig(
        corpus_path=corpus_path,
        criteria_path=criteria_path,
        actor_model_id=actor_model_id,
        mode=mode,
        rule=rule,
        critic_model_id=critic_model_id,
        replicates=replicates,
        budget=budget,
        decision_tokens=(tokens[0], tokens[1]),
        max_rationale_words=data.get("max_rationale_words"),
        max_output_tokens=data.get("max_output_tokens", 512),
        temperature=data.get("temperature", 0.0),
        labels=labels,
        few_shot=bool(data.get("few_shot", False)),
        few_shot_k=data.get("few_shot_k", 4),
        training_labels_path=data.get("training_labels_path"),
        critic_sees_actor_context=data.get("critic_sees_actor_context"),
        price_table=data.get("price_table"),
        run_dir=data.get("run_dir"),
    )


def store_training_labels(run_dir: str | Path, labels: list[TrainingLabel]) -> int:
    """Persist reviewer labels; one entry per (record_id, labeler), latest wins."""
    path = Path(run_dir) / "training_labels.json"
    existing: dict[str, dict] = {}
    if path.exists():
        existing = json.loads(path.read_text(encoding="utf-8"))
    for lab in labels:
        key = json.dumps([lab.record_id, lab.labeler])
        prior = existing.get(key)
        if prior is None or prior["labeled_at"] <= lab.labeled_at:
            existing[key] = {
                "record_id": lab.record_id,
                "human_decision": lab.human_decision,
                "labeled_at": lab.labeled_at,
                "labeler": lab.labeler,
            }
    path.write_text(json.dumps(existing, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    return len(existing)


def load_training_labels(path: str | Path) -> list[TrainingLabel]:
    data = json.loads(Path(path).read_text(encoding="utf-8"))
    return [
        TrainingLabel(
            record_id=v["record_id"],
            human_decision=v["human_decision"],
            labeled_at=v["labeled_at"],
            labeler=v.get("labeler", "reviewer"),
        )
        for v in data.values()
    ]


def select_exemplars(labels: list[TrainingLabel], corpus: Corpus, k: int = 4) -> list[Exemplar]:
    """Up to k worked examples, balanced include/exclude when possible."""
    by_id = corpus.by_id()
    usable = sorted(
        (lab for lab in labels if lab.record_id in by_id),
        key=lambda lab: (lab.labeled_at, lab.record_id),
    )
    includes = [lab for lab in usable if lab.human_decision == "include"]
    excludes = [lab for lab in usable if lab.human_decision == "exclude"]
    half = k // 2
    picked = includes[:half] + excludes[:half]
    for pool in (includes[half:], excludes[half:]):
        for lab in pool:
            if len(picked) >= k:
                break
            picked.append(lab)
    picked.sort(key=lambda lab: (lab.labeled_at, lab.record_id))
    return [Exemplar(title=by_id[lab.record_id].title, decision=lab.human_decision) for lab in picked[:k]]


def _parse_pass(
    responses: dict[str, engine.ChatResponse],
    options: PromptOptions,
    errors: list[dict],
) -> list[ScreeningDecision]:
    decisions = []
    for custom_id, resp in responses.items():
        record_id, role, replicate = split_custom_id(custom_id)
        if resp.status != "ok":
            errors.append({"custom_id": custom_id, "kind": resp.status, "detail": resp.error or ""})
            continue
        try:
            decisions.append(
                adjudicate.parse_decision(
                    resp.raw_text, options, record_id=record_id, role=role, replicate=replicate
                )
            )
        except adjudicate.ParseError as exc:
            errors.append({"custom_id": custom_id, "kind": "parse_error", "detail": str(exc)})
    return decisions


def run_screening(
    config: RunConfig,
    run_dir: str | Path,
    *,
    clock: Optional[Clock] = None,
    provider_factory: Optional[Callable[[str], ChatProvider]] = None,
    phase_cb: Optional[Callable[[str], None]] = None,
    progress_cb: Optional[Callable[[int, int], None]] = None,
    resume: bool = False,
) -> dict:
    """Execute the full screening pipeline inside run_dir; returns a summary."""
    run_dir = Path(run_dir)
    run_dir.mkdir(parents=True, exist_ok=True)
    if provider_factory is None:
        provider_factory = lambda model_id: resolve_provider(model_id, clock=clock)

    def phase(name: str) -> None:
        if phase_cb:
            phase_cb(name)

    phase("building")
    (run_dir / "config.json").write_text(
        json.dumps(config.to_dict(), indent=2, sort_keys=True) + "\n", encoding="utf-8"
    )
    corpus = load_corpus(config.corpus_path)
    criteria = load_criteria(config.criteria_path)
    actor_options = PromptOptions(
        decision_tokens=config.decision_tokens,
        max_rationale_words=config.max_rationale_words,
        role="actor",
    )
    exemplars: list[Exemplar] = []
    if config.few_shot and config.training_labels_path and Path(config.training_labels_path).exists():
        exemplars = select_exemplars(
            load_training_labels(config.training_labels_path), corpus, k=config.few_shot_k
        )

    actor_dir = run_dir / "actor"
    actor_dir.mkdir(exist_ok=True)
    actor_requests_path = actor_dir / engine.REQUESTS_FILE
    if not (resume and actor_requests_path.exists()):
        engine.build_requests(
            corpus,
            criteria,
            config.actor_model_id,
            actor_options,
            actor_requests_path,
            replicates=config.replicates,
            max_output_tokens=config.max_output_tokens,
            temperature=config.temperature,
            exemplars=exemplars,
        )

    phase("actor_pass")
    _, actor_ledger = engine.run_batch(
        actor_requests_path,
        provider_factory(config.actor_model_id),
        config.budget,
        actor_dir,
        clock=clock,
        price_table=config.price_table,
        progress_cb=progress_cb,
    )
    errors: list[dict] = []
    actor_raw = _parse_pass(engine.read_responses(actor_dir / engine.RESPONSES_FILE), actor_options, errors)

    # Fold replicates into one effective actor verdict per record.
    by_record: dict[str, list[ScreeningDecision]] = {}
    for d in actor_raw:
        by_record.setdefault(d.record_id, []).append(d)
    actor_effective: dict[str, ScreeningDecision] = {}
    for record_id, group in sorted(by_record.items()):
        summary = adjudicate.aggregate_replicates(group)
        rationale = next((d.rationale for d in group if d.rationale), None)
        actor_effective[record_id] = ScreeningDecision(
            record_id=record_id,
            role="actor",
            decision=summary.majority_decision,
            confidence=summary.mean_confidence,
            rationale=rationale,
        )

    critic_effective: dict[str, ScreeningDecision] = {}
    critic_ledger = None
    rule = config.effective_rule
    if config.mode == "actor_critic":
        critic_ids = adjudicate.plan_critic_set(rule, actor_effective.values())
        if critic_ids:
            critic_options = PromptOptions(
                decision_tokens=config.decision_tokens,
                max_rationale_words=config.max_rationale_words,
                role="critic",
            )
            by_id = corpus.by_id()
            critic_requests = []
            for record_id in sorted(critic_ids):
                record = by_id[record_id]
                if config.critic_context_enabled:
                    prompt = render_critic_prompt(
                        criteria, record, actor_effective[record_id], critic_options, exemplars=exemplars
                    )
                else:
                    # Independent re-screen: same prompt shape as the actor's.
                    prompt = render_prompt(
                        criteria,
                        record,
                        PromptOptions(
                            decision_tokens=config.decision_tokens,
                            max_rationale_words=config.max_rationale_words,
                            role="actor",
                        ),
                        exemplars=exemplars,
                    )
                critic_requests.append(
                    ChatRequest(
                        custom_id=make_custom_id(record_id, "critic", 0),
                        model_id=config.critic_model_id,
                        prompt=prompt,
                        max_output_tokens=config.max_output_tokens,
                        temperature=config.temperature,
                    )
                )
            critic_dir = run_dir / "critic"
            critic_dir.mkdir(exist_ok=True)
            critic_requests_path = critic_dir / engine.REQUESTS_FILE
            if not (resume and critic_requests_path.exists()):
                engine.write_requests(critic_requests, critic_requests_path)
            phase("critic_pass")
            _, critic_ledger = engine.run_batch(
                critic_requests_path,
                provider_factory(config.critic_model_id),
                config.budget,
                critic_dir,
                clock=clock,
                price_table=config.price_table,
                progress_cb=progress_cb,
            )
            critic_raw = _parse_pass(
                engine.read_responses(critic_dir / engine.RESPONSES_FILE), critic_options, errors
            )
            critic_effective = {d.record_id: d for d in critic_raw}

    phase("adjudicating")
    finals = []
    for record_id, actor_decision in sorted(actor_effective.items()):
        critic_decision = critic_effective.get(record_id)
        if rule in CRITIC_RULES and critic_decision is None and not (
            rule == "critic_veto" and actor_decision.decision == "exclude"
        ):
            errors.append({"custom_id": record_id, "kind": "missing_critic", "detail": ""})
            continue
        finals.append(adjudicate.combine(rule, actor_decision, critic_decision))

    adjudicate.write_decisions(actor_raw + sorted(critic_effective.values(), key=lambda d: d.record_id),
                               run_dir / "decisions.csv")
    adjudicate.write_finals(finals, run_dir / "finals.csv")
    disagreements = [
        {
            "record_id": rid,
            "actor_decision": actor.decision,
            "actor_confidence": actor.confidence,
            "critic_decision": critic.decision,
            "critic_confidence": critic.confidence,
        }
        for rid, actor in sorted(actor_effective.items())
        if (critic := critic_effective.get(rid)) is not None and critic.decision != actor.decision
    ]
    (run_dir / "disagreements.json").write_text(
        json.dumps(disagreements, indent=2, sort_keys=True) + "\n", encoding="utf-8"
    )
    if errors:
        with (run_dir / "errors.jsonl").open("w", encoding="utf-8") as fh:
            for err in errors:
                fh.write(json.dumps(err, sort_keys=True) + "\n")

    summary = {
        "n_records": len(corpus),
        "n_finals": len(finals),
        "n_errors": len(errors),
        "cost_accrued": actor_ledger.cost_accrued + (critic_ledger.cost_accrued if critic_ledger else 0.0),
        "rule": rule,
        "finals_path": str(run_dir / "finals.csv"),
        "decisions_path": str(run_dir / "decisions.csv"),
        "reports": {},
    }

    if config.labels:
        phase("evaluating")
        for level in sorted(config.labels):
            label_paths = config.labels[level]
            labels = load_labels(label_paths["includes"], label_paths["excludes"], level, corpus)
            report = evaluation.evaluate(finals, labels, level)
            preds = evaluation.scored_predictions(finals, labels)
            evaluation.write_report(report, preds, run_dir)
            summary["reports"][level] = str(run_dir / f"report_{level}.json")

    phase("done")
    (run_dir / "summary.json").write_text(
        json.dumps(summary, indent=2, sort_keys=True) + "\n", encoding="utf-8"
    )
    return summary
