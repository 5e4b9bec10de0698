"""Acceptance suite: one test per release criterion, at pinned tolerances.

Each test prints a single PASS line (visible with ``pytest -s``) and enforces
its runtime budget. The suite exercises only the Python package; the web
frontend is a separate component and nothing here depends on it.
"""

from __future__ import annotations

import json
import random
import string
import time

import pytest

from abscreen.adjudicate import (
    CRITIC_RULES,
    ConfidenceOutOfRange,
    MissingConfidenceLine,
    MissingDecisionLine,
    ParseError,
    ScreeningDecision,
    UnknownDecisionToken,
    combine,
    parse_decision,
)
from abscreen.clock import VirtualClock
from abscreen.cli import main
from abscreen.diagnostics import fisher_exact_2x2, mann_whitney_u
from abscreen.engine import make_custom_id, read_responses, resume, run_batch, write_requests, ChatRequest, RateBudget
from abscreen.evaluation import (
    ConfusionMatrix,
    ScoredPrediction,
    brier,
    classification_metrics,
    ece,
    roc_auc,
)
from abscreen.prompts import PromptOptions
from abscreen.providers import MockProvider

from conftest import write_corpus_csv, write_label_csv
from oracles import (
    auc_pairwise,
    brier_direct,
    ece_interval_scan,
    fisher_exact_enumeration,
    mwu_exact_permutation,
    mwu_sampled_permutation,
)


def report(name: str, started: float, budget_s: float) -> None:
    elapsed = time.monotonic() - started
    assert elapsed < budget_s, f"{name}: {elapsed:.2f}s exceeded the {budget_s:.0f}s budget"
    print(f"ACCEPTANCE PASS: {name} ({elapsed:.2f}s)")


def test_metric_arithmetic_reference_fixtures():
    t0 = time.monotonic()
    m = classification_metrics(ConfusionMatrix(tp=57, fp=82, fn=6, tn=676))
    assert f"{100 * m['sensitivity']:.2f}" == "90.48"
    assert f"{100 * m['precision']:.2f}" == "41.01"
    m = classification_metrics(ConfusionMatrix(tp=63, fp=159, fn=0, tn=599))
    assert f"{100 * m['sensitivity']:.2f}" == "100.00"
    report("metric arithmetic matches reference fixtures", t0, 1.0)


def test_fisher_exact_criterion():
    t0 = time.monotonic()
    res = fisher_exact_2x2(578, 235, 2772, 4932)
    assert abs(res.odds_ratio - 4.38) <= 0.01
    assert res.p_value < 0.001

    rng = random.Random(20240817)
    checked = 0
    while checked < 150:
        a, b, c, d = (rng.randint(0, 8) for _ in range(4))
        if min(a + b, c + d, a + c, b + d) == 0:
            continue
        got = fisher_exact_2x2(a, b, c, d).p_value
        want = float(fisher_exact_enumeration(a, b, c, d))
        assert abs(got - want) <= 1e-10, f"table {(a, b, c, d)}: {got} vs {want}"
        checked += 1
    report("fisher exact: reference odds ratio + enumeration-oracle agreement", t0, 5.0)


def test_mann_whitney_criterion():
    t0 = time.monotonic()

    rng = random.Random(97)
    exact_checked = 0
    while exact_checked < 200:
        n1 = rng.randint(1, 9)
        n2 = rng.randint(1, 10 - n1)
        ties = rng.random() < 0.5
        span = 3 if ties else 1000
        x = [rng.randint(0, span) for _ in range(n1)]
        y = [rng.randint(0, span) for _ in range(n2)]
        res = mann_whitney_u(x, y)
        assert res.method == "exact"
        want = mwu_exact_permutation(x, y)
        assert res.p_value == want, f"x={x} y={y}: {res.p_value} vs {want}"
        exact_checked += 1

    approx_checked = 0
    trial = 0
    while approx_checked < 20:
        trial += 1
        fix_rng = random.Random(5000 + trial)
        n1 = fix_rng.randint(25, 40)
        n2 = fix_rng.randint(25, 40)
        shift = [0.0, 0.2, 0.4, 0.6][trial % 4]
        x = [fix_rng.gauss(0, 1) for _ in range(n1)]
        y = [fix_rng.gauss(shift, 1) for _ in range(n2)]
        res = mann_whitney_u(x, y)
        assert res.method == "normal_approx"
        if not 0.05 <= res.p_value <= 0.95:
            continue
        oracle = mwu_sampled_permutation(x, y, n_resamples=100_000, seed=trial)
        assert abs(res.p_value - oracle) / oracle <= 0.05, \
            f"trial {trial}: approx {res.p_value} vs permutation {oracle}"
        approx_checked += 1

    report("mann-whitney: exact == enumeration on 200 small fixtures; "
           "approx within 5% of 1e5-resample oracle on 20 fixtures", t0, 60.0)


def test_calibration_oracles_criterion():
    t0 = time.monotonic()
    rng = random.Random(31337)
    for trial in range(1000):
        n = rng.randint(2, 50)
        if trial % 10 == 0:
            confidences = [rng.choice([0.25, 0.5, 0.95])] * n  # all tied
        elif trial % 17 == 0:
            confidences = [0.9 + rng.random() * 0.1 for _ in range(n)]  # single bin
        else:
            confidences = [rng.random() for _ in range(n)]
        preds = [
            ScoredPrediction(
                record_id=f"r{i}",
                decision=rng.choice(["include", "exclude"]),
                confidence=confidences[i],
                truth=rng.random() < 0.5,
            )
            for i in range(n)
        ]
        assert abs(brier(preds) - brier_direct(preds)) <= 1e-12
        n_bins = rng.choice([1, 5, 10])
        assert abs(ece(preds, n_bins=n_bins) - ece_interval_scan(preds, n_bins=n_bins)) <= 1e-12
        if any(p.truth for p in preds) and not all(p.truth for p in preds):
            assert abs(roc_auc(preds) - auc_pairwise(preds)) <= 1e-12
    report("calibration metrics match brute-force oracles within 1e-12 on 1000 fixtures", t0, 30.0)


def test_ensemble_truth_table_criterion():
    t0 = time.monotonic()
    expected = {
        ("include", "include"): {"any_include": "include", "critic_veto": "include",
                                 "agreement_required": "include"},
        ("include", "exclude"): {"any_include": "include", "critic_veto": "exclude",
                                 "agreement_required": "exclude"},
        ("exclude", "include"): {"any_include": "include", "critic_veto": "exclude",
                                 "agreement_required": "exclude"},
        ("exclude", "exclude"): {"any_include": "exclude", "critic_veto": "exclude",
                                 "agreement_required": "exclude"},
    }
    rows = 0
    for (a_dec, c_dec), by_rule in expected.items():
        for rule, want in by_rule.items():
            actor = ScreeningDecision("r", "actor", a_dec, 0.8)
            critic = ScreeningDecision("r", "critic", c_dec, 0.6)
            final = combine(rule, actor, critic)
            assert final.decision == want
            if not (rule == "critic_veto" and a_dec == "exclude"):
                assert final.aggregated_confidence == pytest.approx(0.7)
            rows += 1
    assert rows == 12

    rng = random.Random(4242)
    for _ in range(1000):
        n = rng.randint(1, 30)
        include_sets = {rule: set() for rule in CRITIC_RULES}
        for i in range(n):
            actor = ScreeningDecision(f"r{i}", "actor", rng.choice(["include", "exclude"]),
                                      rng.random())
            critic = ScreeningDecision(f"r{i}", "critic", rng.choice(["include", "exclude"]),
                                       rng.random())
            for rule in CRITIC_RULES:
                if combine(rule, actor, critic).decision == "include":
                    include_sets[rule].add(f"r{i}")
        assert include_sets["agreement_required"] <= include_sets["any_include"]
        assert include_sets["critic_veto"] <= include_sets["any_include"]
    report("ensemble truth table (12 rows) + monotonicity on 1000 corpora", t0, 10.0)


def test_parser_criterion():
    t0 = time.monotonic()
    options = PromptOptions(role="actor")
    rng = random.Random(8888)

    for _ in range(1000):
        decision = rng.choice(["include", "exclude"])
        confidence = round(rng.random(), rng.randint(0, 6))
        token = options.include_token if decision == "include" else options.exclude_token
        chatter = "\n".join(f"- Inclusion-{k} met? yes" for k in range(rng.randint(0, 4)))
        rationale = rng.choice(["", "Rationale: fits the population"])
        raw = f"{chatter}\nDecision: {token}\nConfidence: {confidence:g}\n{rationale}"
        parsed = parse_decision(raw, options)
        assert parsed.decision == decision
        assert parsed.confidence == confidence

    with pytest.raises(MissingDecisionLine):
        parse_decision("Confidence: 0.4", options)
    with pytest.raises(MissingConfidenceLine):
        parse_decision("Decision: INCLUDE", options)
    with pytest.raises(UnknownDecisionToken):
        parse_decision("Decision: PERHAPS\nConfidence: 0.4", options)
    with pytest.raises(ConfidenceOutOfRange):
        parse_decision("Decision: INCLUDE\nConfidence: 2.5", options)

    alphabet = string.printable + "Δσ∞é"
    for _ in range(10_000):
        blob = "".join(rng.choices(alphabet, k=rng.randint(0, 60)))
        try:
            parse_decision(blob, options)
        except ParseError:
            pass  # typed failures only; anything else would fail the test
    report("parser: 1000 round-trips, 4 error classes, 10k-string fuzz", t0, 30.0)


def test_batch_engine_criterion(tmp_path):
    t0 = time.monotonic()
    requests = [
        ChatRequest(custom_id=make_custom_id(f"rec{i:03d}", "actor", 0),
                    model_id="mock:default",
                    prompt=f"Prompt body for record {i:03d}. " * 5,
                    max_output_tokens=64)
        for i in range(120)
    ]
    reqs_path = tmp_path / "requests.jsonl"
    write_requests(requests, reqs_path)
    budget = RateBudget(requests_per_minute=60, tokens_per_minute=20_000,
                        max_in_flight=8, max_attempts=4, base_backoff=0.2)

    clock = VirtualClock()
    run_dir = tmp_path / "baseline"
    responses_path, ledger = run_batch(reqs_path, MockProvider(clock=clock, latency=0.1),
                                       budget, run_dir, clock=clock)
    baseline = {cid: r.raw_text for cid, r in read_responses(responses_path).items()}
    assert len(baseline) == 120 and not ledger.pending_ids

    events = [
        (e["t"], e["est_tokens"])
        for e in (json.loads(l) for l in (run_dir / "dispatch_log.jsonl").read_text().splitlines())
    ]
    times = sorted(events)
    for t_start, _ in times:
        window = [(t, tok) for t, tok in times if t_start <= t < t_start + 60.0]
        assert len(window) <= budget.requests_per_minute, "RPM window exceeded"
        assert sum(tok for _, tok in window) <= budget.tokens_per_minute, "TPM window exceeded"

    class Crash(RuntimeError):
        pass

    rng = random.Random(606)
    for trial in range(10):
        cut = rng.randint(1, 119)
        trial_dir = tmp_path / f"crash{trial}"
        c1 = VirtualClock()

        def crash_hook(n_done: int, cut=cut) -> None:
            if n_done >= cut:
                raise Crash(str(cut))

        with pytest.raises(Crash):
            run_batch(reqs_path, MockProvider(clock=c1, latency=0.1), budget, trial_dir,
                      clock=c1, completion_hook=crash_hook)
        c2 = VirtualClock()
        resumed_path, resumed_ledger = resume(trial_dir, MockProvider(clock=c2, latency=0.1),
                                              budget, clock=c2)
        got = {cid: r.raw_text for cid, r in read_responses(resumed_path).items()}
        assert got == baseline, f"trial {trial} (cut {cut}) diverged from the uninterrupted run"
        assert not resumed_ledger.pending_ids
    report("batch engine: window audits + 10 kill/resume equivalences", t0, 60.0)


def test_end_to_end_cli_criterion(tmp_path):
    t0 = time.monotonic()
    n = 50
    ai_includes = {i for i in range(n) if i % 4 == 0}            # 13 records
    human_includes = {i for i in ai_includes if i < 24} | {1, 2}  # 6 shared + 2 missed
    # planted confusion: tp=6, fp=7, fn=2, tn=35
    expected = {"tp": 6, "fp": 7, "fn": 2, "tn": 35}

    rows = [{"id": f"rec{i:02d}", "title": f"Synthetic candidate {i:02d}",
             "abstract": f"Body text {i} " * 5, "year": 2010 + i % 10} for i in range(n)]
    corpus_path = write_corpus_csv(tmp_path / "corpus.csv", rows)
    criteria_path = tmp_path / "criteria.json"
    criteria_path.write_text(json.dumps({
        "inclusion": [{"label": "Population", "body": "Adults with the condition."}],
        "exclusion": [{"label": "Design", "body": "Reviews and protocols."}],
    }), encoding="utf-8")
    script_path = tmp_path / "script.json"
    script_path.write_text(json.dumps({
        "records": {f"rec{i:02d}": {"decision": "include", "confidence": 0.9}
                    for i in ai_includes},
        "default": {"decision": "exclude", "confidence": 0.8},
    }), encoding="utf-8")
    includes_path = write_label_csv(tmp_path / "inc.csv",
                                    [rows[i]["title"] for i in sorted(human_includes)])
    excludes_path = write_label_csv(tmp_path / "exc.csv",
                                    [rows[i]["title"] for i in range(n) if i not in human_includes])

    config = {
        "corpus_path": str(corpus_path),
        "criteria_path": str(criteria_path),
        "actor_model_id": f"mock:script:{script_path}",
        "mode": "single",
        "labels": {"final": {"includes": str(includes_path), "excludes": str(excludes_path)}},
    }
    config_path = tmp_path / "config.json"
    config_path.write_text(json.dumps(config), encoding="utf-8")

    assert main(["screen", "--config", str(config_path), "--run-dir", str(tmp_path / "run1")]) == 0
    assert main(["screen", "--config", str(config_path), "--run-dir", str(tmp_path / "run2")]) == 0

    report1 = json.loads((tmp_path / "run1" / "report_final.json").read_text())
    assert report1["confusion"] == expected, f"planted counts not reproduced: {report1['confusion']}"

    eval_dir = tmp_path / "eval"
    assert main(["evaluate", "--finals", str(tmp_path / "run1" / "finals.csv"),
                 "--corpus", str(corpus_path), "--includes", str(includes_path),
                 "--excludes", str(excludes_path), "--level", "final",
                 "--out", str(eval_dir)]) == 0
    report2 = json.loads((eval_dir / "report_final.json").read_text())
    assert report2["confusion"] == expected

    for name in ("finals.csv", "decisions.csv"):
        assert (tmp_path / "run1" / name).read_bytes() == (tmp_path / "run2" / name).read_bytes(), \
            f"{name} not byte-deterministic"
    report("end-to-end: planted confusion reproduced exactly, byte-deterministic", t0, 60.0)
