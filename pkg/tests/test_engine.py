from __future__ import annotations

import json
import random

import pytest
from hypothesis import given
from hypothesis import strategies as st

from abscreen.clock import VirtualClock
from abscreen.engine import (
    ChatRequest,
    CorruptLedger,
    RateBudget,
    RunDirLocked,
    RunLedger,
    TokenBudgetInfeasible,
    build_requests,
    estimate_cost,
    estimate_tokens,
    load_ledger,
    make_custom_id,
    read_requests,
    read_responses,
    resume,
    run_batch,
    save_ledger,
    split_custom_id,
    write_requests,
    UnknownModelPrice,
)
from abscreen.prompts import PromptOptions
from abscreen.providers import MockProvider, ProviderAuthError

from conftest import write_corpus_csv
from abscreen.corpus import load_corpus


class SimulatedCrash(RuntimeError):
    pass


def fast_budget(**overrides) -> RateBudget:
    kwargs = dict(requests_per_minute=10_000, tokens_per_minute=50_000_000,
                  max_in_flight=8, max_attempts=4, base_backoff=0.1)
    kwargs.update(overrides)
    return RateBudget(**kwargs)


def make_request_file(path, n: int, model_id: str = "mock:default") -> list[ChatRequest]:
    requests = [
        ChatRequest(
            custom_id=make_custom_id(f"rec{i:03d}", "actor", 0),
            model_id=model_id,
            prompt=f"Screening prompt body for record {i:03d}. " * 4,
            max_output_tokens=64,
        )
        for i in range(n)
    ]
    write_requests(requests, path)
    return requests


def read_dispatch_log(run_dir) -> list[dict]:
    path = run_dir / "dispatch_log.jsonl"
    return [json.loads(line) for line in path.read_text().splitlines() if line.strip()]


def audit_windows(events: list[tuple[float, int]], rpm: int, tpm: int) -> None:
    """No half-open 60s window may exceed either budget."""
    times = sorted(events)
    for t0, _ in times:
        in_window = [(t, tok) for t, tok in times if t0 <= t < t0 + 60.0]
        assert len(in_window) <= rpm
        assert sum(tok for _, tok in in_window) <= tpm


# ----------------------------------------------------------- token and cost math

def test_estimate_tokens_examples():
    assert estimate_tokens("") == 0
    assert estimate_tokens("x" * 8) == 2
    assert estimate_tokens("x" * 9) == 3


@given(st.text(max_size=200), st.text(max_size=200))
def test_estimate_tokens_monotone_under_concatenation(a, b):
    assert estimate_tokens(a + b) >= max(estimate_tokens(a), estimate_tokens(b))


def ledger_with(input_tokens: int, output_tokens: int, model_id: str = "m") -> RunLedger:
    return RunLedger(run_id="r", model_id=model_id, completed_ids=frozenset(),
                     pending_ids=frozenset(), cost_accrued=0.0, wall_time=0.0,
                     input_tokens=input_tokens, output_tokens=output_tokens)


def test_estimate_cost_examples():
    table = {"m": {"input": 1.0, "output": 2.0}}
    assert estimate_cost(ledger_with(1_000_000, 0, "m"), {"m": {"input": 1.0, "output": 0.0}}) == 1.0
    assert estimate_cost(ledger_with(0, 0), table) == 0.0
    # two responses of 500k in / 500k out each at (1, 2) per 1e6
    assert estimate_cost(ledger_with(1_000_000, 1_000_000), table) == 3.0
    with pytest.raises(UnknownModelPrice):
        estimate_cost(ledger_with(1, 1, "other"), table)


def test_custom_id_roundtrip():
    cid = make_custom_id("a::weird::id", "critic", 3)
    assert split_custom_id(cid) == ("a::weird::id", "critic", 3)


# ----------------------------------------------------------- request building

def test_build_requests_counts(tmp_path, criteria):
    rows = [{"title": "Alpha", "abstract": "x"}, {"title": "Beta", "abstract": "y"}]
    corpus = load_corpus(write_corpus_csv(tmp_path / "c.csv", rows, header=["title", "abstract"]))
    out = tmp_path / "requests.jsonl"
    reqs = build_requests(corpus, criteria, "mock:default", PromptOptions(role="actor"), out)
    assert len(reqs) == 2
    assert len(out.read_text().splitlines()) == 2

    reqs = build_requests(corpus, criteria, "mock:default", PromptOptions(role="actor"), out,
                          replicates=3)
    assert len(reqs) == 6
    assert len({r.custom_id for r in reqs}) == 6


def test_requests_file_roundtrip(tmp_path):
    requests = make_request_file(tmp_path / "r.jsonl", 3)
    assert read_requests(tmp_path / "r.jsonl") == requests


# ----------------------------------------------------------- basic execution

def test_run_batch_all_ok(tmp_path):
    reqs_path = tmp_path / "requests.jsonl"
    make_request_file(reqs_path, 10)
    clock = VirtualClock()
    provider = MockProvider(clock=clock)
    responses_path, ledger = run_batch(reqs_path, provider, fast_budget(), tmp_path / "run",
                                       clock=clock)
    responses = read_responses(responses_path)
    assert len(responses) == 10
    assert all(r.status == "ok" and r.attempts == 1 for r in responses.values())
    assert len(ledger.completed_ids) == 10 and not ledger.pending_ids


def test_exactly_once_terminal_accounting(tmp_path):
    reqs_path = tmp_path / "requests.jsonl"
    requests = make_request_file(reqs_path, 25)
    clock = VirtualClock()
    responses_path, ledger = run_batch(reqs_path, MockProvider(clock=clock), fast_budget(),
                                       tmp_path / "run", clock=clock)
    lines = [json.loads(l) for l in responses_path.read_text().splitlines()]
    ids = [l["custom_id"] for l in lines]
    assert sorted(ids) == sorted(r.custom_id for r in requests)
    assert len(set(ids)) == len(ids)
    assert ledger.completed_ids | ledger.pending_ids == {r.custom_id for r in requests}
    assert not ledger.completed_ids & ledger.pending_ids


def test_retries_then_success(tmp_path):
    reqs_path = tmp_path / "requests.jsonl"
    make_request_file(reqs_path, 6)
    clock = VirtualClock()
    provider = MockProvider(clock=clock, fail_first=2)
    responses_path, _ = run_batch(reqs_path, provider, fast_budget(), tmp_path / "run", clock=clock)
    responses = read_responses(responses_path)
    assert all(r.status == "ok" and r.attempts == 3 for r in responses.values())


def test_backoff_delays_respect_schedule(tmp_path):
    base = 0.5
    reqs_path = tmp_path / "requests.jsonl"
    make_request_file(reqs_path, 4)
    clock = VirtualClock()
    provider = MockProvider(clock=clock, fail_first=2)
    run_batch(reqs_path, provider, fast_budget(base_backoff=base), tmp_path / "run", clock=clock)
    by_id: dict[str, list[dict]] = {}
    for entry in read_dispatch_log(tmp_path / "run"):
        by_id.setdefault(entry["custom_id"], []).append(entry)
    for entries in by_id.values():
        entries.sort(key=lambda e: e["attempt"])
        assert len(entries) == 3
        for k in range(1, len(entries)):
            delay = entries[k]["t"] - entries[k - 1]["t"]
            assert delay >= base * 2 ** (k - 1) - 1e-9


def test_terminal_failure_after_max_attempts(tmp_path):
    reqs_path = tmp_path / "requests.jsonl"
    make_request_file(reqs_path, 3)
    clock = VirtualClock()
    provider = MockProvider(clock=clock, fail_first=99)
    responses_path, ledger = run_batch(reqs_path, provider, fast_budget(max_attempts=2),
                                       tmp_path / "run", clock=clock)
    responses = read_responses(responses_path)
    assert all(r.status == "provider_error" and r.attempts == 2 for r in responses.values())
    assert ledger.n_failed == 3
    assert not ledger.pending_ids  # terminal failures are accounted, not retried forever


def test_auth_error_fails_fast(tmp_path):
    reqs_path = tmp_path / "requests.jsonl"
    make_request_file(reqs_path, 5)
    clock = VirtualClock()
    provider = MockProvider(clock=clock, auth_error=True)
    with pytest.raises(ProviderAuthError):
        run_batch(reqs_path, provider, fast_budget(max_in_flight=1), tmp_path / "run", clock=clock)
    assert provider.calls == 1  # no retry on credential failures


# ----------------------------------------------------------- rate limiting

def test_rpm_window_and_makespan(tmp_path):
    reqs_path = tmp_path / "requests.jsonl"
    make_request_file(reqs_path, 120)
    clock = VirtualClock()
    provider = MockProvider(clock=clock, latency=0.2)
    budget = fast_budget(requests_per_minute=60)
    _, ledger = run_batch(reqs_path, provider, budget, tmp_path / "run", clock=clock)
    events = [(e["t"], e["est_tokens"]) for e in read_dispatch_log(tmp_path / "run")]
    assert len(events) == 120
    audit_windows(events, budget.requests_per_minute, budget.tokens_per_minute)
    assert max(t for t, _ in events) >= 60.0
    assert ledger.wall_time >= 60.0


def test_tpm_window(tmp_path):
    reqs_path = tmp_path / "requests.jsonl"
    requests = make_request_file(reqs_path, 40)
    per_request = requests[0].estimated_tokens
    clock = VirtualClock()
    provider = MockProvider(clock=clock)
    budget = fast_budget(tokens_per_minute=per_request * 10)  # 10 requests per minute by tokens
    _, _ = run_batch(reqs_path, provider, budget, tmp_path / "run", clock=clock)
    events = [(e["t"], e["est_tokens"]) for e in read_dispatch_log(tmp_path / "run")]
    audit_windows(events, budget.requests_per_minute, budget.tokens_per_minute)
    assert max(t for t, _ in events) >= 3 * 60.0  # 40 requests at 10/minute


def test_single_request_over_token_budget_rejected(tmp_path):
    reqs_path = tmp_path / "requests.jsonl"
    make_request_file(reqs_path, 2)
    clock = VirtualClock()
    with pytest.raises(TokenBudgetInfeasible):
        run_batch(reqs_path, MockProvider(clock=clock), fast_budget(tokens_per_minute=10),
                  tmp_path / "run", clock=clock)


def test_max_in_flight_bounds_concurrency(tmp_path):
    reqs_path = tmp_path / "requests.jsonl"
    make_request_file(reqs_path, 30)
    clock = VirtualClock()
    provider = MockProvider(clock=clock, latency=1.0)
    budget = fast_budget(max_in_flight=3)
    run_batch(reqs_path, provider, budget, tmp_path / "run", clock=clock)
    # With latency 1s and 3 workers, no 1s stretch may hold more than 3 dispatches.
    events = sorted(e["t"] for e in read_dispatch_log(tmp_path / "run"))
    for t0 in events:
        assert sum(1 for t in events if t0 <= t < t0 + 1.0 - 1e-9) <= 3


# ----------------------------------------------------------- crash and resume

def one_shot_responses(tmp_path, n: int = 10) -> dict[str, str]:
    reqs_path = tmp_path / "oneshot_requests.jsonl"
    make_request_file(reqs_path, n)
    clock = VirtualClock()
    responses_path, _ = run_batch(reqs_path, MockProvider(clock=clock), fast_budget(),
                                  tmp_path / "oneshot", clock=clock)
    return {cid: r.raw_text for cid, r in read_responses(responses_path).items()}


def test_kill_and_resume_matches_one_shot(tmp_path):
    expected = one_shot_responses(tmp_path, 30)
    reqs_path = tmp_path / "requests.jsonl"
    make_request_file(reqs_path, 30)

    run_dir = tmp_path / "killed"
    clock = VirtualClock()

    def crash_at_5(n_done: int) -> None:
        if n_done >= 5:
            raise SimulatedCrash(f"crash at {n_done}")

    with pytest.raises(SimulatedCrash):
        run_batch(reqs_path, MockProvider(clock=clock), fast_budget(),
                  run_dir, clock=clock, completion_hook=crash_at_5)
    partial = read_responses(run_dir / "responses.jsonl")
    # in-flight workers may still land their responses after the crash point
    assert 0 < len(partial) <= 5 + fast_budget().max_in_flight

    clock2 = VirtualClock()
    responses_path, ledger = resume(run_dir, MockProvider(clock=clock2), fast_budget(),
                                    clock=clock2)
    got = {cid: r.raw_text for cid, r in read_responses(responses_path).items()}
    assert got == expected
    assert not ledger.pending_ids


def test_resume_completed_run_is_fixpoint(tmp_path):
    reqs_path = tmp_path / "requests.jsonl"
    make_request_file(reqs_path, 8)
    run_dir = tmp_path / "run"
    clock = VirtualClock()
    run_batch(reqs_path, MockProvider(clock=clock), fast_budget(), run_dir, clock=clock)
    ledger_bytes = (run_dir / "ledger.json").read_bytes()
    dispatch_lines = (run_dir / "dispatch_log.jsonl").read_text()

    provider = MockProvider()
    _, ledger = resume(run_dir, provider, fast_budget())
    assert provider.calls == 0
    assert (run_dir / "ledger.json").read_bytes() == ledger_bytes
    assert (run_dir / "dispatch_log.jsonl").read_text() == dispatch_lines
    assert not ledger.pending_ids


def test_checkpoint_cadence_every_25_completions(tmp_path):
    reqs_path = tmp_path / "requests.jsonl"
    make_request_file(reqs_path, 40)
    run_dir = tmp_path / "run"
    clock = VirtualClock()
    seen = {}

    def capture(n_done: int) -> None:
        if n_done == 30:
            seen["ledger"] = load_ledger(run_dir / "ledger.json")

    run_batch(reqs_path, MockProvider(clock=clock), fast_budget(), run_dir,
              clock=clock, completion_hook=capture)
    # at completion 30, the last checkpoint was the 25-completion one
    assert len(seen["ledger"].completed_ids) == 25


def test_truncated_ledger_raises(tmp_path):
    reqs_path = tmp_path / "requests.jsonl"
    make_request_file(reqs_path, 3)
    run_dir = tmp_path / "run"
    clock = VirtualClock()
    run_batch(reqs_path, MockProvider(clock=clock), fast_budget(), run_dir, clock=clock)
    ledger_path = run_dir / "ledger.json"
    ledger_path.write_bytes(ledger_path.read_bytes()[:40])
    with pytest.raises(CorruptLedger):
        resume(run_dir, MockProvider(), fast_budget())


def test_tampered_ledger_checksum(tmp_path):
    ledger = ledger_with(5, 5)
    path = tmp_path / "ledger.json"
    save_ledger(ledger, path)
    assert load_ledger(path) == ledger
    payload = json.loads(path.read_text())
    payload["cost_accrued"] = 999.0
    path.write_text(json.dumps(payload))
    with pytest.raises(CorruptLedger):
        load_ledger(path)


def test_resume_without_ledger_raises(tmp_path):
    (tmp_path / "run").mkdir()
    with pytest.raises(CorruptLedger):
        resume(tmp_path / "run", MockProvider(), fast_budget())


def test_torn_response_line_compacted_on_resume(tmp_path):
    reqs_path = tmp_path / "requests.jsonl"
    make_request_file(reqs_path, 6)
    run_dir = tmp_path / "run"
    clock = VirtualClock()

    def crash_at_3(n_done: int) -> None:
        if n_done >= 3:
            raise SimulatedCrash("boom")

    with pytest.raises(SimulatedCrash):
        run_batch(reqs_path, MockProvider(clock=clock), fast_budget(max_in_flight=1),
                  run_dir, clock=clock, completion_hook=crash_at_3)
    with (run_dir / "responses.jsonl").open("a") as fh:
        fh.write('{"custom_id": "rec005::actor::r0", "raw_text": "Dec')  # torn write

    clock2 = VirtualClock()
    responses_path, _ = resume(run_dir, MockProvider(clock=clock2), fast_budget(), clock=clock2)
    responses = read_responses(responses_path)
    assert len(responses) == 6
    lines = [json.loads(l) for l in responses_path.read_text().splitlines()]
    assert len(lines) == 6  # torn line was compacted away


def test_run_dir_locked_by_live_pid(tmp_path):
    reqs_path = tmp_path / "requests.jsonl"
    make_request_file(reqs_path, 2)
    run_dir = tmp_path / "run"
    run_dir.mkdir()
    (run_dir / "LOCK").write_text("1")  # pid 1 is always alive
    with pytest.raises(RunDirLocked):
        run_batch(reqs_path, MockProvider(), fast_budget(), run_dir)


def test_stale_lock_is_stolen(tmp_path):
    reqs_path = tmp_path / "requests.jsonl"
    make_request_file(reqs_path, 2)
    run_dir = tmp_path / "run"
    run_dir.mkdir()
    (run_dir / "LOCK").write_text("999999999")  # dead pid
    clock = VirtualClock()
    _, ledger = run_batch(reqs_path, MockProvider(clock=clock), fast_budget(), run_dir,
                          clock=clock)
    assert not ledger.pending_ids
    assert not (run_dir / "LOCK").exists()


def test_random_interruption_points_all_converge(tmp_path):
    expected = one_shot_responses(tmp_path, 12)
    reqs_path = tmp_path / "requests.jsonl"
    make_request_file(reqs_path, 12)
    rng = random.Random(5)
    for trial in range(4):
        cut = rng.randint(1, 11)
        run_dir = tmp_path / f"trial{trial}"
        clock = VirtualClock()

        def crash(n_done: int, cut=cut) -> None:
            if n_done >= cut:
                raise SimulatedCrash(str(cut))

        with pytest.raises(SimulatedCrash):
            run_batch(reqs_path, MockProvider(clock=clock), fast_budget(),
                      run_dir, clock=clock, completion_hook=crash)
        clock2 = VirtualClock()
        responses_path, _ = resume(run_dir, MockProvider(clock=clock2), fast_budget(),
                                   clock=clock2)
        got = {cid: r.raw_text for cid, r in read_responses(responses_path).items()}
        assert got == expected
