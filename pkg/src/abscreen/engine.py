"""Rate-limited parallel batch execution with crash-resumable checkpoints.

The run directory is the unit of state: ``requests.jsonl`` (input),
``responses.jsonl`` (append-only output, one terminal line per custom_id),
``ledger.json`` (checksummed checkpoint), ``dispatch_log.jsonl`` (audit
trail of when each attempt was released) and ``LOCK``.

Dispatches are reserved through a sliding 60-second window limiter before
the provider is called, so in any 60s window at most ``requests_per_minute``
attempts and ``tokens_per_minute`` estimated tokens go out. The response
file, not the ledger, is the source of truth for completion: resume rebuilds
the pending set from it, which is what makes any interruption point safe.
"""

from __future__ import annotations

import json
import os
import queue
import random
import threading
from collections import deque
from contextlib import contextmanager
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Optional, Sequence

from .clock import Clock, RealClock
from .corpus import Corpus, EmptyCorpus
from .prompts import Criteria, Exemplar, PromptOptions, render_prompt
from .providers import (
    ChatProvider,
    ProviderAuthError,
    ProviderReply,
    ProviderTimeout,
    ProviderTransientError,
    scrub_secrets,
)

REQUESTS_FILE = "requests.jsonl"
RESPONSES_FILE = "responses.jsonl"
LEDGER_FILE = "ledger.json"
DISPATCH_LOG_FILE = "dispatch_log.jsonl"
LOCK_FILE = "LOCK"

WINDOW_SECONDS = 60.0
CHECKPOINT_EVERY = 25
CHECKPOINT_SECONDS = 10.0
BACKOFF_CAP = 60.0
MIN_OUTPUT_TOKENS = 16


class EngineError(Exception):
    pass


class RunDirLocked(EngineError):
    pass


class CorruptLedger(EngineError):
    pass


class UnknownModelPrice(EngineError):
    pass


class TokenBudgetInfeasible(EngineError):
    """A single request's estimate exceeds tokens_per_minute: it could never dispatch."""


@dataclass(frozen=True)
class RateBudget:
    requests_per_minute: int
    tokens_per_minute: int
    max_in_flight: int
    max_attempts: int
    base_backoff: float

    def __post_init__(self):
        for name in ("requests_per_minute", "tokens_per_minute", "max_in_flight", "max_attempts"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")
        if self.base_backoff <= 0:
            raise ValueError("base_backoff must be positive")


@dataclass(frozen=True)
class ChatRequest:
    custom_id: str
    model_id: str
    prompt: str
    max_output_tokens: int = 512
    temperature: float = 0.0

    def __post_init__(self):
        if self.max_output_tokens < MIN_OUTPUT_TOKENS:
            raise ValueError(f"max_output_tokens must be >= {MIN_OUTPUT_TOKENS}")

    @property
    def estimated_tokens(self) -> int:
        return estimate_tokens(self.prompt) + self.max_output_tokens


@dataclass(frozen=True)
class ChatResponse:
    custom_id: str
    raw_text: str
    input_tokens: int
    output_tokens: int
    status: str  # "ok" | "provider_error" | "timeout"
    attempts: int
    error: Optional[str] = None


@dataclass(frozen=True)
class RunLedger:
    run_id: str
    model_id: str
    completed_ids: frozenset[str]
    pending_ids: frozenset[str]
    cost_accrued: float
    wall_time: float
    input_tokens: int = 0
    output_tokens: int = 0
    n_failed: int = 0


def estimate_tokens(text: str) -> int:
    """Deterministic chars/4 heuristic, rounded up; a throttle, not billing truth."""
    return (len(text) + 3) // 4


def estimate_cost(ledger: RunLedger, price_table: dict[str, dict[str, float]]) -> float:
    """Cost in currency units from ledger token totals and per-1e6-token prices."""
    prices = price_table.get(ledger.model_id)
    if prices is None:
        raise UnknownModelPrice(f"no prices for model {ledger.model_id!r}")
    return (ledger.input_tokens * prices["input"] + ledger.output_tokens * prices["output"]) / 1e6


def make_custom_id(record_id: str, role: str, replicate: int) -> str:
    return f"{record_id}::{role}::r{replicate}"


def split_custom_id(custom_id: str) -> tuple[str, str, int]:
    record_id, role, rep = custom_id.rsplit("::", 2)
    return record_id, role, int(rep.lstrip("r"))


def build_requests(
    corpus: Corpus,
    criteria: Criteria,
    model_id: str,
    options: PromptOptions,
    out_path: str | Path,
    replicates: int = 1,
    max_output_tokens: int = 512,
    temperature: float = 0.0,
    exemplars: Sequence[Exemplar] = (),
) -> list[ChatRequest]:
    """Pair every record with a rendered prompt, one request per replicate."""
    if replicates < 1:
        raise ValueError("replicates must be >= 1")
    if not corpus.records:
        raise EmptyCorpus("no records to screen")
    requests = []
    for record in corpus.records:
        prompt = render_prompt(criteria, record, options, exemplars=exemplars)
        for rep in range(replicates):
            requests.append(
                ChatRequest(
                    custom_id=make_custom_id(record.record_id, options.role, rep),
                    model_id=model_id,
                    prompt=prompt,
                    max_output_tokens=max_output_tokens,
                    temperature=temperature,
                )
            )
    write_requests(requests, out_path)
    return requests


def write_requests(requests: Sequence[ChatRequest], path: str | Path) -> None:
    seen = set()
    for r in requests:
        if r.custom_id in seen:
            raise ValueError(f"duplicate custom_id {r.custom_id!r} in request file")
        seen.add(r.custom_id)
    with Path(path).open("w", encoding="utf-8") as fh:
        for r in requests:
            fh.write(
                json.dumps(
                    {
                        "custom_id": r.custom_id,
                        "model": r.model_id,
                        "prompt": r.prompt,
                        "params": {"max_output_tokens": r.max_output_tokens, "temperature": r.temperature},
                    },
                    ensure_ascii=False,
                )
                + "\n"
            )


def read_requests(path: str | Path) -> list[ChatRequest]:
    requests = []
    for line in Path(path).read_text(encoding="utf-8").splitlines():
        if not line.strip():
            continue
        obj = json.loads(line)
        requests.append(
            ChatRequest(
                custom_id=obj["custom_id"],
                model_id=obj["model"],
                prompt=obj["prompt"],
                max_output_tokens=obj["params"]["max_output_tokens"],
                temperature=obj["params"]["temperature"],
            )
        )
    return requests


def read_responses(path: str | Path) -> dict[str, ChatResponse]:
    """Parse a response file, tolerating a torn trailing line from a crash."""
    out: dict[str, ChatResponse] = {}
    if not Path(path).exists():
        return out
    for line in Path(path).read_text(encoding="utf-8").splitlines():
        if not line.strip():
            continue
        try:
            obj = json.loads(line)
            resp = ChatResponse(
                custom_id=obj["custom_id"],
                raw_text=obj["raw_text"],
                input_tokens=obj["usage"]["input_tokens"],
                output_tokens=obj["usage"]["output_tokens"],
                status=obj["status"],
                attempts=obj["attempts"],
                error=obj.get("error"),
            )
        except (json.JSONDecodeError, KeyError, TypeError):
            continue
        out.setdefault(resp.custom_id, resp)
    return out


def _response_line(resp: ChatResponse) -> str:
    obj = {
        "custom_id": resp.custom_id,
        "raw_text": resp.raw_text,
        "usage": {"input_tokens": resp.input_tokens, "output_tokens": resp.output_tokens},
        "status": resp.status,
        "attempts": resp.attempts,
    }
    if resp.error:
        obj["error"] = resp.error
    return json.dumps(obj, ensure_ascii=False)


def _ledger_payload(ledger: RunLedger) -> dict:
    return {
        "run_id": ledger.run_id,
        "model_id": ledger.model_id,
        "completed_ids": sorted(ledger.completed_ids),
        "pending_ids": sorted(ledger.pending_ids),
        "cost_accrued": ledger.cost_accrued,
        "wall_time": ledger.wall_time,
        "input_tokens": ledger.input_tokens,
        "output_tokens": ledger.output_tokens,
        "n_failed": ledger.n_failed,
    }


def _checksum(payload: dict) -> str:
    import hashlib

    return hashlib.sha256(json.dumps(payload, sort_keys=True).encode("utf-8")).hexdigest()


def save_ledger(ledger: RunLedger, path: str | Path) -> None:
    """Atomic (write-temp, rename) checksummed ledger write."""
    payload = _ledger_payload(ledger)
    payload["checksum"] = _checksum(_ledger_payload(ledger))
    tmp = Path(str(path) + ".tmp")
    tmp.write_text(json.dumps(payload, indent=2) + "\n", encoding="utf-8")
    os.replace(tmp, path)


def load_ledger(path: str | Path) -> RunLedger:
    try:
        payload = json.loads(Path(path).read_text(encoding="utf-8"))
    except (OSError, json.JSONDecodeError) as exc:
        raise CorruptLedger(f"unreadable ledger {path}: {exc}") from exc
    stored = payload.pop("checksum", None)
    if stored is None or stored != _checksum(payload):
        raise CorruptLedger(f"ledger checksum mismatch in {path}")
    return RunLedger(
        run_id=payload["run_id"],
        model_id=payload["model_id"],
        completed_ids=frozenset(payload["completed_ids"]),
        pending_ids=frozenset(payload["pending_ids"]),
        cost_accrued=payload["cost_accrued"],
        wall_time=payload["wall_time"],
        input_tokens=payload["input_tokens"],
        output_tokens=payload["output_tokens"],
        n_failed=payload.get("n_failed", 0),
    )


class SlidingWindowLimiter:
    """Reserves dispatch slots so every 60s window respects both budgets.

    ``acquire`` picks the earliest slot at or after now that keeps the
    request count and estimated-token sum within budget, sleeps until that
    slot, and returns it. Reservations are non-decreasing in time, which
    keeps the window scan a simple suffix walk.
    """

    def __init__(self, budget: RateBudget, clock: Clock):
        self._budget = budget
        self._clock = clock
        self._events: deque[tuple[float, int]] = deque()
        self._last = float("-inf")
        self._lock = threading.Lock()

    def acquire(self, tokens: int) -> float:
        if tokens > self._budget.tokens_per_minute:
            raise TokenBudgetInfeasible(
                f"request estimate {tokens} exceeds tokens_per_minute {self._budget.tokens_per_minute}"
            )
        with self._lock:
            slot = self._find_slot(max(self._clock.now(), self._last), tokens)
            self._events.append((slot, tokens))
            self._last = slot
        wait = slot - self._clock.now()
        if wait > 0:
            self._clock.sleep(wait)
        return slot

    def _find_slot(self, candidate: float, tokens: int) -> float:
        while True:
            # Expire via e + WINDOW <= candidate, the same float expression the
            # advance below produces, so progress is guaranteed bit-for-bit.
            while self._events and self._events[0][0] + WINDOW_SECONDS <= candidate:
                self._events.popleft()
            if (
                len(self._events) + 1 <= self._budget.requests_per_minute
                and sum(t for _, t in self._events) + tokens <= self._budget.tokens_per_minute
            ):
                return candidate
            candidate = self._events[0][0] + WINDOW_SECONDS


# Run directories with an engine currently executing in this process.
_ACTIVE_RUNS: set[str] = set()
_ACTIVE_RUNS_LOCK = threading.Lock()


def _pid_alive(pid: int) -> bool:
    try:
        os.kill(pid, 0)
    except ProcessLookupError:
        return False
    except PermissionError:
        return True
    return True


@contextmanager
def _run_lock(run_dir: Path):
    key = str(run_dir.resolve())
    with _ACTIVE_RUNS_LOCK:
        if key in _ACTIVE_RUNS:
            raise RunDirLocked(f"another run is active in {run_dir}")
        _ACTIVE_RUNS.add(key)
    lock_path = run_dir / LOCK_FILE
    try:
        try:
            fd = os.open(lock_path, os.O_CREAT | os.O_EXCL | os.O_WRONLY)
            with os.fdopen(fd, "w") as fh:
                fh.write(str(os.getpid()))
        except FileExistsError:
            try:
                pid = int(lock_path.read_text().strip() or 0)
            except ValueError:
                pid = 0
            if pid and pid != os.getpid() and _pid_alive(pid):
                raise RunDirLocked(f"{run_dir} locked by live pid {pid}")
            lock_path.write_text(str(os.getpid()))  # stale lock: steal it
        yield
    finally:
        with _ACTIVE_RUNS_LOCK:
            _ACTIVE_RUNS.discard(key)
        try:
            lock_path.unlink()
        except FileNotFoundError:
            pass


class _FatalRunError(Exception):
    def __init__(self, original: BaseException):
        self.original = original
        super().__init__(str(original))


class _BatchRun:
    def __init__(
        self,
        run_dir: Path,
        requests: list[ChatRequest],
        provider: ChatProvider,
        budget: RateBudget,
        clock: Clock,
        price_table: Optional[dict],
        completion_hook: Optional[Callable[[int], None]],
        progress_cb: Optional[Callable[[int, int], None]],
        prior: Optional[RunLedger],
    ):
        self.run_dir = run_dir
        self.requests = requests
        self.provider = provider
        self.budget = budget
        self.clock = clock
        self.price_table = price_table
        self.completion_hook = completion_hook
        self.progress_cb = progress_cb

        model_ids = {r.model_id for r in requests}
        if len(model_ids) != 1:
            raise ValueError(f"one model per run, got {sorted(model_ids)}")
        self.model_id = model_ids.pop()
        if price_table is not None and self.model_id not in price_table:
            raise UnknownModelPrice(f"no prices for model {self.model_id!r}")

        worst = max(r.estimated_tokens for r in requests)
        if worst > budget.tokens_per_minute:
            raise TokenBudgetInfeasible(
                f"largest request estimate {worst} exceeds tokens_per_minute {budget.tokens_per_minute}"
            )

        existing = read_responses(run_dir / RESPONSES_FILE)
        self._rewrite_responses_if_dirty(existing)
        self.completed: set[str] = set(existing)
        self.pending: list[ChatRequest] = [r for r in requests if r.custom_id not in existing]
        self.cost = sum(self._line_cost(r) for r in existing.values())
        self.input_tokens = sum(r.input_tokens for r in existing.values())
        self.output_tokens = sum(r.output_tokens for r in existing.values())
        self.n_failed = sum(1 for r in existing.values() if r.status != "ok")
        self.wall_base = prior.wall_time if prior else 0.0

        self._limiter = SlidingWindowLimiter(budget, clock)
        self._state_lock = threading.Lock()
        self._stop = threading.Event()
        self._fatal: Optional[_FatalRunError] = None
        self._queue: queue.Queue[ChatRequest] = queue.Queue()
        self._since_ckpt = 0
        self._started = clock.now()
        self._last_ckpt = self._started

    def _line_cost(self, resp: ChatResponse) -> float:
        if not self.price_table:
            return 0.0
        prices = self.price_table[self.model_id]
        return (resp.input_tokens * prices["input"] + resp.output_tokens * prices["output"]) / 1e6

    def _rewrite_responses_if_dirty(self, parsed: dict[str, ChatResponse]) -> None:
        path = self.run_dir / RESPONSES_FILE
        if not path.exists():
            return
        raw_lines = [ln for ln in path.read_text(encoding="utf-8").splitlines() if ln.strip()]
        if len(raw_lines) != len(parsed):
            tmp = Path(str(path) + ".tmp")
            with tmp.open("w", encoding="utf-8") as fh:
                for resp in parsed.values():
                    fh.write(_response_line(resp) + "\n")
            os.replace(tmp, path)

    def ledger(self) -> RunLedger:
        return RunLedger(
            run_id=self.run_dir.name,
            model_id=self.model_id,
            completed_ids=frozenset(self.completed),
            pending_ids=frozenset(r.custom_id for r in self.requests if r.custom_id not in self.completed),
            cost_accrued=self.cost,
            wall_time=self.wall_base + (self.clock.now() - self._started),
            input_tokens=self.input_tokens,
            output_tokens=self.output_tokens,
            n_failed=self.n_failed,
        )

    def _checkpoint(self) -> None:
        save_ledger(self.ledger(), self.run_dir / LEDGER_FILE)
        self._last_ckpt = self.clock.now()
        self._since_ckpt = 0

    def execute(self) -> RunLedger:
        if not self.pending:
            ledger_path = self.run_dir / LEDGER_FILE
            if ledger_path.exists():
                loaded = load_ledger(ledger_path)
                if not loaded.pending_ids and loaded.completed_ids == frozenset(self.completed):
                    return loaded  # fixpoint: leave the ledger untouched
            ledger = self.ledger()
            save_ledger(ledger, ledger_path)
            return ledger

        self._checkpoint()
        for req in self.pending:
            self._queue.put(req)

        self._responses_fh = (self.run_dir / RESPONSES_FILE).open("a", encoding="utf-8")
        self._dispatch_fh = (self.run_dir / DISPATCH_LOG_FILE).open("a", encoding="utf-8")
        try:
            n_workers = min(self.budget.max_in_flight, len(self.pending))
            workers = [threading.Thread(target=self._worker, daemon=True) for _ in range(n_workers)]
            for w in workers:
                w.start()
            for w in workers:
                w.join()
        finally:
            self._responses_fh.close()
            self._dispatch_fh.close()

        if self._fatal is not None:
            # Leave the run resumable: files already reflect every terminal
            # completion, and the periodic checkpoints cover the ledger.
            raise self._fatal.original
        self._checkpoint()
        return self.ledger()

    def _worker(self) -> None:
        register = getattr(self.clock, "register_worker", None)
        unregister = getattr(self.clock, "unregister_worker", None)
        if register:
            register()
        try:
            while not self._stop.is_set():
                try:
                    req = self._queue.get_nowait()
                except queue.Empty:
                    return
                try:
                    self._process(req)
                except _FatalRunError as exc:
                    with self._state_lock:
                        if self._fatal is None:
                            self._fatal = exc
                    self._stop.set()
                    return
                except BaseException as exc:  # never lose a worker silently
                    with self._state_lock:
                        if self._fatal is None:
                            self._fatal = _FatalRunError(exc)
                    self._stop.set()
                    return
        finally:
            if unregister:
                unregister()

    def _process(self, req: ChatRequest) -> None:
        est = req.estimated_tokens
        reply: Optional[ProviderReply] = None
        last_exc: Optional[Exception] = None
        attempts = 0
        for attempt in range(1, self.budget.max_attempts + 1):
            if self._stop.is_set():
                return  # abandoned: stays pending for resume
            slot = self._limiter.acquire(est)
            attempts = attempt
            with self._state_lock:
                self._dispatch_fh.write(
                    json.dumps({"custom_id": req.custom_id, "attempt": attempt, "t": slot,
                                "est_tokens": est}) + "\n"
                )
                self._dispatch_fh.flush()
            try:
                reply = self.provider.complete(
                    req.custom_id, req.model_id, req.prompt, req.max_output_tokens, req.temperature
                )
                break
            except ProviderAuthError as exc:
                raise _FatalRunError(exc)
            except ProviderTransientError as exc:
                last_exc = exc
                if attempt < self.budget.max_attempts:
                    base = min(self.budget.base_backoff * 2 ** (attempt - 1), BACKOFF_CAP)
                    jitter = random.Random(f"{req.custom_id}:{attempt}").random()
                    self.clock.sleep(base * (1.0 + jitter))

        if reply is not None:
            resp = ChatResponse(req.custom_id, reply.raw_text, reply.input_tokens,
                                reply.output_tokens, "ok", attempts)
        else:
            status = "timeout" if isinstance(last_exc, ProviderTimeout) else "provider_error"
            resp = ChatResponse(req.custom_id, "", 0, 0, status, attempts,
                                error=scrub_secrets(str(last_exc)))
        self._record(resp)

    def _record(self, resp: ChatResponse) -> None:
        hook_exc: Optional[BaseException] = None
        with self._state_lock:
            self._responses_fh.write(_response_line(resp) + "\n")
            self._responses_fh.flush()
            self.completed.add(resp.custom_id)
            self.input_tokens += resp.input_tokens
            self.output_tokens += resp.output_tokens
            self.cost += self._line_cost(resp)
            if resp.status != "ok":
                self.n_failed += 1
            self._since_ckpt += 1
            n_done = len(self.completed)
            if self.progress_cb:
                self.progress_cb(n_done, len(self.requests))
            if self.completion_hook:
                try:
                    self.completion_hook(n_done)
                except BaseException as exc:  # simulated crash injection
                    hook_exc = exc
            if hook_exc is None and (
                self._since_ckpt >= CHECKPOINT_EVERY
                or self.clock.now() - self._last_ckpt >= CHECKPOINT_SECONDS
            ):
                self._checkpoint()
        if hook_exc is not None:
            raise _FatalRunError(hook_exc)


def run_batch(
    requests_path: str | Path,
    provider: ChatProvider,
    budget: RateBudget,
    run_dir: str | Path,
    *,
    clock: Optional[Clock] = None,
    price_table: Optional[dict] = None,
    completion_hook: Optional[Callable[[int], None]] = None,
    progress_cb: Optional[Callable[[int, int], None]] = None,
) -> tuple[Path, RunLedger]:
    """Execute a request file to terminal completion inside run_dir.

    Partially-executed run directories are picked up where they left off;
    every request ends as one terminal line in responses.jsonl.
    """
    run_dir = Path(run_dir)
    run_dir.mkdir(parents=True, exist_ok=True)
    clock = clock or RealClock()
    requests_path = Path(requests_path)
    local = run_dir / REQUESTS_FILE
    if requests_path.resolve() != local.resolve():
        data = requests_path.read_text(encoding="utf-8")
        if local.exists() and local.read_text(encoding="utf-8") != data:
            raise ValueError(f"{local} already holds a different request file")
        local.write_text(data, encoding="utf-8")

    with _run_lock(run_dir):
        requests = read_requests(local)
        if not requests:
            raise EmptyCorpus("request file is empty")
        prior = None
        ledger_path = run_dir / LEDGER_FILE
        if ledger_path.exists():
            prior = load_ledger(ledger_path)
        run = _BatchRun(run_dir, requests, provider, budget, clock, price_table,
                        completion_hook, progress_cb, prior)
        ledger = run.execute()
        return run_dir / RESPONSES_FILE, ledger


def resume(
    run_dir: str | Path,
    provider: ChatProvider,
    budget: RateBudget,
    *,
    clock: Optional[Clock] = None,
    price_table: Optional[dict] = None,
    completion_hook: Optional[Callable[[int], None]] = None,
    progress_cb: Optional[Callable[[int, int], None]] = None,
) -> tuple[Path, RunLedger]:
    """Re-dispatch only the pending requests of an interrupted run."""
    run_dir = Path(run_dir)
    ledger_path = run_dir / LEDGER_FILE
    if not ledger_path.exists():
        raise CorruptLedger(f"no ledger checkpoint in {run_dir}")
    load_ledger(ledger_path)  # checksum gate before any work
    return run_batch(
        run_dir / REQUESTS_FILE,
        provider,
        budget,
        run_dir,
        clock=clock,
        price_table=price_table,
        completion_hook=completion_hook,
        progress_cb=progress_cb,
    )
