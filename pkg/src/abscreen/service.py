"""HTTP service exposing the screening pipeline to the web UI and scripts.

All endpoints are versioned under ``/v1``. Runs execute on background
threads; each run's mutable state is owned by its executor and polled
through immutable snapshots, so GETs never block on a running batch.
Provider credentials only ever live in environment variables and are
scrubbed from any error text before it reaches a response or a log line.
"""

from __future__ import annotations

import json
import threading
import time
import uuid
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

from fastapi import FastAPI, Request
from fastapi.responses import JSONResponse

from . import __version__, adjudicate, pipeline
from .corpus import CorpusError, load_corpus
from .providers import scrub_secrets

PAGE_LIMIT_DEFAULT = 100


@dataclass
class RunState:
    run_id: str
    config: pipeline.RunConfig
    run_dir: Path
    corpus_ids: frozenset[str]
    phase: str = "building"
    completed: int = 0
    completed_base: int = 0
    total: int = 0
    n_errors: int = 0
    cost_accrued: float = 0.0
    error: Optional[str] = None
    created_at: float = field(default_factory=time.time)

    def snapshot(self) -> dict:
        completed = self.completed_base + self.completed
        total = max(self.total, completed)
        return {
            "run_id": self.run_id,
            "phase": self.phase,
            "completed": completed,
            "pending": max(0, total - completed),
            "failed": self.n_errors,
            "total": total,
            "cost_accrued": self.cost_accrued,
            "progress_fraction": (completed / total) if total else 0.0,
            "error": self.error,
        }


class RunRegistry:
    def __init__(self, state_dir: Path):
        self.state_dir = state_dir
        self.runs: dict[str, RunState] = {}
        self.idempotency: dict[str, str] = {}
        self.lock = threading.Lock()

    def active_dirs(self) -> set[Path]:
        return {
            s.run_dir for s in self.runs.values() if s.phase not in ("done", "failed")
        }


def _error(status: int, message: str, field_name: Optional[str] = None) -> JSONResponse:
    body: dict = {"error": scrub_secrets(message)}
    if field_name:
        body["field"] = field_name
    return JSONResponse(body, status_code=status)


def _execute_run(state: RunState) -> None:
    def phase_cb(name: str) -> None:
        if name in ("actor_pass", "critic_pass"):
            state.completed_base += state.completed
            state.completed = 0
        state.phase = name

    def progress_cb(done: int, total: int) -> None:
        state.completed = done
        state.total = max(state.total, state.completed_base + total)

    try:
        summary = pipeline.run_screening(
            state.config,
            state.run_dir,
            phase_cb=phase_cb,
            progress_cb=progress_cb,
        )
        state.cost_accrued = summary["cost_accrued"]
        state.n_errors = summary["n_errors"]
        state.phase = "done"
    except Exception as exc:  # surfaced through GET /runs/{id}, never raised upstream
        state.error = scrub_secrets(str(exc))
        state.phase = "failed"


def create_app(state_dir: str | Path) -> FastAPI:
    state_dir = Path(state_dir)
    state_dir.mkdir(parents=True, exist_ok=True)
    registry = RunRegistry(state_dir)
    app = FastAPI(title="abscreen", version=__version__)

    @app.get("/v1/healthz")
    def healthz() -> dict:
        return {"status": "ok", "version": __version__}

    @app.post("/v1/runs")
    async def create_run(request: Request) -> JSONResponse:
        try:
            body = await request.json()
        except json.JSONDecodeError:
            return _error(400, "request body is not valid JSON")
        idempotency_key = body.pop("idempotency_key", None)

        with registry.lock:
            if idempotency_key and idempotency_key in registry.idempotency:
                run_id = registry.idempotency[idempotency_key]
                return JSONResponse({"run_id": run_id, "deduplicated": True}, status_code=201)

        try:
            config = pipeline.validate_run_config(body)
        except pipeline.ConfigValidation as exc:
            return _error(400, str(exc), field_name=exc.field)
        try:
            corpus = load_corpus(config.corpus_path)
        except CorpusError as exc:
            return _error(400, f"corpus_path: {exc}", field_name="corpus_path")

        run_id = uuid.uuid4().hex[:12]
        run_dir = Path(config.run_dir) if config.run_dir else state_dir / "runs" / run_id
        with registry.lock:
            if run_dir in registry.active_dirs():
                return _error(409, f"a run is already active in {run_dir}")
            state = RunState(
                run_id=run_id,
                config=config,
                run_dir=run_dir,
                corpus_ids=frozenset(r.record_id for r in corpus.records),
            )
            registry.runs[run_id] = state
            if idempotency_key:
                registry.idempotency[idempotency_key] = run_id
        threading.Thread(target=_execute_run, args=(state,), daemon=True).start()
        return JSONResponse({"run_id": run_id}, status_code=201)

    @app.get("/v1/runs/{run_id}")
    def get_progress(run_id: str):
        state = registry.runs.get(run_id)
        if state is None:
            return _error(404, f"unknown run {run_id}")
        return state.snapshot()

    @app.post("/v1/runs/{run_id}/labels")
    async def submit_labels(run_id: str, request: Request):
        state = registry.runs.get(run_id)
        if state is None:
            return _error(404, f"unknown run {run_id}")
        try:
            body = await request.json()
        except json.JSONDecodeError:
            return _error(400, "request body is not valid JSON")
        raw_labels = body.get("labels")
        if not isinstance(raw_labels, list) or not raw_labels:
            return _error(400, "labels: need a non-empty list", field_name="labels")
        labels = []
        for item in raw_labels:
            record_id = item.get("record_id", "")
            if record_id not in state.corpus_ids:
                return _error(422, f"record_id {record_id!r} is not in the run's corpus")
            decision = item.get("human_decision")
            if decision not in ("include", "exclude"):
                return _error(400, "human_decision must be include or exclude",
                              field_name="human_decision")
            labels.append(
                pipeline.TrainingLabel(
                    record_id=record_id,
                    human_decision=decision,
                    labeled_at=item.get("labeled_at", time.time()),
                    labeler=item.get("labeler", "reviewer"),
                )
            )
        state.run_dir.mkdir(parents=True, exist_ok=True)
        stored = pipeline.store_training_labels(state.run_dir, labels)
        return {"stored": stored}

    @app.get("/v1/runs/{run_id}/results")
    def get_results(run_id: str, level: str = "final", offset: int = 0,
                    limit: int = PAGE_LIMIT_DEFAULT):
        state = registry.runs.get(run_id)
        if state is None:
            return _error(404, f"unknown run {run_id}")
        finals_path = state.run_dir / "finals.csv"
        if not finals_path.exists():
            return _error(409, "decisions not yet available (run has not reached adjudication)")
        rows = adjudicate.read_finals(finals_path)
        rows.sort(key=lambda r: r["record_id"])
        page = rows[offset:offset + limit]
        disagreements = []
        disagreements_path = state.run_dir / "disagreements.json"
        if disagreements_path.exists():
            disagreements = json.loads(disagreements_path.read_text(encoding="utf-8"))
        report_path = state.run_dir / f"report_{level}.json"
        report = None
        if report_path.exists():
            report = json.loads(report_path.read_text(encoding="utf-8"))
        elif state.config.labels:
            return _error(409, f"evaluation not yet available for level {level!r}")
        return {
            "run_id": run_id,
            "level": level,
            "total": len(rows),
            "offset": offset,
            "decisions": page,
            "disagreements": disagreements,
            "report": report,
        }

    @app.get("/v1/runs/{run_id}/metrics")
    def get_metrics(run_id: str, level: str = "final"):
        state = registry.runs.get(run_id)
        if state is None:
            return _error(404, f"unknown run {run_id}")
        report_path = state.run_dir / f"report_{level}.json"
        if not report_path.exists():
            return _error(409, f"evaluation not yet available for level {level!r}")
        return {
            "run_id": run_id,
            "level": level,
            "report": json.loads(report_path.read_text(encoding="utf-8")),
            "roc_points": json.loads(
                (state.run_dir / f"roc_points_{level}.json").read_text(encoding="utf-8")
            ),
            "reliability_bins": json.loads(
                (state.run_dir / f"reliability_bins_{level}.json").read_text(encoding="utf-8")
            ),
        }

    return app
