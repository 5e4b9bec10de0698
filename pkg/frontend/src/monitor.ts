/**
 * Run monitor: polls GET /v1/runs/{id} until the run finishes.
 *
 * Polling respects a minimum interval and backs off geometrically while the
 * phase stays unchanged; any phase change resets the interval. The sleep
 * function is injected so tests can drive the loop synchronously.
 */

import { ApiClient, RunSnapshot } from "./api.js";

export interface PollOptions {
  minIntervalMs: number;
  maxIntervalMs: number;
  backoffFactor: number;
}

export const DEFAULT_POLL: PollOptions = {
  minIntervalMs: 500,
  maxIntervalMs: 8000,
  backoffFactor: 1.5,
};

export type Sleep = (ms: number) => Promise<void>;

const TERMINAL_PHASES = new Set(["done", "failed"]);

export async function pollRun(
  client: ApiClient,
  runId: string,
  onUpdate: (snapshot: RunSnapshot) => void,
  options: PollOptions = DEFAULT_POLL,
  sleep: Sleep = (ms) => new Promise((resolve) => setTimeout(resolve, ms)),
): Promise<RunSnapshot> {
  let interval = options.minIntervalMs;
  let lastPhase: string | null = null;
  for (;;) {
    const snapshot = await client.getRun(runId);
    onUpdate(snapshot);
    if (TERMINAL_PHASES.has(snapshot.phase)) {
      return snapshot;
    }
    if (snapshot.phase === lastPhase) {
      interval = Math.min(interval * options.backoffFactor, options.maxIntervalMs);
    } else {
      interval = options.minIntervalMs;
      lastPhase = snapshot.phase;
    }
    await sleep(Math.max(interval, options.minIntervalMs));
  }
}

const PHASE_LABELS: Record<string, string> = {
  building: "Building requests",
  actor_pass: "Actor screening",
  critic_pass: "Critic screening",
  adjudicating: "Adjudicating",
  evaluating: "Evaluating",
  done: "Done",
  failed: "Failed",
};

export function renderMonitor(snapshot: RunSnapshot): string {
  const phase = PHASE_LABELS[snapshot.phase] ?? snapshot.phase;
  const pct = Math.round(snapshot.progress_fraction * 100);
  const error = snapshot.error
    ? `<p class="run-error">${snapshot.error}</p>`
    : "";
  return [
    `<div class="monitor" data-run="${snapshot.run_id}" data-phase="${snapshot.phase}">`,
    `<h2>Run ${snapshot.run_id}</h2>`,
    `<p class="phase">${phase}</p>`,
    `<progress max="100" value="${pct}"></progress>`,
    `<p class="counts">${snapshot.completed} completed / ${snapshot.pending} pending`
      + ` / ${snapshot.failed} failed</p>`,
    `<p class="cost">Cost accrued: $${snapshot.cost_accrued.toFixed(4)}</p>`,
    error,
    `</div>`,
  ].join("\n");
}
