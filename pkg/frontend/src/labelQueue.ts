/**
 * Training-label queue: presents abstracts one at a time, turns include /
 * exclude keystrokes into labels, and posts them to the service.
 *
 * Labels accumulate in a local outbox and survive a service outage: a failed
 * flush keeps everything queued, flips the offline flag (rendered as a retry
 * banner), and the next flush retries the whole outbox. Re-labeling a record
 * updates the value without growing the progress count.
 */

import { ApiClient, ApiError, TrainingLabelInput } from "./api.js";

export interface QueueItem {
  record_id: string;
  title: string;
  abstract: string;
  existing?: "include" | "exclude";
}

export interface LabelQueueState {
  items: QueueItem[];
  cursor: number;
  labels: Map<string, "include" | "exclude">;
  outbox: TrainingLabelInput[];
  offline: boolean;
  skipped: string[];
}

export function createQueue(items: QueueItem[]): LabelQueueState {
  const labels = new Map<string, "include" | "exclude">();
  for (const item of items) {
    if (item.existing) labels.set(item.record_id, item.existing);
  }
  return { items, cursor: 0, labels, outbox: [], offline: false, skipped: [] };
}

export function current(state: LabelQueueState): QueueItem | null {
  return state.items[state.cursor] ?? null;
}

export function labeledCount(state: LabelQueueState): number {
  return state.labels.size;
}

export function includeRate(state: LabelQueueState): number | null {
  if (state.labels.size === 0) return null;
  let includes = 0;
  for (const decision of state.labels.values()) {
    if (decision === "include") includes += 1;
  }
  return includes / state.labels.size;
}

function label(state: LabelQueueState, decision: "include" | "exclude"): LabelQueueState {
  const item = current(state);
  if (!item) return state;
  const labels = new Map(state.labels);
  labels.set(item.record_id, decision);
  const outbox = state.outbox
    .filter((entry) => entry.record_id !== item.record_id)
    .concat([{ record_id: item.record_id, human_decision: decision, labeled_at: Date.now() / 1000 }]);
  return {
    ...state,
    labels,
    outbox,
    cursor: Math.min(state.cursor + 1, state.items.length),
  };
}

/** i/e label the current abstract; arrows move without labeling. */
export function handleKey(state: LabelQueueState, key: string): LabelQueueState {
  switch (key) {
    case "i":
      return label(state, "include");
    case "e":
      return label(state, "exclude");
    case "ArrowRight":
      return { ...state, cursor: Math.min(state.cursor + 1, state.items.length) };
    case "ArrowLeft":
      return { ...state, cursor: Math.max(state.cursor - 1, 0) };
    default:
      return state;
  }
}

export interface FlushResult {
  state: LabelQueueState;
  stored: number | null;
}

/** Post the outbox; on outage keep it queued and mark the state offline. */
export async function flush(
  state: LabelQueueState,
  client: ApiClient,
  runId: string,
): Promise<FlushResult> {
  if (state.outbox.length === 0) {
    return { state, stored: null };
  }
  try {
    const resp = await client.postLabels(runId, state.outbox);
    return { state: { ...state, outbox: [], offline: false }, stored: resp.stored };
  } catch (err) {
    if (err instanceof ApiError && err.status === 422) {
      // Unknown record: skip it with a warning, keep the rest queued.
      const bad = state.outbox[0];
      return {
        state: {
          ...state,
          outbox: state.outbox.slice(1),
          skipped: state.skipped.concat([bad.record_id]),
        },
        stored: null,
      };
    }
    return { state: { ...state, offline: true }, stored: null };
  }
}

export function renderLabelQueue(state: LabelQueueState): string {
  const item = current(state);
  const rate = includeRate(state);
  const banner = state.offline
    ? `<div class="retry-banner">Service unreachable; ${state.outbox.length} labels queued locally.</div>`
    : "";
  const body = item
    ? [
        `<h3 class="queue-title">${item.title}</h3>`,
        `<p class="queue-abstract">${item.abstract || "[no abstract]"}</p>`,
        `<p class="queue-hint">Press <kbd>i</kbd> to include, <kbd>e</kbd> to exclude.</p>`,
      ].join("\n")
    : `<p class="queue-done">All abstracts labeled.</p>`;
  return [
    `<div class="label-queue">`,
    banner,
    body,
    `<p class="queue-progress">${labeledCount(state)}/${state.items.length} labeled`
      + (rate === null ? "" : `; include rate ${(rate * 100).toFixed(0)}%`)
      + `</p>`,
    `</div>`,
  ].join("\n");
}
