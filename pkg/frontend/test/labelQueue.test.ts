import { describe, expect, it } from "vitest";

import { ApiClient } from "../src/api.js";
import {
  createQueue,
  current,
  flush,
  handleKey,
  includeRate,
  labeledCount,
  renderLabelQueue,
} from "../src/labelQueue.js";
import { mockService } from "./mockService.js";

const ITEMS = Array.from({ length: 10 }, (_, i) => ({
  record_id: `rec${i}`,
  title: `Record ${i}`,
  abstract: `Abstract ${i}`,
}));

function labelingService() {
  const stored = new Map<string, string>();
  const service = mockService([
    {
      method: "POST",
      match: /\/v1\/runs\/run-1\/labels$/,
      handler: (call) => {
        const body = call.body as { labels: { record_id: string; human_decision: string }[] };
        for (const label of body.labels) {
          stored.set(label.record_id, label.human_decision);
        }
        return { status: 200, body: { stored: stored.size } };
      },
    },
  ]);
  return { service, stored };
}

describe("label queue", () => {
  it("labels with keystrokes and advances", () => {
    let state = createQueue(ITEMS);
    expect(current(state)?.record_id).toBe("rec0");
    state = handleKey(state, "i");
    state = handleKey(state, "e");
    expect(labeledCount(state)).toBe(2);
    expect(current(state)?.record_id).toBe("rec2");
    expect(includeRate(state)).toBe(0.5);
  });

  it("arrow keys navigate without labeling", () => {
    let state = createQueue(ITEMS);
    state = handleKey(state, "ArrowRight");
    state = handleKey(state, "ArrowRight");
    state = handleKey(state, "ArrowLeft");
    expect(current(state)?.record_id).toBe("rec1");
    expect(labeledCount(state)).toBe(0);
  });

  it("posts labels and reports the stored count", async () => {
    const { service } = labelingService();
    const client = new ApiClient("", service.fetcher);
    let state = createQueue(ITEMS);
    for (const key of ["i", "e", "i", "e", "i"]) {
      state = handleKey(state, key);
    }
    const result = await flush(state, client, "run-1");
    expect(result.stored).toBe(5);
    expect(result.state.outbox.length).toBe(0);
    expect(labeledCount(result.state)).toBe(5);
  });

  it("relabeling updates the value without growing the count", async () => {
    const { service, stored } = labelingService();
    const client = new ApiClient("", service.fetcher);
    let state = createQueue(ITEMS);
    state = handleKey(state, "i");
    state = handleKey(state, "ArrowLeft"); // back to rec0
    state = handleKey(state, "e");
    expect(labeledCount(state)).toBe(1);
    const result = await flush(state, client, "run-1");
    expect(result.stored).toBe(1);
    expect(stored.get("rec0")).toBe("exclude"); // latest wins
  });

  it("survives a service outage with local queueing and a retry banner", async () => {
    const { service } = labelingService();
    const client = new ApiClient("", service.fetcher);
    let state = createQueue(ITEMS);
    state = handleKey(state, "i");
    state = handleKey(state, "e");

    service.failAllWithNetworkError(true);
    let result = await flush(state, client, "run-1");
    expect(result.state.offline).toBe(true);
    expect(result.state.outbox.length).toBe(2); // nothing lost
    expect(renderLabelQueue(result.state)).toContain("2 labels queued locally");

    service.failAllWithNetworkError(false);
    result = await flush(result.state, client, "run-1");
    expect(result.state.offline).toBe(false);
    expect(result.state.outbox.length).toBe(0);
    expect(result.stored).toBe(2);
  });

  it("skips a 422 record with a warning and keeps the rest", async () => {
    const service = mockService([
      {
        method: "POST",
        match: /labels$/,
        handler: () => ({ status: 422, body: { error: "record_id 'rec0' is not in the run's corpus" } }),
      },
    ]);
    const client = new ApiClient("", service.fetcher);
    let state = createQueue(ITEMS);
    state = handleKey(state, "i");
    state = handleKey(state, "e");
    const result = await flush(state, client, "run-1");
    expect(result.state.skipped).toEqual(["rec0"]);
    expect(result.state.outbox.length).toBe(1);
  });

  it("renders progress and the include rate", () => {
    let state = createQueue(ITEMS);
    for (const key of ["i", "i", "e", "i"]) {
      state = handleKey(state, key);
    }
    const html = renderLabelQueue(state);
    expect(html).toContain("4/10 labeled");
    expect(html).toContain("include rate 75%");
    expect(html).toContain("Record 4"); // next item on deck
  });
});
