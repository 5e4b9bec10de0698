import { describe, expect, it } from "vitest";

import { MetricsPayload, Report } from "../src/api.js";
import {
  renderConflictTable,
  renderConfusion,
  renderExplorer,
  renderMetricCards,
  renderReliabilitySvg,
  renderRocSvg,
} from "../src/explorer.js";

// Shaped exactly like the service's report_final.json for a strong-recall,
// low-precision screening row (57 of 63 includes found, 82 false includes).
const REPORT: Report = {
  level: "final",
  confusion: { tp: 57, fp: 82, fn: 6, tn: 676 },
  metrics: {
    sensitivity: 0.9047619047619048,
    specificity: 0.8918205804749341,
    accuracy: 0.892814371257485,
    precision: 0.4100719424460432,
    auc: 0.8,
    brier: 0.36,
    ece: 0.4,
    target_recall: 0.9047619047619048,
    target_precision: 0.4100719424460432,
    overlap: 57,
  },
  display: {
    sensitivity: "90.48%",
    specificity: "89.18%",
    accuracy: "89.28%",
    precision: "41.01%",
    auc: "0.80",
    brier: "0.36",
    ece: "0.40",
    target_recall: "90.48%",
    target_precision: "41.01%",
    overlap: "57",
  },
  n_evaluated: 821,
  n_unlabeled: 0,
};

const PAYLOAD: MetricsPayload = {
  run_id: "run-1",
  level: "final",
  report: REPORT,
  roc_points: [
    { threshold: null, fpr: 0, tpr: 0 },
    { threshold: 0.9, fpr: 0.05, tpr: 0.6 },
    { threshold: 0.7, fpr: 0.2, tpr: 0.9 },
    { threshold: 0.2, fpr: 1, tpr: 1 },
  ],
  reliability_bins: [
    { bin_center: 0.05, mean_confidence: null, accuracy: null, count: 0 },
    { bin_center: 0.55, mean_confidence: 0.52, accuracy: 0.5, count: 40 },
    { bin_center: 0.95, mean_confidence: 0.93, accuracy: 0.71, count: 160 },
  ],
};

function displayedMetricValues(html: string): Map<string, string> {
  const out = new Map<string, string>();
  const re = /data-metric="([^"]+)"><span class="metric-title">[^<]*<\/span><span class="metric-value">([^<]*)<\/span>/g;
  for (const match of html.matchAll(re)) {
    out.set(match[1], match[2]);
  }
  return out;
}

describe("results explorer", () => {
  it("shows the service's sensitivity string verbatim on the metric card", () => {
    const html = renderMetricCards(REPORT);
    expect(html).toContain("90.48%");
  });

  it("renders every metric card value exactly as the service sent it", () => {
    const values = displayedMetricValues(renderMetricCards(REPORT));
    expect(values.size).toBe(10);
    for (const [key, shown] of values) {
      expect(shown).toBe(REPORT.display[key]); // zero client-side computation
    }
  });

  it("passes undefined markers through untouched", () => {
    const report: Report = {
      ...REPORT,
      display: { ...REPORT.display, precision: "undefined", target_precision: "undefined" },
    };
    const values = displayedMetricValues(renderMetricCards(report));
    expect(values.get("precision")).toBe("undefined");
  });

  it("renders the confusion matrix counts verbatim", () => {
    const html = renderConfusion(REPORT);
    expect(html).toContain('<td class="tp">57</td>');
    expect(html).toContain('<td class="fp">82</td>');
    expect(html).toContain('<td class="fn">6</td>');
    expect(html).toContain('<td class="tn">676</td>');
  });

  it("builds the ROC polyline from the service points", () => {
    const html = renderRocSvg(PAYLOAD.roc_points, 100, 100);
    expect(html).toContain('class="curve"');
    // (0,0) maps to the bottom-left, (1,1) to the top-right of the padded box
    expect(html).toContain("24.0,76.0");
    expect(html).toContain("76.0,24.0");
  });

  it("draws one reliability bar per non-empty bin", () => {
    const html = renderReliabilitySvg(PAYLOAD.reliability_bins, 100, 100);
    const bars = html.match(/<rect class="bin"/g) ?? [];
    expect(bars.length).toBe(2);
    expect(html).toContain('data-count="160"');
  });

  it("lists actor-critic conflicts row by row", () => {
    const disagreements = [
      { record_id: "a", actor_decision: "include", actor_confidence: 0.9,
        critic_decision: "exclude", critic_confidence: 0.7 },
      { record_id: "b", actor_decision: "exclude", actor_confidence: 0.6,
        critic_decision: "include", critic_confidence: 0.8 },
      { record_id: "c", actor_decision: "include", actor_confidence: 0.5,
        critic_decision: "exclude", critic_confidence: 0.5 },
    ];
    const html = renderConflictTable(disagreements);
    const rows = html.match(/<tr class="conflict"/g) ?? [];
    expect(rows.length).toBe(3);
    expect(html).toContain("include (0.9)");
  });

  it("composes the full explorer with a level toggle", () => {
    const html = renderExplorer(PAYLOAD, []);
    expect(html).toContain('data-level="final"');
    expect(html).toContain('<button class="level active" data-level="final">');
    expect(html).toContain("90.48%");
    expect(html).toContain("agreed on every record");
  });

  it("snapshot: explorer layout is stable", () => {
    expect(renderExplorer(PAYLOAD, [])).toMatchSnapshot();
  });
});
