/**
 * Results explorer: metric cards, confusion matrix, ROC curve, reliability
 * diagram, and the actor-critic conflict table.
 *
 * The client computes no metrics. Every displayed number is a string taken
 * verbatim from the service payload (the report's `display` block); the only
 * arithmetic here is SVG geometry for the two charts.
 */

import { Disagreement, MetricsPayload, ReliabilityBin, Report, RocPoint } from "./api.js";

const METRIC_CARDS: [string, string][] = [
  ["sensitivity", "Sensitivity"],
  ["specificity", "Specificity"],
  ["accuracy", "Accuracy"],
  ["precision", "Precision"],
  ["auc", "AUC"],
  ["brier", "Brier score"],
  ["ece", "ECE"],
  ["target_recall", "Target recall"],
  ["target_precision", "Target precision"],
  ["overlap", "Overlap"],
];

export function renderMetricCards(report: Report): string {
  const cards = METRIC_CARDS.map(([key, title]) => {
    const value = report.display[key] ?? "undefined";
    return [
      `<div class="metric-card" data-metric="${key}">`,
      `<span class="metric-title">${title}</span>`,
      `<span class="metric-value">${value}</span>`,
      `</div>`,
    ].join("");
  });
  return `<div class="metric-cards">${cards.join("\n")}</div>`;
}

export function renderConfusion(report: Report): string {
  const c = report.confusion;
  return [
    `<table class="confusion">`,
    `<tr><th></th><th>Human include</th><th>Human exclude</th></tr>`,
    `<tr><th>AI include</th><td class="tp">${c.tp}</td><td class="fp">${c.fp}</td></tr>`,
    `<tr><th>AI exclude</th><td class="fn">${c.fn}</td><td class="tn">${c.tn}</td></tr>`,
    `</table>`,
  ].join("\n");
}

function polyline(points: [number, number][], width: number, height: number, pad: number): string {
  return points
    .map(([x, y]) => {
      const px = pad + x * (width - 2 * pad);
      const py = height - pad - y * (height - 2 * pad);
      return `${px.toFixed(1)},${py.toFixed(1)}`;
    })
    .join(" ");
}

export function renderRocSvg(points: RocPoint[], width = 320, height = 320): string {
  const pad = 24;
  const curve = polyline(points.map((p) => [p.fpr, p.tpr]), width, height, pad);
  const diagonal = polyline([[0, 0], [1, 1]], width, height, pad);
  return [
    `<svg class="roc" viewBox="0 0 ${width} ${height}" role="img" aria-label="ROC curve">`,
    `<polyline class="diagonal" points="${diagonal}" fill="none" stroke="#bbb" stroke-dasharray="4 4"/>`,
    `<polyline class="curve" points="${curve}" fill="none" stroke="#1f6feb" stroke-width="2"/>`,
    `</svg>`,
  ].join("\n");
}

export function renderReliabilitySvg(bins: ReliabilityBin[], width = 320, height = 320): string {
  const pad = 24;
  const diagonal = polyline([[0, 0], [1, 1]], width, height, pad);
  const bars = bins
    .filter((b) => b.count > 0 && b.accuracy !== null)
    .map((b) => {
      const barWidth = (width - 2 * pad) / bins.length;
      const x = pad + (b.bin_center - 0.5 / bins.length) * (width - 2 * pad);
      const barHeight = (b.accuracy as number) * (height - 2 * pad);
      const y = height - pad - barHeight;
      return (
        `<rect class="bin" data-count="${b.count}" x="${x.toFixed(1)}" y="${y.toFixed(1)}" ` +
        `width="${barWidth.toFixed(1)}" height="${barHeight.toFixed(1)}"/>`
      );
    });
  return [
    `<svg class="reliability" viewBox="0 0 ${width} ${height}" role="img" aria-label="Reliability diagram">`,
    `<polyline class="diagonal" points="${diagonal}" fill="none" stroke="#bbb" stroke-dasharray="4 4"/>`,
    bars.join("\n"),
    `</svg>`,
  ].join("\n");
}

export function renderConflictTable(disagreements: Disagreement[]): string {
  if (disagreements.length === 0) {
    return `<p class="no-conflicts">Actor and critic agreed on every record.</p>`;
  }
  const rows = disagreements.map(
    (d) =>
      `<tr class="conflict" data-record="${d.record_id}">` +
      `<td>${d.record_id}</td>` +
      `<td>${d.actor_decision} (${d.actor_confidence})</td>` +
      `<td>${d.critic_decision} (${d.critic_confidence})</td>` +
      `</tr>`,
  );
  return [
    `<table class="conflicts">`,
    `<tr><th>Record</th><th>Actor</th><th>Critic</th></tr>`,
    rows.join("\n"),
    `</table>`,
  ].join("\n");
}

export function renderLevelToggle(active: string): string {
  const levels = ["fulltext", "final"];
  const buttons = levels.map(
    (level) =>
      `<button class="level${level === active ? " active" : ""}" data-level="${level}">` +
      `${level}</button>`,
  );
  return `<div class="level-toggle">${buttons.join("")}</div>`;
}

export function renderExplorer(metrics: MetricsPayload, disagreements: Disagreement[]): string {
  return [
    `<div class="explorer" data-level="${metrics.level}">`,
    renderLevelToggle(metrics.level),
    renderMetricCards(metrics.report),
    renderConfusion(metrics.report),
    `<div class="charts">`,
    renderRocSvg(metrics.roc_points),
    renderReliabilitySvg(metrics.reliability_bins),
    `</div>`,
    renderConflictTable(disagreements),
    `</div>`,
  ].join("\n");
}

export function renderEvaluationPending(level: string): string {
  return `<p class="evaluation-pending">Evaluation for level "${level}" is not available yet.</p>`;
}
