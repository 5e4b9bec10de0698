/**
 * Browser entry: wires the wizard, monitor + label queue, and results
 * explorer onto the page. All state lives in the service; this file only
 * routes events and re-renders.
 */

import { ApiClient, ApiError } from "./api.js";
import { renderEvaluationPending, renderExplorer } from "./explorer.js";
import { createQueue, flush, handleKey, QueueItem, renderLabelQueue } from "./labelQueue.js";
import { pollRun, renderMonitor } from "./monitor.js";
import { emptyForm, renderFieldErrors, submitWizard, WizardForm } from "./wizard.js";

const client = new ApiClient("", (url, init) => fetch(url, init));

function el(id: string): HTMLElement {
  const node = document.getElementById(id);
  if (!node) throw new Error(`missing #${id}`);
  return node;
}

function formFromInputs(): WizardForm {
  const value = (id: string) => (el(id) as HTMLInputElement).value;
  const form = emptyForm();
  form.corpusPath = value("corpus-path");
  form.criteriaPath = value("criteria-path");
  form.actorModelId = value("actor-model");
  form.mode = value("mode") as WizardForm["mode"];
  form.rule = value("rule");
  form.criticModelId = value("critic-model");
  form.replicates = parseInt(value("replicates") || "1", 10);
  form.includesPath = value("includes-path");
  form.excludesPath = value("excludes-path");
  return form;
}

async function showResults(runId: string, level: string): Promise<void> {
  const container = el("explorer");
  try {
    const [metrics, results] = await Promise.all([
      client.getMetrics(runId, level),
      client.getResults(runId, level),
    ]);
    container.innerHTML = renderExplorer(metrics, results.disagreements);
    container.querySelectorAll("button.level").forEach((button) => {
      button.addEventListener("click", () => {
        void showResults(runId, (button as HTMLButtonElement).dataset.level ?? level);
      });
    });
  } catch (err) {
    if (err instanceof ApiError && err.status === 409) {
      container.innerHTML = renderEvaluationPending(level);
    } else {
      throw err;
    }
  }
}

function startLabelQueue(runId: string, items: QueueItem[]): void {
  let state = createQueue(items);
  const container = el("label-queue");
  const render = () => {
    container.innerHTML = renderLabelQueue(state);
  };
  document.addEventListener("keydown", (event) => {
    state = handleKey(state, event.key);
    render();
    void flush(state, client, runId).then((result) => {
      state = result.state;
      render();
    });
  });
  render();
}

async function launch(): Promise<void> {
  const form = formFromInputs();
  const errorBox = el("wizard-errors");
  const result = await submitWizard(client, form);
  if (!result.ok) {
    errorBox.innerHTML = renderFieldErrors(result.errors);
    return;
  }
  errorBox.innerHTML = "";
  el("wizard").hidden = true;
  el("monitor-screen").hidden = false;
  const monitor = el("monitor-view");
  const final = await pollRun(client, result.runId, (snapshot) => {
    monitor.innerHTML = renderMonitor(snapshot);
  });
  if (final.phase === "done") {
    el("explorer-screen").hidden = false;
    await showResults(result.runId, "final");
    const page = await client.getResults(result.runId, "final");
    startLabelQueue(
      result.runId,
      page.decisions.map((d) => ({ record_id: d.record_id, title: d.record_id, abstract: "" })),
    );
  }
}

el("launch").addEventListener("click", () => {
  void launch();
});
