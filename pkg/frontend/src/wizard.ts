/**
 * Run-setup wizard: collects corpus/criteria/model/rule/budget choices,
 * validates them client-side with the same rules the service enforces, and
 * only then submits. A network blip is retried once with the same
 * idempotency key, so a blind resubmit can never create a second run.
 */

import { ApiClient, ApiError, RunConfigInput } from "./api.js";

export const RULES = ["any_include", "critic_veto", "agreement_required"] as const;

export interface WizardForm {
  corpusPath: string;
  criteriaPath: string;
  actorModelId: string;
  mode: "single" | "actor_critic";
  rule: string;
  criticModelId: string;
  replicates: number;
  requestsPerMinute: number;
  tokensPerMinute: number;
  maxInFlight: number;
  includesPath: string;
  excludesPath: string;
  labelLevel: "fulltext" | "final";
}

export function emptyForm(): WizardForm {
  return {
    corpusPath: "",
    criteriaPath: "",
    actorModelId: "",
    mode: "single",
    rule: "",
    criticModelId: "",
    replicates: 1,
    requestsPerMinute: 600,
    tokensPerMinute: 1_000_000,
    maxInFlight: 8,
    includesPath: "",
    excludesPath: "",
    labelLevel: "final",
  };
}

/** Field-level validation mirroring the service's 400 responses. */
export function validateForm(form: WizardForm): Record<string, string> {
  const errors: Record<string, string> = {};
  if (!form.corpusPath.trim()) errors.corpus_path = "required";
  if (!form.criteriaPath.trim()) errors.criteria_path = "required";
  if (!form.actorModelId.trim()) errors.actor_model_id = "required";
  if (form.mode === "actor_critic") {
    if (!form.criticModelId.trim()) errors.critic_model_id = "required when mode is actor_critic";
    if (!form.rule) errors.rule = "required when mode is actor_critic";
    else if (!(RULES as readonly string[]).includes(form.rule)) {
      errors.rule = `must be one of ${RULES.join(", ")}`;
    }
  }
  if (!Number.isInteger(form.replicates) || form.replicates < 1) {
    errors.replicates = "must be an integer >= 1";
  }
  for (const [field, value] of [
    ["budget.requests_per_minute", form.requestsPerMinute],
    ["budget.tokens_per_minute", form.tokensPerMinute],
    ["budget.max_in_flight", form.maxInFlight],
  ] as const) {
    if (!(value > 0)) errors[field] = "must be a positive number";
  }
  const hasIncludes = form.includesPath.trim() !== "";
  const hasExcludes = form.excludesPath.trim() !== "";
  if (hasIncludes !== hasExcludes) {
    errors[`labels.${form.labelLevel}.${hasIncludes ? "excludes" : "includes"}`] = "required";
  }
  return errors;
}

export function toRunConfig(form: WizardForm, idempotencyKey: string): RunConfigInput {
  const config: RunConfigInput = {
    corpus_path: form.corpusPath.trim(),
    criteria_path: form.criteriaPath.trim(),
    actor_model_id: form.actorModelId.trim(),
    mode: form.mode,
    replicates: form.replicates,
    budget: {
      requests_per_minute: form.requestsPerMinute,
      tokens_per_minute: form.tokensPerMinute,
      max_in_flight: form.maxInFlight,
    },
    idempotency_key: idempotencyKey,
  };
  if (form.mode === "actor_critic") {
    config.rule = form.rule;
    config.critic_model_id = form.criticModelId.trim();
  }
  if (form.includesPath.trim() && form.excludesPath.trim()) {
    config.labels = {
      [form.labelLevel]: {
        includes: form.includesPath.trim(),
        excludes: form.excludesPath.trim(),
      },
    };
  }
  return config;
}

export type SubmitResult =
  | { ok: true; runId: string }
  | { ok: false; errors: Record<string, string> };

export function newIdempotencyKey(): string {
  return `ui-${Date.now().toString(36)}-${Math.random().toString(36).slice(2, 10)}`;
}

/**
 * Validate and submit. Invalid forms never reach the network. A thrown
 * (non-HTTP) fetch failure is retried once with the same idempotency key.
 */
export async function submitWizard(
  client: ApiClient,
  form: WizardForm,
  idempotencyKey: string = newIdempotencyKey(),
): Promise<SubmitResult> {
  const errors = validateForm(form);
  if (Object.keys(errors).length > 0) {
    return { ok: false, errors };
  }
  const config = toRunConfig(form, idempotencyKey);
  for (let attempt = 0; ; attempt++) {
    try {
      const created = await client.createRun(config);
      return { ok: true, runId: created.run_id };
    } catch (err) {
      if (err instanceof ApiError) {
        return { ok: false, errors: { [err.field ?? "form"]: err.message } };
      }
      if (attempt >= 1) {
        return { ok: false, errors: { form: `service unreachable: ${String(err)}` } };
      }
    }
  }
}

/** Inline-error HTML for the wizard screen. */
export function renderFieldErrors(errors: Record<string, string>): string {
  const items = Object.entries(errors)
    .sort(([a], [b]) => a.localeCompare(b))
    .map(([field, message]) => `<li class="field-error" data-field="${field}">${field}: ${message}</li>`);
  return items.length ? `<ul class="field-errors">${items.join("")}</ul>` : "";
}
