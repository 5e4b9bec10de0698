/**
 * Typed client for the screening service's /v1 HTTP+JSON API.
 *
 * The fetch implementation is injected so tests can script every route and
 * audit call counts; the browser entry passes window.fetch.
 */

export interface BudgetInput {
  requests_per_minute?: number;
  tokens_per_minute?: number;
  max_in_flight?: number;
  max_attempts?: number;
  base_backoff?: number;
}

export interface RunConfigInput {
  corpus_path: string;
  criteria_path: string;
  actor_model_id: string;
  mode: "single" | "actor_critic";
  rule?: string;
  critic_model_id?: string;
  replicates?: number;
  budget?: BudgetInput;
  labels?: Record<string, { includes: string; excludes: string }>;
  idempotency_key?: string;
}

export interface RunSnapshot {
  run_id: string;
  phase: string;
  completed: number;
  pending: number;
  failed: number;
  total: number;
  cost_accrued: number;
  progress_fraction: number;
  error: string | null;
}

export interface ConfusionCounts {
  tp: number;
  fp: number;
  fn: number;
  tn: number;
}

export interface Report {
  level: string;
  confusion: ConfusionCounts;
  metrics: Record<string, number | null>;
  display: Record<string, string>;
  n_evaluated: number;
  n_unlabeled: number;
}

export interface RocPoint {
  threshold: number | null;
  fpr: number;
  tpr: number;
}

export interface ReliabilityBin {
  bin_center: number;
  mean_confidence: number | null;
  accuracy: number | null;
  count: number;
}

export interface MetricsPayload {
  run_id: string;
  level: string;
  report: Report;
  roc_points: RocPoint[];
  reliability_bins: ReliabilityBin[];
}

export interface DecisionRow {
  record_id: string;
  decision: string;
  rule: string;
  aggregated_confidence: number;
  actor_confidence: number;
  critic_confidence: number | null;
}

export interface Disagreement {
  record_id: string;
  actor_decision: string;
  actor_confidence: number;
  critic_decision: string;
  critic_confidence: number;
}

export interface ResultsPayload {
  run_id: string;
  level: string;
  total: number;
  offset: number;
  decisions: DecisionRow[];
  disagreements: Disagreement[];
  report: Report | null;
}

export interface TrainingLabelInput {
  record_id: string;
  human_decision: "include" | "exclude";
  labeler?: string;
  labeled_at?: number;
}

export interface FetchResponse {
  status: number;
  json(): Promise<unknown>;
}

export type Fetcher = (url: string, init?: RequestInit) => Promise<FetchResponse>;

export class ApiError extends Error {
  constructor(
    readonly status: number,
    message: string,
    readonly field?: string,
  ) {
    super(message);
  }
}

interface ErrorBody {
  error?: string;
  field?: string;
}

export class ApiClient {
  constructor(
    private readonly baseUrl: string,
    private readonly fetcher: Fetcher,
  ) {}

  private async request<T>(method: string, path: string, body?: unknown): Promise<T> {
    const resp = await this.fetcher(`${this.baseUrl}${path}`, {
      method,
      headers: body === undefined ? undefined : { "Content-Type": "application/json" },
      body: body === undefined ? undefined : JSON.stringify(body),
    });
    const payload = (await resp.json()) as T & ErrorBody;
    if (resp.status >= 400) {
      throw new ApiError(resp.status, payload.error ?? `HTTP ${resp.status}`, payload.field);
    }
    return payload;
  }

  health(): Promise<{ status: string }> {
    return this.request("GET", "/v1/healthz");
  }

  createRun(config: RunConfigInput): Promise<{ run_id: string }> {
    return this.request("POST", "/v1/runs", config);
  }

  getRun(runId: string): Promise<RunSnapshot> {
    return this.request("GET", `/v1/runs/${runId}`);
  }

  postLabels(runId: string, labels: TrainingLabelInput[]): Promise<{ stored: number }> {
    return this.request("POST", `/v1/runs/${runId}/labels`, { labels });
  }

  getResults(runId: string, level: string, offset = 0, limit = 100): Promise<ResultsPayload> {
    return this.request(
      "GET",
      `/v1/runs/${runId}/results?level=${level}&offset=${offset}&limit=${limit}`,
    );
  }

  getMetrics(runId: string, level: string): Promise<MetricsPayload> {
    return this.request("GET", `/v1/runs/${runId}/metrics?level=${level}`);
  }
}
