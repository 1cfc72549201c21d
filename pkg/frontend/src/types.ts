// JSON shapes served by the coordinator HTTP API.

export interface Hyper {
  learning_rate: number;
  l1_decay: number;
  l2_decay: number;
  dropout_p: number;
  adagrad_eps: number;
}

export interface WorkerIterationStats {
  latency_ewma_ms: number;
  budget_ms: number;
  example_count: number;
}

export interface IterationRecord {
  iteration: number;
  params_version: number;
  reports_received: number;
  total_examples: number;
  wall_ms: number;
  power: number;
  stale_reports: number;
  workers: Record<string, WorkerIterationStats>;
  metrics: Record<string, number>;
  hyper?: Hyper;
}

export interface WorkerStatus {
  worker_id: string;
  mode: string;
  paused: boolean;
  cache_ready: boolean;
  allocated: number;
  latency_ewma_ms: number;
}

export interface ProjectStatus {
  project_id: string;
  iteration: number;
  params_version: number;
  labels: string[];
  T_seconds: number;
  mode: string;
  hyper: Hyper;
  data_total: number;
  unallocated: number;
  stalled_iterations: number;
  workers: WorkerStatus[];
}

export interface Prediction {
  label: string;
  probability: number;
}

export type FetchLike = typeof fetch;
