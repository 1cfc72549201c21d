import type { IterationRecord, WorkerIterationStats } from "./types.js";

export interface WorkerRow {
  id: string;
  stats: WorkerIterationStats;
}

// Chart-ready columns accumulated from the record stream, one slot per
// iteration. Worker columns stay aligned: a worker absent from an iteration
// holds null there, so its line breaks instead of interpolating the gap.
export class TelemetrySeries {
  iterations: number[] = [];
  power: number[] = [];
  totalExamples: number[] = [];
  testError: (number | null)[] = [];
  workerLatency = new Map<string, (number | null)[]>();
  workerBudget = new Map<string, (number | null)[]>();
  workerExamples = new Map<string, (number | null)[]>();
  last: IterationRecord | null = null;

  get count(): number {
    return this.iterations.length;
  }

  // False when the record is a duplicate (a reconnect replays the backlog).
  push(record: IterationRecord): boolean {
    if (this.last !== null && record.iteration <= this.last.iteration) return false;
    const filled = this.iterations.length;
    this.iterations.push(record.iteration);
    this.power.push(record.power);
    this.totalExamples.push(record.total_examples);
    this.testError.push(record.metrics["test_error"] ?? null);
    const seen = new Set(Object.keys(record.workers));
    for (const [id, stats] of Object.entries(record.workers)) {
      column(this.workerLatency, id, filled).push(stats.latency_ewma_ms);
      column(this.workerBudget, id, filled).push(stats.budget_ms);
      column(this.workerExamples, id, filled).push(stats.example_count);
    }
    for (const m of [this.workerLatency, this.workerBudget, this.workerExamples]) {
      for (const [id, col] of m) {
        if (!seen.has(id)) col.push(null);
      }
    }
    this.last = record;
    return true;
  }

  // Rows mirror the latest record only: a worker that stops appearing
  // (lost, detached) is gone from the table on the very next record.
  workerRows(): WorkerRow[] {
    if (this.last === null) return [];
    return Object.entries(this.last.workers)
      .map(([id, stats]) => ({ id, stats }))
      .sort((a, b) => (a.id < b.id ? -1 : 1));
  }
}

function column(
  columns: Map<string, (number | null)[]>,
  id: string,
  filled: number,
): (number | null)[] {
  let col = columns.get(id);
  if (col === undefined) {
    // late joiner: null-pad the iterations it missed
    col = new Array(filled).fill(null);
    columns.set(id, col);
  }
  return col;
}
