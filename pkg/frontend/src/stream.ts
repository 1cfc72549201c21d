// Telemetry arrives as a server-sent event stream. A fetch reader is used
// instead of EventSource: same bytes, works under Node for tests, and the
// reconnect policy lives here instead of inside browser internals.

import type { FetchLike, IterationRecord } from "./types.js";

export class SseParser {
  private tail = "";
  private datas: string[] = [];

  // Feed a chunk, get back the data payload of every event completed by it.
  // Comment lines (keepalives) and incomplete trailing events produce nothing.
  feed(chunk: string): string[] {
    const out: string[] = [];
    const lines = (this.tail + chunk).split("\n");
    this.tail = lines.pop() ?? "";
    for (let line of lines) {
      if (line.endsWith("\r")) line = line.slice(0, -1);
      if (line === "") {
        if (this.datas.length > 0) out.push(this.datas.join("\n"));
        this.datas = [];
      } else if (line.startsWith("data:")) {
        this.datas.push(line.slice(5).trimStart());
      }
      // other field names and comments are ignored
    }
    return out;
  }
}

export type FeedState = "connecting" | "live" | "retrying" | "closed";

export interface FeedHooks {
  onRecord: (record: IterationRecord) => void;
  onState?: (state: FeedState) => void;
}

const BACKOFF_START_MS = 250;
const BACKOFF_CAP_MS = 8000;

export class TelemetryFeed {
  private stopped = false;
  private controller: AbortController | null = null;
  private attempt = 0;

  constructor(
    private url: string,
    private hooks: FeedHooks,
    private fetchFn: FetchLike = fetch,
  ) {}

  start(): void {
    void this.run();
  }

  close(): void {
    this.stopped = true;
    this.controller?.abort();
    this.hooks.onState?.("closed");
  }

  backoffMs(attempt: number): number {
    return Math.min(BACKOFF_START_MS * 2 ** attempt, BACKOFF_CAP_MS);
  }

  private async run(): Promise<void> {
    while (!this.stopped) {
      this.hooks.onState?.(this.attempt === 0 ? "connecting" : "retrying");
      try {
        await this.consume();
      } catch {
        // connection refused, stream error, or mid-record garbage: retry below
      }
      if (this.stopped) return;
      await sleep(this.backoffMs(this.attempt));
      this.attempt += 1;
    }
  }

  private async consume(): Promise<void> {
    this.controller = new AbortController();
    const res = await this.fetchFn(this.url, {
      signal: this.controller.signal,
      headers: { accept: "text/event-stream" },
    });
    if (!res.ok || !res.body) {
      throw new Error(`telemetry endpoint returned ${res.status}`);
    }
    const reader = res.body.getReader();
    const decoder = new TextDecoder();
    const parser = new SseParser();
    this.hooks.onState?.("live");
    this.attempt = 0; // healthy connection resets the backoff ladder
    for (;;) {
      const { done, value } = await reader.read();
      if (done) return;
      for (const data of parser.feed(decoder.decode(value, { stream: true }))) {
        this.hooks.onRecord(JSON.parse(data) as IterationRecord);
      }
    }
  }
}

function sleep(ms: number): Promise<void> {
  return new Promise((resolve) => setTimeout(resolve, ms));
}
