import { describe, expect, test, vi } from "vitest";
import { SseParser, TelemetryFeed } from "../src/stream.js";
import type { IterationRecord } from "../src/types.js";

describe("SseParser", () => {
  test("events split across arbitrary chunk boundaries", () => {
    const p = new SseParser();
    expect(p.feed('data: {"a"')).toEqual([]);
    expect(p.feed(": 1}\n")).toEqual([]);
    expect(p.feed("\n")).toEqual(['{"a": 1}']);
  });

  test("several events in one chunk", () => {
    const p = new SseParser();
    expect(p.feed("data: 1\n\ndata: 2\n\ndata: 3\n\n")).toEqual(["1", "2", "3"]);
  });

  test("keepalive comments produce nothing", () => {
    const p = new SseParser();
    expect(p.feed(": keepalive\n\n: keepalive\n\ndata: 1\n\n")).toEqual(["1"]);
  });

  test("crlf line endings are tolerated", () => {
    const p = new SseParser();
    expect(p.feed("data: 1\r\n\r\n")).toEqual(["1"]);
    expect(p.feed("data: 2\r\ndata: 3\r\n\r\n")).toEqual(["2\n3"]);
  });

  test("multi-line data joined with newlines", () => {
    const p = new SseParser();
    expect(p.feed("data: a\ndata: b\n\n")).toEqual(["a\nb"]);
  });
});

function record(iteration: number): IterationRecord {
  return {
    iteration,
    params_version: iteration,
    reports_received: 0,
    total_examples: 0,
    wall_ms: 1000,
    power: 0,
    stale_reports: 0,
    workers: {},
    metrics: {},
  };
}

function sseBody(records: IterationRecord[]): string {
  return records.map((r) => `data: ${JSON.stringify(r)}\n\n`).join("");
}

function streamResponse(text: string, holdOpen = false): Response {
  const stream = new ReadableStream<Uint8Array>({
    start(controller) {
      controller.enqueue(new TextEncoder().encode(text));
      if (!holdOpen) controller.close();
    },
  });
  return new Response(stream, { status: 200 });
}

describe("TelemetryFeed", () => {
  test("parses records and reconnects after the server closes", async () => {
    let connects = 0;
    const fetchFn = async (): Promise<Response> => {
      connects += 1;
      if (connects === 1) return streamResponse(sseBody([record(1), record(2)]));
      return streamResponse(sseBody([record(3)]), true);
    };
    const got: number[] = [];
    const states: string[] = [];
    const feed = new TelemetryFeed("http://x/telemetry", {
      onRecord: (r) => got.push(r.iteration),
      onState: (s) => states.push(s),
    }, fetchFn as typeof fetch);
    feed.start();
    await vi.waitFor(() => {
      expect(got).toEqual([1, 2, 3]);
    }, { timeout: 5000 });
    expect(connects).toBe(2);
    expect(states).toContain("live");
    feed.close();
    expect(states[states.length - 1]).toBe("closed");
  });

  test("close aborts the in-flight request", async () => {
    let signal: AbortSignal | undefined;
    const fetchFn = async (_url: any, init?: RequestInit): Promise<Response> => {
      signal = init?.signal ?? undefined;
      return streamResponse("", true);
    };
    const feed = new TelemetryFeed("http://x/telemetry", { onRecord: () => {} },
                                   fetchFn as typeof fetch);
    feed.start();
    await vi.waitFor(() => {
      expect(signal).toBeDefined();
    });
    feed.close();
    expect(signal!.aborted).toBe(true);
  });

  test("backoff doubles from 250ms and caps at 8s", () => {
    const feed = new TelemetryFeed("http://x", { onRecord: () => {} });
    expect(feed.backoffMs(0)).toBe(250);
    expect(feed.backoffMs(1)).toBe(500);
    expect(feed.backoffMs(2)).toBe(1000);
    expect(feed.backoffMs(5)).toBe(8000);
    expect(feed.backoffMs(20)).toBe(8000);
  });

  test("keeps retrying while the endpoint is down", async () => {
    let connects = 0;
    const fetchFn = async (): Promise<Response> => {
      connects += 1;
      if (connects < 3) throw new Error("connection refused");
      return streamResponse(sseBody([record(1)]), true);
    };
    const got: number[] = [];
    const feed = new TelemetryFeed("http://x/telemetry", {
      onRecord: (r) => got.push(r.iteration),
    }, fetchFn as typeof fetch);
    feed.start();
    await vi.waitFor(() => {
      expect(got).toEqual([1]);
    }, { timeout: 5000 });
    expect(connects).toBe(3);
    feed.close();
  });
});
