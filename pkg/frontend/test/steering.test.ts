// End-to-end steering session: a real coordinator, datastore, and two worker
// processes, driven through the dashboard DOM exactly as a person would.
// Needs the gradloom package importable by python3.

import { afterAll, describe, expect, test, vi } from "vitest";
import { spawn, spawnSync, type ChildProcess } from "node:child_process";
import { mkdtempSync, rmSync } from "node:fs";
import { tmpdir } from "node:os";
import { join } from "node:path";
import { createInterface } from "node:readline";
import { Window } from "happy-dom";
import { App } from "../src/app.js";
import { checkArchive } from "../src/archive.js";
import { TelemetryFeed } from "../src/stream.js";
import type { IterationRecord } from "../src/types.js";

const PY = ["python3", "-m", "gradloom", "--log-level", "warning"];

function run(...args: string[]): void {
  const res = spawnSync(PY[0], [...PY.slice(1), ...args], { encoding: "utf8" });
  if (res.status !== 0) {
    throw new Error(`${args[0]} failed (${res.status}):\n${res.stderr}`);
  }
}

async function service(args: string[]): Promise<{ proc: ChildProcess; port: number }> {
  const proc = spawn(PY[0], [...PY.slice(1), ...args], {
    stdio: ["ignore", "pipe", "inherit"],
  });
  const port = await new Promise<number>((resolve, reject) => {
    const timer = setTimeout(() => reject(new Error(`${args[0]}: no listening line`)), 30_000);
    const rl = createInterface({ input: proc.stdout! });
    rl.on("line", (line) => {
      try {
        const obj = JSON.parse(line);
        if (obj.event === "listening") {
          clearTimeout(timer);
          resolve(obj.port as number);
        }
      } catch {
        // non-JSON startup noise
      }
    });
    proc.on("exit", (code) => {
      clearTimeout(timer);
      reject(new Error(`${args[0]} exited before listening (${code})`));
    });
  });
  return { proc, port };
}

const procs: ChildProcess[] = [];
let tmp = "";
let win: Window | null = null;
let app: App | null = null;
let log: TelemetryFeed | null = null;

afterAll(() => {
  app?.dispose();
  log?.close();
  if (win) void win.happyDOM.abort();
  for (const p of procs.reverse()) p.kill("SIGTERM");
  if (tmp) rmSync(tmp, { recursive: true, force: true });
});

function submit(w: Window, form: HTMLElement): void {
  form.dispatchEvent(new w.Event("submit", { bubbles: true, cancelable: true }) as unknown as Event);
}

describe("live steering through the dashboard", () => {
  test("a scripted session steers a real two-worker run", { timeout: 240_000 }, async () => {
    tmp = mkdtempSync(join(tmpdir(), "gradloom-steer-"));
    const corpus = join(tmp, "corpus");
    run("digits", "--out", corpus, "--count", "240", "--seed", "11");

    const store = await service(["datastore", "--dir", join(tmp, "store"), "--port", "0"]);
    procs.push(store.proc);
    const dsUrl = `http://127.0.0.1:${store.port}`;
    const coord = await service(["coordinator", "--port", "0"]);
    procs.push(coord.proc);
    const base = `http://127.0.0.1:${coord.port}`;

    const created = await fetch(`${base}/projects`, {
      method: "POST",
      headers: { "content-type": "application/json" },
      body: JSON.stringify({
        project_id: "steer",
        spec: [
          { kind: "input", w: 28, h: 28, d: 1 },
          { kind: "fc", neurons: 16 },
          { kind: "relu" },
          { kind: "softmax", labels: ["0", "1", "2", "3", "4", "5", "6", "7", "8", "9"] },
        ],
        T_seconds: 1.0,
        seed: 9,
      }),
    });
    if (!created.ok) throw new Error(`project creation failed: ${await created.text()}`);

    run("ingest", "--from-dir", corpus, "--dataset-id", "digits",
        "--datastore", dsUrl, "--register", "--coordinator", base, "--project", "steer");

    for (const id of ["w1", "w2"]) {
      procs.push(spawn(PY[0], [...PY.slice(1), "worker",
        "--coordinator", base, "--project", "steer",
        "--id", id, "--datastore", dsUrl,
      ], { stdio: ["ignore", "ignore", "inherit"] }));
    }

    await vi.waitFor(async () => {
      const st = await (await fetch(`${base}/projects/steer`)).json();
      expect(st.workers.length).toBe(2);
      expect(st.data_total).toBeGreaterThan(0);
    }, { timeout: 60_000, interval: 500 });

    // -- the browser session starts here ------------------------------------

    win = new Window({
      settings: {
        navigation: {
          disableMainFrameNavigation: true,
          disableChildFrameNavigation: true,
          disableChildPageNavigation: true,
          disableFallbackToSetURL: true,
        },
      },
    });
    win.document.body.innerHTML = '<div id="app"></div>';
    app = new App(win.document.querySelector("#app") as unknown as HTMLElement, { base });
    await app.refreshProjects();
    const openBtn = [...app.$("#project-list").querySelectorAll("button.open-project")]
      .find((b) => b.textContent === "steer");
    expect(openBtn).toBeDefined();
    (openBtn as HTMLElement).click();

    // independent record log for the assertions below; the dashboard keeps
    // only chart columns, not whole records
    const records: IterationRecord[] = [];
    log = new TelemetryFeed(`${base}/projects/steer/telemetry`, {
      onRecord: (r) => records.push(r),
    });
    log.start();

    await vi.waitFor(() => {
      expect(app!.$("#feed-state").textContent).toBe("live");
      expect(app!.series.count).toBeGreaterThanOrEqual(2);
      expect(app!.series.last!.total_examples).toBeGreaterThan(0);
    }, { timeout: 90_000, interval: 250 });

    // one chart point per iteration elapsed
    const s = app.series;
    expect(s.count).toBe(s.last!.iteration);
    expect(app.$("#chart-power").querySelector(".series")).not.toBeNull();
    const latencyLabels = new Set(
      [...app.$("#chart-latency").querySelectorAll(".series")]
        .map((e) => e.getAttribute("data-label")),
    );
    expect(latencyLabels).toEqual(new Set(["w1", "w2"]));

    // -- change the learning rate through the form ---------------------------

    app.$<HTMLInputElement>("[name=learning_rate]").value = "0.02";
    submit(win, app.$("#hyper-form"));
    await vi.waitFor(() => {
      expect(app!.$("#hyper-msg").className).toBe("msg ok");
    }, { timeout: 10_000 });
    const ackIter = (await (await fetch(`${base}/projects/steer`)).json()).iteration as number;
    const changed = await vi.waitFor(() => {
      const r = records.find((x) => x.iteration === ackIter + 1);
      expect(r).toBeDefined();
      return r!;
    }, { timeout: 30_000, interval: 250 });
    expect(changed.hyper?.learning_rate).toBe(0.02);
    await vi.waitFor(() => {
      expect(app!.$("#view-meta").textContent).toContain("lr 0.02");
    }, { timeout: 15_000 });

    // -- pause w1 and watch its contribution stop ----------------------------

    const toggle = () =>
      app!.$("#workers").querySelector('tr[data-worker="w1"] button.toggle-worker');
    (toggle() as HTMLElement).click();
    await vi.waitFor(() => {
      expect(app!.$("#workers-msg").textContent).toBe("w1 paused");
    }, { timeout: 10_000 });
    const pausedAt = (await (await fetch(`${base}/projects/steer`)).json()).iteration as number;
    const zeroed = await vi.waitFor(() => {
      const r = records.find(
        (x) => x.iteration > pausedAt && x.workers["w1"]?.example_count === 0,
      );
      expect(r).toBeDefined();
      return r!;
    }, { timeout: 30_000, interval: 250 });
    expect(zeroed.iteration).toBeLessThanOrEqual(pausedAt + 2);
    expect(zeroed.workers["w2"].example_count).toBeGreaterThan(0);
    await vi.waitFor(() => {
      const cells = app!.$("#workers")
        .querySelector('tr[data-worker="w1"]')!.querySelectorAll("td");
      expect(cells[4].textContent).toBe("0");
    }, { timeout: 15_000 });

    // -- resume it -----------------------------------------------------------

    await vi.waitFor(() => {
      expect(toggle()!.textContent).toBe("resume");
    }, { timeout: 15_000 });
    (toggle() as HTMLElement).click();
    await vi.waitFor(() => {
      expect(app!.$("#workers-msg").textContent).toBe("w1 resumed");
    }, { timeout: 10_000 });
    await vi.waitFor(() => {
      const r = records[records.length - 1];
      expect(r.workers["w1"]?.example_count ?? 0).toBeGreaterThan(0);
    }, { timeout: 30_000, interval: 250 });

    // -- download a snapshot -------------------------------------------------

    let captured: Blob | null = null;
    (win.URL as unknown as { createObjectURL: (b: Blob) => string }).createObjectURL =
      (b: Blob) => {
        captured = b;
        return "blob:steer";
      };
    (win.URL as unknown as { revokeObjectURL: (u: string) => void }).revokeObjectURL = () => {};
    app.$("#snapshot-btn").click();
    await vi.waitFor(() => {
      expect(app!.$("#snapshot-msg").className).toBe("msg ok");
    }, { timeout: 15_000 });
    expect(captured).not.toBeNull();
    const doc = JSON.parse(await captured!.text());
    expect(checkArchive(doc)).toEqual([]);
    expect(doc.labels.length).toBe(10);
    expect(doc.iteration).toBeGreaterThanOrEqual(1);

    console.log(
      "[ACCEPTANCE] dashboard-live-steering: PASS "
      + `(lr 0.01->0.02 seen in record ${changed.iteration}; `
      + `w1 example_count 0 in record ${zeroed.iteration}, paused at ${pausedAt}; `
      + `snapshot schema-valid at iteration ${doc.iteration})`,
    );
  });
});
