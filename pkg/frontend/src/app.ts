import { ApiError, Coordinator } from "./api.js";
import { checkArchive } from "./archive.js";
import { renderChart } from "./charts.js";
import type { ChartSeries } from "./charts.js";
import { TelemetrySeries } from "./series.js";
import { TelemetryFeed } from "./stream.js";
import type { FetchLike, IterationRecord, ProjectStatus, WorkerStatus } from "./types.js";

export interface AppOptions {
  base: string;
  fetchFn?: FetchLike;
}

const PALETTE = [
  "#58a6ff", "#3fb950", "#d29922", "#f85149",
  "#bc8cff", "#39c5cf", "#e3823a", "#7d8590",
];

// Static skeleton; all dynamic content goes in through textContent.
const SHELL = `
<header>
  <h1>gradloom</h1>
  <span class="meta" id="api-base"></span>
  <span class="feed-state" id="feed-state">idle</span>
</header>
<main>
  <section class="panel" id="projects-panel">
    <div class="panel-head">
      <h2>projects</h2>
      <button id="refresh-projects" type="button">refresh</button>
    </div>
    <ul id="project-list"></ul>
    <div id="projects-msg" class="msg"></div>
    <details>
      <summary>new project</summary>
      <form id="create-form">
        <textarea id="create-config" rows="10" spellcheck="false"></textarea>
        <button type="submit">create</button>
        <div id="create-msg" class="msg"></div>
      </form>
    </details>
    <details>
      <summary>resume from snapshot</summary>
      <form id="resume-form">
        <input type="file" id="resume-file" accept=".json,application/json">
        <input type="text" id="resume-id" placeholder="project id">
        <button type="submit">resume</button>
        <div id="resume-msg" class="msg"></div>
      </form>
    </details>
  </section>
  <section class="panel hidden" id="view-panel">
    <div class="panel-head">
      <h2 id="view-title"></h2>
      <span class="meta" id="view-meta"></span>
      <button id="snapshot-btn" type="button">download snapshot</button>
    </div>
    <div id="snapshot-msg" class="msg"></div>
    <div class="charts">
      <figure><figcaption>power (examples/s)</figcaption><div id="chart-power"></div></figure>
      <figure><figcaption>tracked test error</figcaption><div id="chart-error"></div></figure>
      <figure><figcaption>worker latency (ms)</figcaption><div id="chart-latency"></div></figure>
      <figure><figcaption>worker budget</figcaption><div id="chart-budget"></div></figure>
    </div>
    <h3>workers</h3>
    <table id="workers">
      <thead>
        <tr>
          <th>worker</th><th>mode</th><th>latency ms</th><th>budget</th>
          <th>examples</th><th>allocated</th><th></th>
        </tr>
      </thead>
      <tbody></tbody>
    </table>
    <div id="workers-msg" class="msg"></div>
    <div class="controls">
      <form id="hyper-form">
        <h3>hyperparameters</h3>
        <label>learning rate <input name="learning_rate" inputmode="decimal"></label>
        <label>l1 decay <input name="l1_decay" inputmode="decimal"></label>
        <label>l2 decay <input name="l2_decay" inputmode="decimal"></label>
        <label>dropout <input name="dropout_p" inputmode="decimal"></label>
        <button type="submit">apply</button>
        <div id="hyper-msg" class="msg"></div>
      </form>
      <form id="duration-form">
        <h3>iteration duration</h3>
        <label>T seconds <input name="T_seconds" inputmode="decimal"></label>
        <button type="submit">set</button>
        <div id="duration-msg" class="msg"></div>
      </form>
      <form id="dataset-form">
        <h3>add dataset</h3>
        <label>datastore url <input name="datastore_url" placeholder="http://127.0.0.1:8701"></label>
        <label>dataset id <input name="dataset_id"></label>
        <button type="submit">register</button>
        <div id="dataset-msg" class="msg"></div>
      </form>
      <form id="predict-form">
        <h3>classify an image</h3>
        <input type="file" id="predict-file" accept="image/png,.png">
        <button type="submit">predict</button>
        <div id="predict-result" class="msg"></div>
      </form>
    </div>
  </section>
</main>
`;

const CONFIG_PLACEHOLDER = `{
  "project_id": "demo",
  "spec": [
    {"kind": "input", "w": 28, "h": 28, "d": 1},
    {"kind": "fc", "neurons": 16},
    {"kind": "relu"},
    {"kind": "softmax", "labels": ["0", "1", "2", "3", "4", "5", "6", "7", "8", "9"]}
  ],
  "T_seconds": 2.0,
  "seed": 7
}`;

export class App {
  readonly api: Coordinator;
  series = new TelemetrySeries();
  projectId: string | null = null;
  status: ProjectStatus | null = null;

  private readonly root: HTMLElement;
  private readonly doc: Document;
  private feed: TelemetryFeed | null = null;
  private readonly fetchFn: FetchLike;
  private statusPending = false;

  constructor(root: HTMLElement, opts: AppOptions) {
    this.root = root;
    this.doc = root.ownerDocument;
    this.fetchFn = opts.fetchFn ?? fetch;
    this.api = new Coordinator(opts.base.replace(/\/$/, ""), this.fetchFn);
    root.innerHTML = SHELL;
    this.$("#api-base").textContent = this.api.base;
    this.$<HTMLTextAreaElement>("#create-config").placeholder = CONFIG_PLACEHOLDER;
    this.wire();
  }

  dispose(): void {
    this.closeView();
  }

  $<T extends HTMLElement>(selector: string): T {
    const node = this.root.querySelector(selector);
    if (node === null) throw new Error(`missing element: ${selector}`);
    return node as T;
  }

  private wire(): void {
    this.$("#refresh-projects").addEventListener("click", () => void this.refreshProjects());
    const submits: Array<[string, () => Promise<void>]> = [
      ["#create-form", () => this.submitCreate()],
      ["#resume-form", () => this.submitResume()],
      ["#hyper-form", () => this.submitHyper()],
      ["#duration-form", () => this.submitDuration()],
      ["#dataset-form", () => this.submitDataset()],
      ["#predict-form", () => this.submitPredict()],
    ];
    for (const [selector, handler] of submits) {
      this.$(selector).addEventListener("submit", (ev) => {
        ev.preventDefault();
        void handler();
      });
    }
    this.$("#snapshot-btn").addEventListener("click", () => void this.downloadSnapshot());
  }

  // -- projects panel ------------------------------------------------------

  async refreshProjects(): Promise<void> {
    const msg = this.$("#projects-msg");
    let projects: ProjectStatus[];
    try {
      projects = await this.api.listProjects();
      setMsg(msg, "", true);
    } catch (e) {
      setMsg(msg, describe(e), false);
      return;
    }
    const list = this.$("#project-list");
    list.replaceChildren();
    if (projects.length === 0) {
      const li = this.doc.createElement("li");
      li.className = "placeholder";
      li.textContent = "no projects yet";
      list.appendChild(li);
      return;
    }
    for (const p of projects) {
      const li = this.doc.createElement("li");
      const open = this.doc.createElement("button");
      open.type = "button";
      open.className = "open-project";
      open.textContent = p.project_id;
      open.addEventListener("click", () => void this.openProject(p.project_id));
      const meta = this.doc.createElement("span");
      meta.className = "meta";
      meta.textContent =
        `iteration ${p.iteration}, ${p.workers.length} workers, T=${p.T_seconds}s`;
      li.append(open, " ", meta);
      list.appendChild(li);
    }
  }

  private async submitCreate(): Promise<void> {
    const msg = this.$("#create-msg");
    let config: unknown;
    try {
      config = JSON.parse(this.$<HTMLTextAreaElement>("#create-config").value);
    } catch (e) {
      setMsg(msg, `config is not valid JSON: ${describe(e)}`, false);
      return;
    }
    try {
      const status = await this.api.createProject(config as object);
      setMsg(msg, `created ${status.project_id}`, true);
      await this.refreshProjects();
      await this.openProject(status.project_id);
    } catch (e) {
      setMsg(msg, describe(e), false);
    }
  }

  private async submitResume(): Promise<void> {
    const msg = this.$("#resume-msg");
    const file = this.$<HTMLInputElement>("#resume-file").files?.[0];
    if (!file) {
      setMsg(msg, "choose a snapshot file", false);
      return;
    }
    let doc: unknown;
    try {
      doc = JSON.parse(await file.text());
    } catch (e) {
      setMsg(msg, `snapshot is not valid JSON: ${describe(e)}`, false);
      return;
    }
    const issues = checkArchive(doc);
    if (issues.length > 0) {
      setMsg(msg, issues.join("; "), false);
      return;
    }
    const requested = this.$<HTMLInputElement>("#resume-id").value.trim();
    try {
      const status = await this.api.resumeArchive(doc as object, requested || undefined);
      setMsg(msg, `resumed ${status.project_id} at iteration ${status.iteration}`, true);
      await this.refreshProjects();
      await this.openProject(status.project_id);
    } catch (e) {
      setMsg(msg, describe(e), false);
    }
  }

  // -- project view ----------------------------------------------------------

  async openProject(projectId: string): Promise<void> {
    this.closeView();
    this.projectId = projectId;
    this.series = new TelemetrySeries();
    const panel = this.$("#view-panel");
    panel.classList.remove("hidden");
    this.$("#view-title").textContent = projectId;
    for (const id of ["#snapshot-msg", "#hyper-msg", "#duration-msg",
                      "#dataset-msg", "#predict-result", "#workers-msg"]) {
      setMsg(this.$(id), "", true);
    }
    try {
      this.status = await this.api.status(projectId);
    } catch (e) {
      setMsg(this.$("#projects-msg"), describe(e), false);
      this.projectId = null;
      panel.classList.add("hidden");
      return;
    }
    this.$<HTMLInputElement>("[name=T_seconds]").value = String(this.status.T_seconds);
    this.renderView();
    // the guards drop stragglers from a feed whose project view was replaced
    this.feed = new TelemetryFeed(
      this.api.telemetryUrl(projectId),
      {
        onRecord: (r) => {
          if (this.projectId === projectId) this.onRecord(r);
        },
        onState: (s) => {
          if (this.projectId === projectId) this.$("#feed-state").textContent = s;
        },
      },
      this.fetchFn,
    );
    this.feed.start();
  }

  closeView(): void {
    this.feed?.close();
    this.feed = null;
    this.projectId = null;
    this.status = null;
    this.$("#view-panel").classList.add("hidden");
  }

  private onRecord(record: IterationRecord): void {
    if (!this.series.push(record)) return;
    this.renderView();
    void this.refreshStatus();
  }

  private async refreshStatus(): Promise<void> {
    if (this.projectId === null || this.statusPending) return;
    this.statusPending = true;
    try {
      this.status = await this.api.status(this.projectId);
    } catch {
      // transient: the charts keep running off records
    } finally {
      this.statusPending = false;
    }
  }

  private renderView(): void {
    const s = this.series;
    const last = s.last;
    const bits: string[] = [];
    if (this.status !== null) {
      bits.push(`T=${this.status.T_seconds}s`, this.status.mode,
                `${this.status.labels.length} labels`,
                `${this.status.data_total} examples`);
    }
    if (last !== null) {
      bits.unshift(`iteration ${last.iteration}`);
      if (last.hyper) bits.push(`lr ${last.hyper.learning_rate}`);
    }
    this.$("#view-meta").textContent = bits.join(" | ");

    renderChart(this.$("#chart-power"), s.iterations,
                [{ label: "power", color: PALETTE[0], points: s.power }]);
    renderChart(this.$("#chart-error"), s.iterations,
                [{ label: "test error", color: PALETTE[3], points: s.testError }]);
    renderChart(this.$("#chart-latency"), s.iterations, workerSeries(s.workerLatency));
    renderChart(this.$("#chart-budget"), s.iterations, workerSeries(s.workerBudget));
    this.renderWorkers();
  }

  private renderWorkers(): void {
    const tbody = this.$("#workers").querySelector("tbody")!;
    tbody.replaceChildren();
    const statusById = new Map<string, WorkerStatus>(
      (this.status?.workers ?? []).map((w) => [w.worker_id, w]),
    );
    interface Row {
      id: string;
      mode: string;
      paused: boolean;
      latency: number;
      budget: number | null;
      examples: number | null;
      allocated: number | null;
    }
    const rows: Row[] = [];
    for (const { id, stats } of this.series.workerRows()) {
      const st = statusById.get(id);
      statusById.delete(id);
      rows.push({
        id,
        mode: st?.mode ?? "train",
        paused: st?.paused ?? false,
        latency: stats.latency_ewma_ms,
        budget: stats.budget_ms,
        examples: stats.example_count,
        allocated: st?.allocated ?? null,
      });
    }
    // members with no row in the latest record yet: trackers, fresh joiners
    for (const [id, st] of statusById) {
      rows.push({
        id, mode: st.mode, paused: st.paused, latency: st.latency_ewma_ms,
        budget: null, examples: null, allocated: st.allocated,
      });
    }
    rows.sort((a, b) => (a.id < b.id ? -1 : 1));
    for (const row of rows) {
      const tr = this.doc.createElement("tr");
      tr.dataset["worker"] = row.id;
      if (row.paused) tr.className = "paused";
      tr.append(
        cell(this.doc, row.id),
        cell(this.doc, row.mode),
        cell(this.doc, row.latency.toFixed(1)),
        cell(this.doc, row.budget === null ? "" : String(Math.round(row.budget))),
        cell(this.doc, row.examples === null ? "" : String(row.examples)),
        cell(this.doc, row.allocated === null ? "" : String(row.allocated)),
      );
      const actions = this.doc.createElement("td");
      if (row.mode === "train") {
        const toggle = this.doc.createElement("button");
        toggle.type = "button";
        toggle.className = "toggle-worker";
        toggle.textContent = row.paused ? "resume" : "pause";
        toggle.addEventListener("click", () => void this.toggleWorker(row.id, !row.paused));
        actions.appendChild(toggle);
      }
      tr.appendChild(actions);
      tbody.appendChild(tr);
    }
  }

  private async toggleWorker(workerId: string, paused: boolean): Promise<void> {
    if (this.projectId === null) return;
    const msg = this.$("#workers-msg");
    try {
      await this.api.setWorkerPaused(this.projectId, workerId, paused);
      setMsg(msg, `${workerId} ${paused ? "paused" : "resumed"}`, true);
      this.statusPending = false;
      await this.refreshStatus();
      this.renderView();
    } catch (e) {
      setMsg(msg, describe(e), false);
    }
  }

  // -- steering forms -----------------------------------------------------------

  private async submitHyper(): Promise<void> {
    if (this.projectId === null) return;
    const msg = this.$("#hyper-msg");
    const patch: Record<string, number> = {};
    for (const name of ["learning_rate", "l1_decay", "l2_decay", "dropout_p"]) {
      const raw = this.$<HTMLInputElement>(`[name=${name}]`).value.trim();
      if (raw === "") continue;
      const value = Number(raw);
      if (!Number.isFinite(value)) {
        setMsg(msg, `${name} must be a number`, false);
        return;
      }
      patch[name] = value;
    }
    if (Object.keys(patch).length === 0) {
      setMsg(msg, "nothing to apply", false);
      return;
    }
    try {
      const res = await this.api.setHyper(this.projectId, patch);
      setMsg(msg, `applied: lr ${res.hyper.learning_rate}, l1 ${res.hyper.l1_decay}, `
        + `l2 ${res.hyper.l2_decay}, dropout ${res.hyper.dropout_p}`, true);
    } catch (e) {
      setMsg(msg, describe(e), false);
    }
  }

  private async submitDuration(): Promise<void> {
    if (this.projectId === null) return;
    const msg = this.$("#duration-msg");
    const value = Number(this.$<HTMLInputElement>("[name=T_seconds]").value);
    // same bounds the server enforces; reject here before the request
    if (!Number.isFinite(value) || value < 1 || value > 30) {
      setMsg(msg, "T_seconds must be within [1, 30]", false);
      return;
    }
    try {
      const res = await this.api.setDuration(this.projectId, value);
      setMsg(msg, `T set to ${res.T_seconds}s`, true);
      await this.refreshStatus();
    } catch (e) {
      setMsg(msg, describe(e), false);
    }
  }

  private async submitDataset(): Promise<void> {
    if (this.projectId === null) return;
    const msg = this.$("#dataset-msg");
    const url = this.$<HTMLInputElement>("[name=datastore_url]").value.trim();
    const datasetId = this.$<HTMLInputElement>("[name=dataset_id]").value.trim();
    if (url === "" || datasetId === "") {
      setMsg(msg, "need datastore url and dataset id", false);
      return;
    }
    try {
      const res = await this.api.registerDataset(this.projectId, url, datasetId);
      const labels = res.new_labels.length > 0 ? res.new_labels.join(", ") : "none";
      setMsg(msg, `registered ${res.registered} examples, new labels: ${labels}`, true);
      await this.refreshStatus();
      this.renderView();
    } catch (e) {
      setMsg(msg, describe(e), false);
    }
  }

  private async downloadSnapshot(): Promise<void> {
    if (this.projectId === null) return;
    const msg = this.$("#snapshot-msg");
    try {
      const text = await this.api.snapshotText(this.projectId);
      const issues = checkArchive(JSON.parse(text));
      if (issues.length > 0) {
        setMsg(msg, `snapshot failed validation: ${issues.join("; ")}`, false);
        return;
      }
      triggerDownload(this.doc, `${this.projectId}-snapshot.json`, text);
      setMsg(msg, `snapshot saved (${text.length} bytes)`, true);
    } catch (e) {
      setMsg(msg, describe(e), false);
    }
  }

  private async submitPredict(): Promise<void> {
    if (this.projectId === null) return;
    const out = this.$("#predict-result");
    const file = this.$<HTMLInputElement>("#predict-file").files?.[0];
    if (!file) {
      setMsg(out, "choose a PNG first", false);
      return;
    }
    try {
      const bytes = new Uint8Array(await file.arrayBuffer());
      const res = await this.api.predictPng(this.projectId, bytes);
      setMsg(out, `${res.label} ${(res.probability * 100).toFixed(1)}%`, true);
    } catch (e) {
      // server-side failures (wrong size, not a PNG) show exactly as sent
      setMsg(out, describe(e), false);
    }
  }
}

export function mountApp(root: HTMLElement, opts: AppOptions): App {
  const app = new App(root, opts);
  void app.refreshProjects();
  return app;
}

// -- small helpers -------------------------------------------------------------

function workerSeries(columns: Map<string, (number | null)[]>): ChartSeries[] {
  return [...columns.keys()].sort().map((id, i) => ({
    label: id,
    color: PALETTE[i % PALETTE.length],
    points: columns.get(id)!,
  }));
}

function cell(doc: Document, text: string): HTMLTableCellElement {
  const td = doc.createElement("td");
  td.textContent = text;
  return td;
}

function setMsg(node: HTMLElement, text: string, ok: boolean): void {
  node.textContent = text;
  node.className = text === "" ? "msg" : ok ? "msg ok" : "msg err";
}

function describe(e: unknown): string {
  if (e instanceof ApiError) return e.detail;
  return e instanceof Error ? e.message : String(e);
}

export function triggerDownload(doc: Document, filename: string, text: string): void {
  const win = doc.defaultView as (Window & typeof globalThis) | null;
  const BlobCtor = win?.Blob ?? Blob;
  const urlApi = win?.URL ?? URL;
  const anchor = doc.createElement("a");
  let href: string;
  if (typeof urlApi.createObjectURL === "function") {
    href = urlApi.createObjectURL(new BlobCtor([text], { type: "application/json" }));
  } else {
    href = `data:application/json,${encodeURIComponent(text)}`;
  }
  anchor.href = href;
  anchor.download = filename;
  doc.body.appendChild(anchor);
  anchor.click();
  anchor.remove();
  if (href.startsWith("blob:")) {
    setTimeout(() => urlApi.revokeObjectURL(href), 0);
  }
}
