import type { FetchLike, Hyper, Prediction, ProjectStatus } from "./types.js";

export class ApiError extends Error {
  constructor(
    readonly status: number,
    readonly detail: string,
  ) {
    super(detail);
    this.name = "ApiError";
  }
}

async function errorDetail(res: Response): Promise<string> {
  const text = await res.text();
  try {
    const obj = JSON.parse(text);
    if (obj && typeof obj.detail === "string") return obj.detail;
  } catch {
    // not JSON, use the raw body
  }
  return text || `${res.status} ${res.statusText}`;
}

export class Coordinator {
  constructor(
    readonly base: string,
    private fetchFn: FetchLike = fetch,
  ) {}

  private async request(method: string, path: string, body?: unknown): Promise<Response> {
    const init: RequestInit = { method };
    if (body !== undefined) {
      init.headers = { "content-type": "application/json" };
      init.body = JSON.stringify(body);
    }
    const res = await this.fetchFn(`${this.base}${path}`, init);
    if (!res.ok) throw new ApiError(res.status, await errorDetail(res));
    return res;
  }

  private async json(method: string, path: string, body?: unknown): Promise<any> {
    return (await this.request(method, path, body)).json();
  }

  async listProjects(): Promise<ProjectStatus[]> {
    return (await this.json("GET", "/projects")).projects;
  }

  createProject(config: object): Promise<ProjectStatus> {
    return this.json("POST", "/projects", config);
  }

  resumeArchive(doc: object, projectId?: string): Promise<ProjectStatus> {
    const query = projectId ? `?project_id=${encodeURIComponent(projectId)}` : "";
    return this.json("POST", `/projects${query}`, doc);
  }

  status(projectId: string): Promise<ProjectStatus> {
    return this.json("GET", `/projects/${encodeURIComponent(projectId)}`);
  }

  setHyper(projectId: string, patch: Partial<Hyper>): Promise<{ hyper: Hyper }> {
    return this.json("POST", `/projects/${encodeURIComponent(projectId)}/hyper`, patch);
  }

  setDuration(projectId: string, tSeconds: number): Promise<{ T_seconds: number }> {
    return this.json("POST", `/projects/${encodeURIComponent(projectId)}/duration`, {
      T_seconds: tSeconds,
    });
  }

  setWorkerPaused(projectId: string, workerId: string, paused: boolean): Promise<unknown> {
    const action = paused ? "pause" : "resume";
    const path = `/projects/${encodeURIComponent(projectId)}/workers/${encodeURIComponent(workerId)}/${action}`;
    return this.json("POST", path);
  }

  registerDataset(
    projectId: string,
    datastoreUrl: string,
    datasetId: string,
  ): Promise<{ registered: number; new_labels: string[] }> {
    return this.json("POST", `/projects/${encodeURIComponent(projectId)}/datasets`, {
      datastore_url: datastoreUrl,
      dataset_id: datasetId,
    });
  }

  // Raw text, so a saved snapshot is byte for byte what the server sent.
  async snapshotText(projectId: string): Promise<string> {
    const res = await this.request("POST", `/projects/${encodeURIComponent(projectId)}/snapshot`);
    return res.text();
  }

  predictPng(projectId: string, png: Uint8Array): Promise<Prediction> {
    return this.json("POST", `/projects/${encodeURIComponent(projectId)}/predict`, {
      image_png: toBase64(png),
    });
  }

  telemetryUrl(projectId: string): string {
    return `${this.base}/projects/${encodeURIComponent(projectId)}/telemetry`;
  }
}

export function toBase64(bytes: Uint8Array): string {
  // String.fromCharCode hits the argument-count limit on large arrays
  let binary = "";
  const step = 0x8000;
  for (let i = 0; i < bytes.length; i += step) {
    binary += String.fromCharCode(...bytes.subarray(i, i + step));
  }
  return btoa(binary);
}
