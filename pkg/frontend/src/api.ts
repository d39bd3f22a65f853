/** The console's only data path: HTTP JSON against the gateway. */

import type {
  FeedbackRequest,
  ModuleRow,
  TaskResults,
  TaskStatus,
  ValidationError,
} from "./types.js";

export type FetchFn = (url: string, init?: RequestInit) => Promise<Response>;

/** Error with enough structure to render field-level messages.
 * `status` 0 means the request never got an HTTP answer. */
export class GatewayError extends Error {
  readonly status: number;
  readonly code: string;
  readonly detail: string;
  readonly report: ValidationError[];

  constructor(status: number, code: string, detail: string, report: ValidationError[] = []) {
    super(`${code}: ${detail}`);
    this.status = status;
    this.code = code;
    this.detail = detail;
    this.report = report;
  }
}

export class GatewayClient {
  readonly base: string;
  private readonly fetchFn: FetchFn;

  constructor(base: string, fetchFn?: FetchFn) {
    this.base = base.replace(/\/+$/, "");
    this.fetchFn = fetchFn ?? ((url, init) => fetch(url, init));
  }

  /** POST /tasks. `canonicalGraph` is spliced into the body verbatim so the
   * submitted graph is exactly the canonical export, byte for byte. */
  async submitTask(canonicalGraph: string, sourcePayloads?: Record<string, unknown>): Promise<string> {
    let body = `{"graph":${canonicalGraph}}`;
    if (sourcePayloads !== undefined) {
      body = `{"graph":${canonicalGraph},"source_payloads":${JSON.stringify(sourcePayloads)}}`;
    }
    const data = await this.request("POST", "/tasks", body);
    return (data as { task_id: string }).task_id;
  }

  async getTask(taskId: string): Promise<TaskStatus> {
    return (await this.request("GET", `/tasks/${encodeURIComponent(taskId)}`)) as TaskStatus;
  }

  async getResults(taskId: string, node?: number, limit = 1000, offset = 0): Promise<TaskResults> {
    const q = new URLSearchParams();
    if (node !== undefined) q.set("node", String(node));
    q.set("limit", String(limit));
    q.set("offset", String(offset));
    const path = `/tasks/${encodeURIComponent(taskId)}/results?${q.toString()}`;
    return (await this.request("GET", path)) as TaskResults;
  }

  async listModules(): Promise<ModuleRow[]> {
    const data = await this.request("GET", "/modules");
    return (data as { modules: ModuleRow[] }).modules;
  }

  async postFeedback(req: FeedbackRequest): Promise<string> {
    const data = await this.request("POST", "/feedback", JSON.stringify(req));
    return (data as { feedback_id: string }).feedback_id;
  }

  async health(): Promise<boolean> {
    try {
      await this.request("GET", "/healthz");
      return true;
    } catch {
      return false;
    }
  }

  private async request(method: string, path: string, body?: string): Promise<unknown> {
    let resp: Response;
    try {
      resp = await this.fetchFn(this.base + path, {
        method,
        headers: body === undefined ? undefined : { "content-type": "application/json" },
        body,
      });
    } catch (e) {
      throw new GatewayError(0, "NETWORK", e instanceof Error ? e.message : String(e));
    }
    let data: unknown = null;
    try {
      data = await resp.json();
    } catch {
      // fall through; non-JSON bodies only matter on errors
    }
    if (!resp.ok) {
      const obj = (data ?? {}) as Record<string, unknown>;
      const code = typeof obj.error === "string" ? obj.error : `HTTP_${resp.status}`;
      const detail = typeof obj.detail === "string" ? obj.detail : "";
      const report = obj.report as { errors?: ValidationError[] } | undefined;
      throw new GatewayError(resp.status, code, detail, report?.errors ?? []);
    }
    return data;
  }
}

/** Deployment config fetched at startup; `url` is resolved relative to the
 * page so the built assets stay host-agnostic. */
export async function loadConfig(fetchFn?: FetchFn, url = "./config.json"): Promise<{ gateway: string }> {
  const f = fetchFn ?? ((u: string, init?: RequestInit) => fetch(u, init));
  try {
    const resp = await f(url);
    if (resp.ok) {
      const cfg = (await resp.json()) as { gateway?: string };
      if (typeof cfg.gateway === "string" && cfg.gateway.length > 0) {
        return { gateway: cfg.gateway };
      }
    }
  } catch {
    // fall through to the default below
  }
  return { gateway: "http://127.0.0.1:7610" };
}
