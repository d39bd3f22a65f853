/** The console's only data path: HTTP JSON against the gateway. */
/** Error with enough structure to render field-level messages.
 * `status` 0 means the request never got an HTTP answer. */
export class GatewayError extends Error {
    constructor(status, code, detail, report = []) {
        super(`${code}: ${detail}`);
        this.status = status;
        this.code = code;
        this.detail = detail;
        this.report = report;
    }
}
export class GatewayClient {
    constructor(base, fetchFn) {
        this.base = base.replace(/\/+$/, "");
        this.fetchFn = fetchFn ?? ((url, init) => fetch(url, init));
    }
    /** POST /tasks. `canonicalGraph` is spliced into the body verbatim so the
     * submitted graph is exactly the canonical export, byte for byte. */
    async submitTask(canonicalGraph, sourcePayloads) {
        let body = `{"graph":${canonicalGraph}}`;
        if (sourcePayloads !== undefined) {
            body = `{"graph":${canonicalGraph},"source_payloads":${JSON.stringify(sourcePayloads)}}`;
        }
        const data = await this.request("POST", "/tasks", body);
        return data.task_id;
    }
    async getTask(taskId) {
        return (await this.request("GET", `/tasks/${encodeURIComponent(taskId)}`));
    }
    async getResults(taskId, node, limit = 1000, offset = 0) {
        const q = new URLSearchParams();
        if (node !== undefined)
            q.set("node", String(node));
        q.set("limit", String(limit));
        q.set("offset", String(offset));
        const path = `/tasks/${encodeURIComponent(taskId)}/results?${q.toString()}`;
        return (await this.request("GET", path));
    }
    async listModules() {
        const data = await this.request("GET", "/modules");
        return data.modules;
    }
    async postFeedback(req) {
        const data = await this.request("POST", "/feedback", JSON.stringify(req));
        return data.feedback_id;
    }
    async health() {
        try {
            await this.request("GET", "/healthz");
            return true;
        }
        catch {
            return false;
        }
    }
    async request(method, path, body) {
        let resp;
        try {
            resp = await this.fetchFn(this.base + path, {
                method,
                headers: body === undefined ? undefined : { "content-type": "application/json" },
                body,
            });
        }
        catch (e) {
            throw new GatewayError(0, "NETWORK", e instanceof Error ? e.message : String(e));
        }
        let data = null;
        try {
            data = await resp.json();
        }
        catch {
            // fall through; non-JSON bodies only matter on errors
        }
        if (!resp.ok) {
            const obj = (data ?? {});
            const code = typeof obj.error === "string" ? obj.error : `HTTP_${resp.status}`;
            const detail = typeof obj.detail === "string" ? obj.detail : "";
            const report = obj.report;
            throw new GatewayError(resp.status, code, detail, report?.errors ?? []);
        }
        return data;
    }
}
/** Deployment config fetched at startup; `url` is resolved relative to the
 * page so the built assets stay host-agnostic. */
export async function loadConfig(fetchFn, url = "./config.json") {
    const f = fetchFn ?? ((u, init) => fetch(u, init));
    try {
        const resp = await f(url);
        if (resp.ok) {
            const cfg = (await resp.json());
            if (typeof cfg.gateway === "string" && cfg.gateway.length > 0) {
                return { gateway: cfg.gateway };
            }
        }
    }
    catch {
        // fall through to the default below
    }
    return { gateway: "http://127.0.0.1:7610" };
}
