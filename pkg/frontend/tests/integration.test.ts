/** End-to-end: the console modules driving a real deployment.
 *
 * Spawns the platform services (bus, store, launcher, gateway) plus the five
 * pipeline modules, then uses only the UI-side code — draft editing,
 * canonical export, the gateway client, the feedback widgets — to run a task
 * to completion, select a ranked candidate, and confirm the selection shows
 * up in `vpe feedback export`.
 */

import { spawn, spawnSync } from "node:child_process";
import type { ChildProcess } from "node:child_process";
import { mkdtempSync, readFileSync, rmSync, writeFileSync } from "node:fs";
import net from "node:net";
import { tmpdir } from "node:os";
import { join } from "node:path";
import { fileURLToPath } from "node:url";
import { afterAll, beforeAll, describe, expect, it } from "vitest";

import { GatewayClient } from "../src/api.js";
import { exportCanonical } from "../src/canonical.js";
import { addLink, addNode, emptyDraft, setParam } from "../src/draft.js";
import { buildHealthModel, buildTaskModel } from "../src/monitor.js";
import { RankSelection, rankedCandidates, satisfactionFeedback } from "../src/results.js";

const SRC_DIR = fileURLToPath(new URL("../../src", import.meta.url));
const MODULES = [
  "Frame-Source",
  "Pedestrian-Detector",
  "Pedestrian-Tracker",
  "Attr-Recognizer",
  "ReID-Ranker",
] as const;

const REGISTRY = {
  modules: [
    { module_id: "Frame-Source", input_datatypes: ["Trigger"], processor_id: "frame-source", instance_count: 1 },
    { module_id: "Pedestrian-Detector", input_datatypes: ["Frame"], processor_id: "detector", instance_count: 1 },
    { module_id: "Pedestrian-Tracker", input_datatypes: ["Pedestrian-BBox"], processor_id: "tracker", instance_count: 1 },
    { module_id: "Attr-Recognizer", input_datatypes: ["Pedestrian-Track"], processor_id: "attr-recognizer", instance_count: 1 },
    { module_id: "ReID-Ranker", input_datatypes: ["Pedestrian-Attribute"], processor_id: "reid-ranker", instance_count: 1 },
  ],
};

function freePort(): Promise<number> {
  return new Promise((resolvePort, reject) => {
    const srv = net.createServer();
    srv.listen(0, "127.0.0.1", () => {
      const { port } = srv.address() as net.AddressInfo;
      srv.close(() => resolvePort(port));
    });
    srv.on("error", reject);
  });
}

async function waitFor(check: () => Promise<boolean>, what: string, timeoutMs = 30000): Promise<void> {
  const deadline = Date.now() + timeoutMs;
  while (Date.now() < deadline) {
    if (await check()) return;
    await new Promise((r) => setTimeout(r, 100));
  }
  throw new Error(`timed out waiting for ${what}`);
}

describe("console against a live deployment", () => {
  let workdir: string;
  let env: NodeJS.ProcessEnv;
  const services: ChildProcess[] = [];
  let client: GatewayClient;

  function cli(...args: string[]): { status: number | null; stdout: string; stderr: string } {
    const run = spawnSync("python3", ["-m", "vpe.cli", ...args], {
      env,
      cwd: workdir,
      encoding: "utf-8",
      timeout: 60000,
    });
    return { status: run.status, stdout: run.stdout ?? "", stderr: run.stderr ?? "" };
  }

  beforeAll(async () => {
    workdir = mkdtempSync(join(tmpdir(), "console-e2e-"));
    const [gwPort, busPort, launcherPort, storePort] = await Promise.all([
      freePort(),
      freePort(),
      freePort(),
      freePort(),
    ]);
    env = {
      ...process.env,
      PYTHONPATH: SRC_DIR,
      VPE_GATEWAY_PORT: String(gwPort),
      VPE_BUS_PORT: String(busPort),
      VPE_LAUNCHER_PORT: String(launcherPort),
      VPE_STORE_PORT: String(storePort),
    };
    const registryPath = join(workdir, "registry.json");
    writeFileSync(registryPath, JSON.stringify(REGISTRY));

    const service = (...args: string[]) => {
      const child = spawn("python3", ["-m", "vpe.cli", ...args], {
        env,
        cwd: workdir,
        stdio: "ignore",
      });
      services.push(child);
    };
    service("bus", "start", "--data-dir", join(workdir, "bus"));
    service("store", "start", "--data-dir", join(workdir, "store"));
    service("launcher", "start", "--registry", registryPath, "--run-dir", join(workdir, "modules"));
    service("gateway", "start", "--registry", registryPath);

    client = new GatewayClient(`http://127.0.0.1:${gwPort}`);
    await waitFor(() => client.health(), "gateway", 30000);
    for (const m of MODULES) {
      const run = cli("module", "start", m, "--auto-restart");
      expect(run.status, run.stderr).toBe(0);
    }
    await waitFor(async () => {
      const rows = buildHealthModel(await client.listModules());
      return rows.length === MODULES.length && rows.every((r) => r.up);
    }, "all modules running");
  }, 120000);

  afterAll(() => {
    for (const m of MODULES) {
      cli("module", "stop", m);
    }
    for (const child of services) {
      child.kill("SIGKILL");
    }
    rmSync(workdir, { recursive: true, force: true });
  });

  it("drawn pipeline exports the platform's exact canonical bytes", () => {
    const fixtures = JSON.parse(readFileSync(new URL("./fixtures.json", import.meta.url), "utf-8")) as {
      name: string;
      canonical: string;
    }[];
    const pipelineFixture = fixtures.find((f) => f.name === "pipeline")!;
    expect(exportCanonical(drawPipeline())).toBe(pipelineFixture.canonical);
  });

  it(
    "runs a drawn task to DONE, records a ranked selection, and the export shows it",
    async () => {
      const draft = drawPipeline();
      const canonical = exportCanonical(draft);
      const taskId = await client.submitTask(canonical);
      expect(taskId).toMatch(/^[0-9a-f-]{36}$/);

      let lastModel = buildTaskModel(await client.getTask(taskId));
      await waitFor(async () => {
        lastModel = buildTaskModel(await client.getTask(taskId));
        return lastModel.complete;
      }, "task completion", 60000);
      expect(lastModel.rows.map((r) => r.state)).toEqual(["DONE", "DONE", "DONE", "DONE", "DONE"]);
      expect(lastModel.rows.some((r) => r.highlight)).toBe(false);

      const { results } = await client.getResults(taskId, 4);
      expect(results).toHaveLength(1);
      expect(results[0].datatype).toBe("ReID-Rank");
      const candidates = rankedCandidates(results[0]);
      expect(candidates.length).toBeGreaterThan(0);
      expect(candidates[0].rank).toBe(0);

      const selection = new RankSelection();
      selection.toggle(candidates[0].index);
      const feedbackId = await client.postFeedback(selection.toFeedback(taskId, 4));
      await client.postFeedback(satisfactionFeedback(taskId, 3, 4));

      const exported = cli("feedback", "export", "--kind", "SELECTION");
      expect(exported.status, exported.stderr).toBe(0);
      const records = exported.stdout
        .trim()
        .split("\n")
        .filter((line) => line.length > 0)
        .map((line) => JSON.parse(line) as Record<string, unknown>);
      const mine = records.find((r) => r.feedback_id === feedbackId);
      expect(mine, "submitted selection missing from the export").toBeDefined();
      expect(mine!.task_id).toBe(taskId);
      expect(mine!.node_id).toBe(4);
      expect(mine!.kind).toBe("SELECTION");
      expect(mine!.selected_record_indices).toEqual([0]);

      const satisfaction = cli("feedback", "export", "--kind", "SATISFACTION");
      expect(satisfaction.stdout).toContain(taskId);
    },
    120000,
  );

  it("rejects a drawn cycle at the gateway with CYCLE", async () => {
    const draft = drawPipeline();
    addLink(draft, 4, 0);
    const err = await client.submitTask(exportCanonical(draft)).catch((e) => e);
    expect(err.status).toBe(400);
    expect(err.report.map((r: { code: string }) => r.code)).toContain("CYCLE");
  });

  it("round-trips the submitted graph through the status endpoint", async () => {
    const draft = drawPipeline();
    const taskId = await client.submitTask(exportCanonical(draft));
    const status = await client.getTask(taskId);
    expect(status.nodes.map((n) => n.module_id)).toEqual([...MODULES]);
  });
});

function drawPipeline() {
  const draft = emptyDraft();
  const source = addNode(draft, "Frame-Source");
  setParam(source, "count", "3");
  setParam(source, "seed", "42");
  addNode(draft, "Pedestrian-Detector");
  addNode(draft, "Pedestrian-Tracker");
  addNode(draft, "Attr-Recognizer");
  const ranker = addNode(draft, "ReID-Ranker");
  setParam(ranker, "target", "male|bag");
  addLink(draft, 0, 1);
  addLink(draft, 1, 2);
  addLink(draft, 2, 3);
  addLink(draft, 3, 4);
  return draft;
}
