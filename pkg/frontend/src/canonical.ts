/** Canonical graph serialization and the client-side validation mirror.
 *
 * The gateway re-validates everything; this module exists so the editor can
 * block bad submits instantly and so the exported JSON is byte-for-byte the
 * canonical form the platform uses (nodes sorted by id, links by endpoint
 * pair, compact separators, raw UTF-8).
 */

import type { GraphDraft } from "./draft.js";
import type { GraphJson } from "./types.js";

const TOKEN_RE = /^[A-Za-z][A-Za-z0-9-]*$/;

export function isToken(s: string): boolean {
  return TOKEN_RE.test(s);
}

/** A validation finding, anchored to the element the editor should mark. */
export interface DraftError {
  code: string;
  detail: string;
  nodeId?: number;
  link?: [number, number];
}

export function canonicalGraphJson(draft: GraphDraft): GraphJson {
  const nodes = [...draft.nodes]
    .sort((a, b) => a.id - b.id)
    .map((n) => ({
      id: n.id,
      module: n.module,
      params: n.params.map(([k, v]) => [k, v] as [string, string]),
      extra: n.extra,
    }));
  const links = [...draft.links]
    .sort((a, b) => (a.from - b.from) || (a.to - b.to))
    .map((l) => ({ from: l.from, to: l.to }));
  return { nodes, links };
}

/** The exact text POSTed as the task's graph. Key order is fixed by
 * construction; JSON.stringify adds no whitespace and leaves non-ASCII raw,
 * matching the platform's canonical encoding byte for byte. */
export function exportCanonical(draft: GraphDraft): string {
  return JSON.stringify(canonicalGraphJson(draft));
}

/** Mirror of the server's structural checks, same codes, plus the registry
 * check when the module list is known. Order of findings is render order. */
export function validateDraft(draft: GraphDraft, knownModules: string[] = []): DraftError[] {
  const errors: DraftError[] = [];
  if (draft.nodes.length === 0) {
    errors.push({ code: "EMPTY", detail: "graph has no nodes" });
    return errors;
  }

  const seen = new Set<number>();
  for (const n of draft.nodes) {
    if (!Number.isInteger(n.id) || n.id < 0) {
      errors.push({ code: "BAD_NODE_ID", detail: `node id ${n.id} is not a non-negative integer` });
      continue;
    }
    if (seen.has(n.id)) {
      errors.push({ code: "DUP_NODE", detail: `node id ${n.id} appears more than once`, nodeId: n.id });
    }
    seen.add(n.id);
    if (!isToken(n.module)) {
      errors.push({ code: "BAD_TOKEN", detail: `node ${n.id}: module ${JSON.stringify(n.module)}`, nodeId: n.id });
    }
  }

  const linkCounts = new Map<string, { from: number; to: number; count: number }>();
  const usable: [number, number][] = [];
  for (const l of draft.links) {
    const key = `${l.from}->${l.to}`;
    const entry = linkCounts.get(key) ?? { from: l.from, to: l.to, count: 0 };
    entry.count += 1;
    linkCounts.set(key, entry);
    const missing = [l.from, l.to].filter((e) => !seen.has(e));
    if (missing.length > 0) {
      errors.push({
        code: "DANGLING",
        detail: `link (${l.from}, ${l.to}) references missing node(s) ${missing.join(", ")}`,
        link: [l.from, l.to],
      });
      continue;
    }
    usable.push([l.from, l.to]);
  }
  const dup = [...linkCounts.values()]
    .filter((e) => e.count > 1)
    .sort((a, b) => (a.from - b.from) || (a.to - b.to));
  for (const e of dup) {
    errors.push({
      code: "DUP_LINK",
      detail: `link (${e.from}, ${e.to}) appears ${e.count} times`,
      link: [e.from, e.to],
    });
  }

  if (hasCycle(seen, usable)) {
    errors.push({ code: "CYCLE", detail: "graph contains a cycle" });
  }

  if (knownModules.length > 0) {
    const known = new Set(knownModules);
    for (const n of draft.nodes) {
      if (Number.isInteger(n.id) && n.id >= 0 && !known.has(n.module)) {
        errors.push({
          code: "UNKNOWN_MODULE",
          detail: `node ${n.id}: module ${JSON.stringify(n.module)} is not registered`,
          nodeId: n.id,
        });
      }
    }
  }
  return errors;
}

/** Kahn's algorithm; true when some node never becomes ready. */
function hasCycle(nodeIds: Set<number>, links: [number, number][]): boolean {
  const out = new Map<number, number[]>();
  const indeg = new Map<number, number>();
  for (const n of nodeIds) {
    out.set(n, []);
    indeg.set(n, 0);
  }
  for (const [f, t] of links) {
    out.get(f)!.push(t);
    indeg.set(t, indeg.get(t)! + 1);
  }
  const ready: number[] = [];
  for (const [n, d] of indeg) {
    if (d === 0) ready.push(n);
  }
  let done = 0;
  while (ready.length > 0) {
    const n = ready.pop()!;
    done += 1;
    for (const m of out.get(n)!) {
      const d = indeg.get(m)! - 1;
      indeg.set(m, d);
      if (d === 0) ready.push(m);
    }
  }
  return done !== nodeIds.size;
}
