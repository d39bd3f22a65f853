/** Client-side editable graph: what the editor pane mutates. */

import type { GraphJson } from "./types.js";

export interface DraftNode {
  id: number;
  /** Module picked from the deployment's registry. */
  module: string;
  /** Ordered rows of the params table. */
  params: [string, string][];
  /** Uploaded extra data, base64 ("" when absent). */
  extra: string;
}

export interface DraftLink {
  from: number;
  to: number;
}

export interface GraphDraft {
  nodes: DraftNode[];
  links: DraftLink[];
}

export function emptyDraft(): GraphDraft {
  return { nodes: [], links: [] };
}

export function nextNodeId(draft: GraphDraft): number {
  let max = -1;
  for (const n of draft.nodes) {
    if (n.id > max) max = n.id;
  }
  return max + 1;
}

export function addNode(draft: GraphDraft, module: string): DraftNode {
  const node: DraftNode = { id: nextNodeId(draft), module, params: [], extra: "" };
  draft.nodes.push(node);
  return node;
}

/** Drop a node and every link touching it. */
export function removeNode(draft: GraphDraft, id: number): void {
  draft.nodes = draft.nodes.filter((n) => n.id !== id);
  draft.links = draft.links.filter((l) => l.from !== id && l.to !== id);
}

export function setParam(node: DraftNode, key: string, value: string): void {
  for (const row of node.params) {
    if (row[0] === key) {
      row[1] = value;
      return;
    }
  }
  node.params.push([key, value]);
}

export function addLink(draft: GraphDraft, from: number, to: number): void {
  draft.links.push({ from, to });
}

export function removeLink(draft: GraphDraft, from: number, to: number): void {
  draft.links = draft.links.filter((l) => !(l.from === from && l.to === to));
}

/** Load a previously exported graph back into an editable draft. */
export function draftFromJson(graph: GraphJson): GraphDraft {
  return {
    nodes: graph.nodes.map((n) => ({
      id: n.id,
      module: n.module,
      params: n.params.map(([k, v]) => [k, v] as [string, string]),
      extra: n.extra,
    })),
    links: graph.links.map((l) => ({ from: l.from, to: l.to })),
  };
}
