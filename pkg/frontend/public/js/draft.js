/** Client-side editable graph: what the editor pane mutates. */
export function emptyDraft() {
    return { nodes: [], links: [] };
}
export function nextNodeId(draft) {
    let max = -1;
    for (const n of draft.nodes) {
        if (n.id > max)
            max = n.id;
    }
    return max + 1;
}
export function addNode(draft, module) {
    const node = { id: nextNodeId(draft), module, params: [], extra: "" };
    draft.nodes.push(node);
    return node;
}
/** Drop a node and every link touching it. */
export function removeNode(draft, id) {
    draft.nodes = draft.nodes.filter((n) => n.id !== id);
    draft.links = draft.links.filter((l) => l.from !== id && l.to !== id);
}
export function setParam(node, key, value) {
    for (const row of node.params) {
        if (row[0] === key) {
            row[1] = value;
            return;
        }
    }
    node.params.push([key, value]);
}
export function addLink(draft, from, to) {
    draft.links.push({ from, to });
}
export function removeLink(draft, from, to) {
    draft.links = draft.links.filter((l) => !(l.from === from && l.to === to));
}
/** Load a previously exported graph back into an editable draft. */
export function draftFromJson(graph) {
    return {
        nodes: graph.nodes.map((n) => ({
            id: n.id,
            module: n.module,
            params: n.params.map(([k, v]) => [k, v]),
            extra: n.extra,
        })),
        links: graph.links.map((l) => ({ from: l.from, to: l.to })),
    };
}
