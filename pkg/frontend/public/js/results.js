/** Result rendering models and the feedback widgets.
 *
 * The widget offered follows the datatype: ranked candidates get selection,
 * everything else gets a satisfaction score and a revision box.
 */
import { base64ToUtf8, utf8ToBase64 } from "./base64.js";
export function renderModeFor(datatype) {
    return datatype === "ReID-Rank" ? "rank" : "table";
}
/** Record bytes are JSON documents for every built-in datatype. */
export function decodeRecords(result) {
    return result.records.map((b64) => JSON.parse(base64ToUtf8(b64)));
}
export function rankedCandidates(result) {
    return decodeRecords(result).map((rec, index) => {
        const row = rec;
        return { index, rank: row.rank, objectId: row.object_id, score: row.score };
    });
}
/** Click-to-toggle selection state over a ranked list. */
export class RankSelection {
    constructor() {
        this.chosen = new Set();
    }
    toggle(index) {
        if (this.chosen.has(index)) {
            this.chosen.delete(index);
        }
        else {
            this.chosen.add(index);
        }
    }
    selected() {
        return [...this.chosen].sort((a, b) => a - b);
    }
    /** Submitting nothing is a no-op the UI blocks with a hint. */
    canSubmit() {
        return this.chosen.size > 0;
    }
    toFeedback(taskId, nodeId) {
        if (!this.canSubmit()) {
            throw new Error("select at least one candidate first");
        }
        return {
            task_id: taskId,
            node_id: nodeId,
            kind: "SELECTION",
            selected_record_indices: this.selected(),
        };
    }
}
export function satisfactionFeedback(taskId, nodeId, score) {
    if (!Number.isInteger(score) || score < 1 || score > 5) {
        throw new Error("satisfaction is a whole number from 1 to 5");
    }
    return { task_id: taskId, node_id: nodeId, kind: "SATISFACTION", satisfaction: score };
}
export function revisionFeedback(taskId, nodeId, replacement) {
    if (replacement.length === 0) {
        throw new Error("revision text is empty");
    }
    return {
        task_id: taskId,
        node_id: nodeId,
        kind: "REVISION",
        revision_b64: utf8ToBase64(replacement),
    };
}
