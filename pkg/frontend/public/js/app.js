/** Browser entry point: wires the editor, monitor and results panes.
 *
 * All logic that merits testing lives in the imported modules; this file is
 * DOM plumbing only.
 */
import { GatewayClient, GatewayError, loadConfig } from "./api.js";
import { exportCanonical, validateDraft } from "./canonical.js";
import { addLink, addNode, emptyDraft, removeLink, removeNode, setParam } from "./draft.js";
import { glyphDataUri } from "./glyph.js";
import { Poller, buildHealthModel, buildTaskModel } from "./monitor.js";
import { RankSelection, rankedCandidates, decodeRecords, renderModeFor, satisfactionFeedback, revisionFeedback, } from "./results.js";
function el(id) {
    const found = document.getElementById(id);
    if (!found)
        throw new Error(`missing element #${id}`);
    return found;
}
function para(parent, className, text) {
    const p = document.createElement("div");
    p.className = className;
    p.textContent = text;
    parent.appendChild(p);
    return p;
}
async function main() {
    const config = await loadConfig();
    const client = new GatewayClient(config.gateway);
    el("gateway-addr").textContent = config.gateway;
    const draft = emptyDraft();
    let modules = [];
    let watchedTask = null;
    const modulePicker = el("module-picker");
    const nodesDiv = el("draft-nodes");
    const linksDiv = el("draft-links");
    const problemsDiv = el("draft-problems");
    const exportPre = el("draft-export");
    const monitorDiv = el("monitor-task");
    const healthDiv = el("monitor-health");
    const resultsDiv = el("results");
    const banner = el("banner");
    function showError(e) {
        const msg = e instanceof GatewayError
            ? `${e.code}: ${e.detail}${e.report.length ? " — " + e.report.map((r) => r.code).join(", ") : ""}`
            : String(e);
        banner.textContent = msg;
        banner.classList.add("visible");
        setTimeout(() => banner.classList.remove("visible"), 6000);
    }
    function redrawEditor() {
        nodesDiv.replaceChildren();
        for (const node of draft.nodes) {
            const card = document.createElement("div");
            card.className = "node-card";
            card.dataset.nodeId = String(node.id);
            para(card, "node-title", `#${node.id} ${node.module}`);
            const table = document.createElement("div");
            for (const [k, v] of node.params) {
                para(table, "param-row", `${k} = ${v}`);
            }
            card.appendChild(table);
            const paramBtn = document.createElement("button");
            paramBtn.textContent = "set param";
            paramBtn.addEventListener("click", () => {
                const key = prompt("param key?");
                if (!key)
                    return;
                const value = prompt(`value for ${key}?`) ?? "";
                setParam(node, key, value);
                redrawEditor();
            });
            card.appendChild(paramBtn);
            const dropBtn = document.createElement("button");
            dropBtn.textContent = "remove";
            dropBtn.addEventListener("click", () => {
                removeNode(draft, node.id);
                redrawEditor();
            });
            card.appendChild(dropBtn);
            nodesDiv.appendChild(card);
        }
        linksDiv.replaceChildren();
        for (const link of draft.links) {
            const row = para(linksDiv, "link-row", `${link.from} → ${link.to}`);
            const drop = document.createElement("button");
            drop.textContent = "x";
            drop.addEventListener("click", () => {
                removeLink(draft, link.from, link.to);
                redrawEditor();
            });
            row.appendChild(drop);
        }
        const errors = validateDraft(draft, modules.map((m) => m.module_id));
        problemsDiv.replaceChildren();
        for (const err of errors) {
            para(problemsDiv, "problem", `${err.code}: ${err.detail}`);
            if (err.nodeId !== undefined) {
                const card = nodesDiv.querySelector(`[data-node-id="${err.nodeId}"]`);
                card?.classList.add("invalid");
            }
        }
        exportPre.textContent = exportCanonical(draft);
        el("submit-task").disabled = errors.length > 0 || draft.nodes.length === 0;
    }
    el("add-node").addEventListener("click", () => {
        const module = modulePicker.value;
        if (!module)
            return;
        addNode(draft, module);
        redrawEditor();
    });
    el("add-link").addEventListener("click", () => {
        const from = Number(el("link-from").value);
        const to = Number(el("link-to").value);
        addLink(draft, from, to);
        redrawEditor();
    });
    el("submit-task").addEventListener("click", async () => {
        try {
            const taskId = await client.submitTask(exportCanonical(draft));
            watchedTask = taskId;
            el("watched-task").textContent = taskId;
            taskPoller.start();
        }
        catch (e) {
            showError(e);
        }
    });
    const taskPoller = new Poller(async () => (watchedTask ? client.getTask(watchedTask) : Promise.reject(new Error("no task"))), (status, stale) => {
        monitorDiv.replaceChildren();
        monitorDiv.classList.toggle("stale", stale);
        if (!status)
            return;
        const model = buildTaskModel(status);
        para(monitorDiv, "overall", `overall: ${model.overall}${stale ? " (stale)" : ""}`);
        for (const row of model.rows) {
            const line = para(monitorDiv, "node-state", `#${row.nodeId} ${row.moduleId}: ${row.state}`);
            if (row.highlight)
                line.classList.add("stalled");
        }
        if (model.complete)
            void showResults(model.taskId);
    }, 1000);
    const healthPoller = new Poller(() => client.listModules(), (rows, stale) => {
        healthDiv.replaceChildren();
        healthDiv.classList.toggle("stale", stale);
        if (!rows)
            return;
        for (const row of buildHealthModel(rows)) {
            const line = para(healthDiv, "health-row", `${row.moduleId}: ${row.label} restarts=${row.restarts}`);
            if (!row.up)
                line.classList.add("down");
        }
        modules = rows;
        modulePicker.replaceChildren(...rows.map((m) => {
            const option = document.createElement("option");
            option.value = m.module_id;
            option.textContent = m.module_id;
            return option;
        }));
    }, 2000);
    async function showResults(taskId) {
        const { results } = await client.getResults(taskId);
        resultsDiv.replaceChildren();
        for (const result of results) {
            const section = document.createElement("div");
            section.className = "result";
            para(section, "result-title", `#${result.node_id} ${result.module_id} — ${result.datatype}`);
            if (renderModeFor(result.datatype) === "rank") {
                renderRank(section, taskId, result);
            }
            else {
                renderTable(section, taskId, result);
            }
            resultsDiv.appendChild(section);
        }
    }
    function renderRank(section, taskId, result) {
        const selection = new RankSelection();
        const strip = document.createElement("div");
        strip.className = "rank-strip";
        for (const cand of rankedCandidates(result)) {
            const cell = document.createElement("div");
            cell.className = "candidate";
            const img = document.createElement("img");
            img.src = glyphDataUri(cand.objectId);
            img.alt = `candidate ${cand.objectId}`;
            cell.appendChild(img);
            para(cell, "cand-label", `rank ${cand.rank} · score ${cand.score}`);
            cell.addEventListener("click", () => {
                selection.toggle(cand.index);
                cell.classList.toggle("chosen");
            });
            strip.appendChild(cell);
        }
        section.appendChild(strip);
        const submit = document.createElement("button");
        submit.textContent = "submit selection";
        submit.addEventListener("click", async () => {
            if (!selection.canSubmit()) {
                showError(new Error("select at least one candidate first"));
                return;
            }
            try {
                await client.postFeedback(selection.toFeedback(taskId, result.node_id));
                para(section, "confirm", "selection recorded");
            }
            catch (e) {
                showError(e);
            }
        });
        section.appendChild(submit);
    }
    function renderTable(section, taskId, result) {
        for (const rec of decodeRecords(result)) {
            para(section, "record-row", JSON.stringify(rec));
        }
        const score = document.createElement("input");
        score.type = "number";
        score.min = "1";
        score.max = "5";
        score.value = "3";
        section.appendChild(score);
        const rate = document.createElement("button");
        rate.textContent = "rate";
        rate.addEventListener("click", async () => {
            try {
                await client.postFeedback(satisfactionFeedback(taskId, result.node_id, Number(score.value)));
                para(section, "confirm", "satisfaction recorded");
            }
            catch (e) {
                showError(e);
            }
        });
        section.appendChild(rate);
        const revision = document.createElement("textarea");
        revision.placeholder = "corrected result JSON";
        section.appendChild(revision);
        const revise = document.createElement("button");
        revise.textContent = "submit revision";
        revise.addEventListener("click", async () => {
            try {
                await client.postFeedback(revisionFeedback(taskId, result.node_id, revision.value));
                para(section, "confirm", "revision recorded");
            }
            catch (e) {
                showError(e);
            }
        });
        section.appendChild(revise);
    }
    healthPoller.start();
    redrawEditor();
}
void main();
