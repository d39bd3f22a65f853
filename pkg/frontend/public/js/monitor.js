/** Poll loops and the view models for task progress and module health. */
export function buildTaskModel(status) {
    return {
        taskId: status.task_id,
        overall: status.overall,
        complete: status.overall === "COMPLETE",
        rows: status.nodes.map((n) => ({
            nodeId: n.node_id,
            moduleId: n.module_id,
            state: n.state,
            highlight: n.state === "STALLED",
        })),
    };
}
export function buildHealthModel(modules) {
    return modules.map((m) => ({
        moduleId: m.module_id,
        up: m.running,
        label: m.running ? `running pid=${m.pid}` : "down",
        restarts: m.restarts,
    }));
}
/** Repeatedly fetch something; remember the last good value and flag
 * staleness instead of blanking the view when a poll fails. */
export class Poller {
    constructor(fetchOnce, onChange, intervalMs = 1000) {
        this.fetchOnce = fetchOnce;
        this.onChange = onChange;
        this.intervalMs = intervalMs;
        this.latest = null;
        this.stale = false;
        this.timer = null;
    }
    async tick() {
        try {
            this.latest = await this.fetchOnce();
            this.stale = false;
        }
        catch {
            this.stale = true;
        }
        this.onChange(this.latest, this.stale);
    }
    start() {
        if (this.timer !== null)
            return;
        void this.tick();
        this.timer = setInterval(() => void this.tick(), this.intervalMs);
    }
    stop() {
        if (this.timer !== null) {
            clearInterval(this.timer);
            this.timer = null;
        }
    }
}
