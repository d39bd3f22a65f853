/** Poll loops and the view models for task progress and module health. */

import type { ModuleRow, TaskStatus } from "./types.js";

export interface TaskRow {
  nodeId: number;
  moduleId: string;
  state: string;
  /** Stalled work is called out, not just listed. */
  highlight: boolean;
}

export interface TaskModel {
  taskId: string;
  overall: string;
  complete: boolean;
  rows: TaskRow[];
}

export function buildTaskModel(status: TaskStatus): TaskModel {
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

export interface HealthRow {
  moduleId: string;
  up: boolean;
  label: string;
  restarts: number;
}

export function buildHealthModel(modules: ModuleRow[]): HealthRow[] {
  return modules.map((m) => ({
    moduleId: m.module_id,
    up: m.running,
    label: m.running ? `running pid=${m.pid}` : "down",
    restarts: m.restarts,
  }));
}

/** Repeatedly fetch something; remember the last good value and flag
 * staleness instead of blanking the view when a poll fails. */
export class Poller<T> {
  latest: T | null = null;
  stale = false;
  private timer: ReturnType<typeof setInterval> | null = null;

  constructor(
    private readonly fetchOnce: () => Promise<T>,
    private readonly onChange: (value: T | null, stale: boolean) => void,
    private readonly intervalMs = 1000,
  ) {}

  async tick(): Promise<void> {
    try {
      this.latest = await this.fetchOnce();
      this.stale = false;
    } catch {
      this.stale = true;
    }
    this.onChange(this.latest, this.stale);
  }

  start(): void {
    if (this.timer !== null) return;
    void this.tick();
    this.timer = setInterval(() => void this.tick(), this.intervalMs);
  }

  stop(): void {
    if (this.timer !== null) {
      clearInterval(this.timer);
      this.timer = null;
    }
  }
}
