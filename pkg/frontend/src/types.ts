/** Wire types shared with the gateway's JSON surface. */

/** One node of the serialized flow graph. */
export interface NodeJson {
  id: number;
  module: string;
  /** Ordered key/value pairs handed to the processor. */
  params: [string, string][];
  /** Opaque per-node bytes, base64. */
  extra: string;
}

export interface LinkJson {
  from: number;
  to: number;
}

export interface GraphJson {
  nodes: NodeJson[];
  links: LinkJson[];
}

/** One entry of a server (or local) validation report. */
export interface ValidationError {
  code: string;
  detail: string;
}

export interface ValidationReport {
  ok: boolean;
  errors: ValidationError[];
}

export type NodeState = "WAITING" | "DONE" | "STALLED";
export type OverallState = "RUNNING" | "COMPLETE" | "STALLED";

export interface TaskStatus {
  task_id: string;
  overall: OverallState;
  nodes: { node_id: number; module_id: string; state: NodeState }[];
  created_at: number;
  last_activity: number;
}

export interface NodeResult {
  node_id: number;
  module_id: string;
  datatype: string;
  created_at: number;
  total_records: number;
  /** Record bytes, base64, windowed by limit/offset. */
  records: string[];
}

export interface TaskResults {
  task_id: string;
  results: NodeResult[];
}

export interface ModuleRow {
  module_id: string;
  processor_id: string;
  input_datatypes: string[];
  running: boolean;
  pid: number | null;
  restarts: number;
}

export type FeedbackKind = "SATISFACTION" | "SELECTION" | "REVISION";

export interface FeedbackRequest {
  task_id: string;
  node_id: number;
  kind: FeedbackKind;
  satisfaction?: number;
  selected_record_indices?: number[];
  revision_b64?: string;
}
