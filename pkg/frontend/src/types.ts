/** Wire types for the /api/v1 JSON bodies. Field names mirror the server
 * serializations exactly; no client-side DTO vocabulary. */

export type Op = "le" | "gt";

export interface Condition {
  feature: string;
  op: Op;
  threshold: number;
}

export interface RuleModel {
  beta0: number;
  beta1: number[];
}

export interface Rule {
  id: number;
  conditions: Condition[];
  model: RuleModel;
  support: number;
  provenance: string;
}

/** Every successful response body carries the serving model version. */
export interface Versioned {
  model_version: number;
}

export interface RuleSetDoc extends Versioned {
  version: number;
  regressors: string[];
  rules: Rule[];
}

export interface RuleDetail extends Versioned {
  rule: Rule;
  text: string;
}

export interface PatientSummary {
  id: string;
  n_visits: number;
}

export interface PatientList extends Versioned {
  rule: number | null;
  patients: PatientSummary[];
}

export interface TrajectoryVisit {
  care_date: string;
  features: Record<string, number | null>;
  target: number | null;
  prediction: number;
}

export interface Trajectory extends Versioned {
  patient_id: string;
  target_name: string;
  visits: TrajectoryVisit[];
}

export interface DoseResponsePoint {
  dose: number;
  delta_hb: number;
  projected_hb: number;
}

export interface DoseResponse extends Versioned {
  patient_id: string;
  current_hb: number;
  band: [number, number];
  points: DoseResponsePoint[];
}

export type AdviceKind = "dose-suggestion" | "target-correction" | "rule-edit-ref";

export interface AdviceRecord {
  patient_id: string;
  care_date: string;
  x_snapshot: Record<string, number | null>;
  y_hat: number;
  rule_id: number;
  advice: number | null;
  advice_kind: AdviceKind;
  rater: string;
  timestamp: string;
  edit_ref?: number | null;
}

export interface AnnotationCreated extends Versioned {
  index: number;
  record: AdviceRecord;
}

export interface AnnotationList extends Versioned {
  records: AdviceRecord[];
}

export interface GateResult {
  passed: boolean;
  alpha: number;
  ci: [number, number];
  threshold: number;
}

/** alpha is null (with a reason) until some unit has two raters. */
export interface Agreement extends Versioned {
  alpha: number | null;
  ci: [number, number] | null;
  gate: GateResult | null;
  reason?: string;
  raters: string[];
  units?: string[];
  n_raters?: number;
  n_records: number;
}

export type EditOperation =
  | { kind: "modify-threshold"; feature: string; threshold: number; op?: Op }
  | { kind: "remove-condition"; feature: string; op: Op }
  | { kind: "add-condition"; condition: Condition }
  | { kind: "set-model"; model: RuleModel };

export interface RuleEditDoc {
  rule_id: number;
  operations: EditOperation[];
  author: string;
  timestamp: string;
}

export interface EditPreview extends Versioned {
  rule: Rule;
  text: string;
  satisfiable: boolean;
  member_count: number;
  sampled_points: Record<string, number | null>[];
  dry_run: boolean;
  staged: boolean;
  edit_ref?: number;
}

export interface EvalMetrics {
  mae: number;
  rmse: number;
  n: number;
  split: string;
}

export interface VersionMetrics {
  version: number;
  train: EvalMetrics | null;
  test: EvalMetrics | null;
  advice_loss: number | null;
  alpha: number | null;
  gate_passed: boolean;
  n_records: number;
  n_edits: number;
  flags: string[];
}

export interface IterateResult extends Versioned {
  rejected: boolean;
  rejection?: string;
  metrics?: VersionMetrics;
}

export interface MetricsHistory extends Versioned {
  history: VersionMetrics[];
}

export interface VersionsDoc extends Versioned {
  versions: number[];
  snapshots: number[];
  rejections: string[];
}
