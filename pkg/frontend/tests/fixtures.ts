/** Canonical fixture data: the published three-condition rule with its
 * dose-response line, a wide rule for the edit-sequence test, and a
 * 4-rule partition for the count property. */

import type { Condition, Rule } from "../src/types.js";

export const RULE_1: Rule = {
  id: 1,
  conditions: [
    { feature: "EPO_DOSE_per_week_3_visit_before", op: "le", threshold: 0.0 },
    { feature: "PRE_Hbc_to_11_2_visit_before", op: "le", threshold: 0.3 },
    { feature: "SUCROFER_DOSE_prev_visit", op: "le", threshold: 0.0 },
  ],
  model: { beta0: -0.3306171, beta1: [0.2261024] },
  support: 412,
  provenance: "learned",
};

export const RULE_28: Rule = {
  id: 28,
  conditions: [
    { feature: "EPO_DOSE_per_week_3_visit_before", op: "gt", threshold: 0.125 },
    { feature: "Delta_EPO_DOSE_2_visit_before", op: "gt", threshold: 0.0 },
    { feature: "Delta_Hb_1_visit_before", op: "le", threshold: 1.6 },
    { feature: "Delta_Hb_2_visit_before", op: "gt", threshold: -0.1 },
  ],
  model: { beta0: -0.4572429, beta1: [0.2532219] },
  support: 133,
  provenance: "learned",
};

export const REGRESSORS = ["EPO_DOSE"];
export const TARGET_NAME = "Delta_Hb";

export interface FixturePatient {
  id: string;
  /** constant per patient, so rule membership partitions patients */
  features: Record<string, number>;
  visits: { care_date: string; target: number | null }[];
}

/** Patients under RULE_1 (all three "le" conditions hold) and outside it. */
export function rule1Patients(): FixturePatient[] {
  const inRule = (i: number): Record<string, number> => ({
    EPO_DOSE_per_week_3_visit_before: -0.5 + 0.1 * i,
    PRE_Hbc_to_11_2_visit_before: 0.1,
    SUCROFER_DOSE_prev_visit: -1.0,
    EPO_DOSE: 2.0,
  });
  const outRule = (i: number): Record<string, number> => ({
    EPO_DOSE_per_week_3_visit_before: 1.0 + 0.25 * i,
    PRE_Hbc_to_11_2_visit_before: 0.8,
    SUCROFER_DOSE_prev_visit: 1.0,
    EPO_DOSE: 4.0,
  });
  const visits = (n: number) =>
    Array.from({ length: n }, (_, k) => ({
      care_date: `2026-01-${String(k + 1).padStart(2, "0")}`,
      target: 0.1 * k,
    }));
  return [
    { id: "P1", features: inRule(0), visits: visits(4) },
    { id: "P2", features: inRule(1), visits: visits(3) },
    { id: "P3", features: outRule(0), visits: visits(5) },
  ];
}

/** Four rules splitting z1 into quarters: memberships partition exactly. */
export function fourRulePartition(): { rules: Rule[]; patients: FixturePatient[] } {
  const cut = (lo: number | null, hi: number | null): Condition[] => {
    const out: Condition[] = [];
    if (lo !== null) out.push({ feature: "z1", op: "gt", threshold: lo });
    if (hi !== null) out.push({ feature: "z1", op: "le", threshold: hi });
    return out;
  };
  const rules: Rule[] = [
    { id: 1, conditions: cut(null, -0.5), model: { beta0: 0.1, beta1: [0.2] }, support: 0, provenance: "learned" },
    { id: 2, conditions: cut(-0.5, 0.0), model: { beta0: 0.2, beta1: [0.3] }, support: 0, provenance: "learned" },
    { id: 3, conditions: cut(0.0, 0.5), model: { beta0: 0.3, beta1: [0.4] }, support: 0, provenance: "learned" },
    { id: 4, conditions: cut(0.5, null), model: { beta0: 0.4, beta1: [0.5] }, support: 0, provenance: "learned" },
  ];
  const patients: FixturePatient[] = Array.from({ length: 12 }, (_, i) => ({
    id: `Q${i}`,
    features: { z1: -1.1 + 0.2 * i, EPO_DOSE: 1.0 },
    visits: [{ care_date: "2026-02-01", target: 0.0 }],
  }));
  return { rules, patients };
}
