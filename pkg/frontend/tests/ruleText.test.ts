import { describe, expect, it } from "vitest";

import { conditionToText, parseRuleText, ruleToText } from "../src/ruleText.js";
import type { Rule } from "../src/types.js";
import { REGRESSORS, RULE_1, RULE_28, TARGET_NAME } from "./fixtures.js";

// The edited rule produced by the reference edit sequence on RULE_28.
const RULE_21: Rule = {
  id: 21,
  conditions: [
    { feature: "EPO_DOSE_per_week_3_visit_before", op: "gt", threshold: 0.2 },
    { feature: "Delta_EPO_DOSE_2_visit_before", op: "gt", threshold: 0.0 },
    { feature: "Delta_Hb_1_visit_before", op: "le", threshold: 1.6 },
    { feature: "SUCROFER_DOSE_prev_visit", op: "le", threshold: 0.0 },
  ],
  model: { beta0: -0.6056191, beta1: [0.2510769] },
  support: 133,
  provenance: "edited",
};

describe("conditionToText", () => {
  it("renders le and gt comparators", () => {
    expect(conditionToText({ feature: "z1", op: "le", threshold: 0.25 })).toBe("z1 <= 0.25");
    expect(conditionToText({ feature: "z1", op: "gt", threshold: -1.5 })).toBe("z1 > -1.5");
  });
});

describe("ruleToText", () => {
  it("renders the edited rule verbatim", () => {
    expect(ruleToText(RULE_21, REGRESSORS, TARGET_NAME)).toBe(
      "RULE #21: IF EPO_DOSE_per_week_3_visit_before > 0.2" +
        " AND Delta_EPO_DOSE_2_visit_before > 0" +
        " AND Delta_Hb_1_visit_before <= 1.6" +
        " AND SUCROFER_DOSE_prev_visit <= 0" +
        " THEN Delta_Hb = -0.6056191 + 0.2510769 * EPO_DOSE",
    );
  });

  it("renders the three-condition rule verbatim", () => {
    expect(ruleToText(RULE_1, REGRESSORS, TARGET_NAME)).toBe(
      "RULE #1: IF EPO_DOSE_per_week_3_visit_before <= 0" +
        " AND PRE_Hbc_to_11_2_visit_before <= 0.3" +
        " AND SUCROFER_DOSE_prev_visit <= 0" +
        " THEN Delta_Hb = -0.3306171 + 0.2261024 * EPO_DOSE",
    );
  });

  it("renders an unconditional rule as IF TRUE", () => {
    const root: Rule = {
      id: 0,
      conditions: [],
      model: { beta0: 0.5, beta1: [1.25] },
      support: 10,
      provenance: "learned",
    };
    expect(ruleToText(root, REGRESSORS, TARGET_NAME)).toBe(
      "RULE #0: IF TRUE THEN Delta_Hb = 0.5 + 1.25 * EPO_DOSE",
    );
  });
});

describe("parseRuleText round trip", () => {
  const cases: [string, Rule, string[]][] = [
    ["rule 1", RULE_1, REGRESSORS],
    ["rule 28", RULE_28, REGRESSORS],
    ["rule 21", RULE_21, REGRESSORS],
    [
      "multi-regressor",
      {
        id: 7,
        conditions: [{ feature: "age", op: "gt", threshold: 65 }],
        model: { beta0: -0.125, beta1: [0.5, -2.75] },
        support: 9,
        provenance: "learned",
      },
      ["EPO_DOSE", "IRON_DOSE"],
    ],
    [
      "unconditional",
      { id: 3, conditions: [], model: { beta0: 1e-7, beta1: [0.1] }, support: 1, provenance: "learned" },
      REGRESSORS,
    ],
  ];

  for (const [label, rule, regressors] of cases) {
    it(`recovers conditions and model for ${label}`, () => {
      const parsed = parseRuleText(ruleToText(rule, regressors, TARGET_NAME));
      expect(parsed.id).toBe(rule.id);
      expect(parsed.conditions).toEqual(rule.conditions);
      expect(parsed.model).toEqual(rule.model);
      expect(parsed.target).toBe(TARGET_NAME);
      expect(parsed.regressors).toEqual(regressors);
    });
  }

  it("rejects text that is not a rule", () => {
    expect(() => parseRuleText("nonsense")).toThrow(/unparseable rule text/);
    expect(() => parseRuleText("RULE #1: IF z1 >= 3 THEN y = 0")).toThrow(
      /unparseable condition/,
    );
    expect(() => parseRuleText("RULE #1: IF TRUE THEN y = b * x")).toThrow(
      /unparseable intercept/,
    );
  });
});
