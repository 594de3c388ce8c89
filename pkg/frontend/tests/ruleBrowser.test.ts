import { describe, expect, it } from "vitest";

import { ApiClient } from "../src/api.js";
import { RuleBrowser } from "../src/ruleBrowser.js";
import { FixtureServer } from "./server.js";
import {
  REGRESSORS,
  RULE_1,
  TARGET_NAME,
  fourRulePartition,
  rule1Patients,
} from "./fixtures.js";

function world(server: FixtureServer): ApiClient {
  return new ApiClient("", null, server.fetch);
}

describe("RuleBrowser", () => {
  it("lists rules with server-side member counts", async () => {
    const server = new FixtureServer([RULE_1], rule1Patients(), REGRESSORS, TARGET_NAME);
    const browser = new RuleBrowser();
    await browser.load(world(server));
    expect(browser.groups).toHaveLength(1);
    expect(browser.groups[0].patientCount).toBe(2); // P1 and P2 satisfy the rule
    expect(browser.patients.map((p) => p.id)).toEqual(["P1", "P2", "P3"]);

    const html = browser.render();
    expect(html).toContain("RULE #1");
    expect(html).toContain("EPO_DOSE_per_week_3_visit_before &lt;= 0");
    expect(html).toContain("PRE_Hbc_to_11_2_visit_before &lt;= 0.3");
    expect(html).toContain("SUCROFER_DOSE_prev_visit &lt;= 0");
    expect(html).toContain("-0.3306171 + 0.2261024 * EPO_DOSE");
    expect(html).toContain("2 patients");
  });

  it("shows the empty state when the model has no rules", async () => {
    const server = new FixtureServer([], [], REGRESSORS, TARGET_NAME);
    const browser = new RuleBrowser();
    await browser.load(world(server));
    expect(browser.render()).toBe(
      `<p class="empty">No rules in the current model. Run an iteration first.</p>`,
    );
  });

  it("partition counts add up to the cohort size", async () => {
    const { rules, patients } = fourRulePartition();
    const server = new FixtureServer(rules, patients, REGRESSORS, TARGET_NAME);
    const browser = new RuleBrowser();
    await browser.load(world(server));
    expect(browser.groups).toHaveLength(4);
    const counts = browser.groups.map((g) => g.patientCount);
    expect(counts.every((c) => c > 0)).toBe(true);
    expect(counts.reduce((a, b) => a + b, 0)).toBe(patients.length);
  });

  it("selecting a rule filters the patient list; null restores it", async () => {
    const server = new FixtureServer([RULE_1], rule1Patients(), REGRESSORS, TARGET_NAME);
    const browser = new RuleBrowser();
    const client = world(server);
    await browser.load(client);

    await browser.select(client, 1);
    expect(browser.selected).toBe(1);
    expect(browser.patients.map((p) => p.id)).toEqual(["P1", "P2"]);
    expect(browser.render()).toContain(`class="rule selected"`);

    await browser.select(client, null);
    expect(browser.selected).toBeNull();
    expect(browser.patients.map((p) => p.id)).toEqual(["P1", "P2", "P3"]);
  });

  it("renders patients with ids and visit counts", async () => {
    const server = new FixtureServer([RULE_1], rule1Patients(), REGRESSORS, TARGET_NAME);
    const browser = new RuleBrowser();
    await browser.load(world(server));
    const html = browser.renderPatients();
    expect(html).toContain(`data-patient-id="P1"`);
    expect(html).toContain("4 visits");
    expect(html).toContain(`data-patient-id="P3"`);
    expect(html).toContain("5 visits");
  });
});
