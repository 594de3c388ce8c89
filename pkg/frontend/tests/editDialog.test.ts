import { describe, expect, it } from "vitest";

import { ApiClient, ApiError } from "../src/api.js";
import { EditDialog } from "../src/editDialog.js";
import { FixtureServer } from "./server.js";
import type { FixturePatient } from "./fixtures.js";
import { REGRESSORS, RULE_1, RULE_28, TARGET_NAME } from "./fixtures.js";

const CLOCK = () => "2026-08-14T10:30:00+00:00";

/** Two rule-28 members, one hugging the 0.125 threshold so a tightening
 * edit drops it. */
function rule28Patients(): FixturePatient[] {
  const base = {
    Delta_EPO_DOSE_2_visit_before: 1.0,
    Delta_Hb_1_visit_before: 0.0,
    Delta_Hb_2_visit_before: 0.5,
    SUCROFER_DOSE_prev_visit: -1.0,
    EPO_DOSE: 1.0,
  };
  const visits = (n: number) =>
    Array.from({ length: n }, (_, k) => ({
      care_date: `2026-04-${String(k + 1).padStart(2, "0")}`,
      target: 0.0,
    }));
  return [
    { id: "A", features: { ...base, EPO_DOSE_per_week_3_visit_before: 0.15 }, visits: visits(2) },
    { id: "B", features: { ...base, EPO_DOSE_per_week_3_visit_before: 0.5 }, visits: visits(2) },
  ];
}

function world(): { server: FixtureServer; client: ApiClient } {
  const server = new FixtureServer(
    [RULE_1, RULE_28],
    rule28Patients(),
    REGRESSORS,
    TARGET_NAME,
  );
  return { server, client: new ApiClient("", null, server.fetch) };
}

/** The reference edit sequence turning rule 28 into rule 21. */
function applyReferenceEdits(dialog: EditDialog): void {
  dialog.modifyThreshold("EPO_DOSE_per_week_3_visit_before", 0.2);
  dialog.removeCondition("Delta_Hb_2_visit_before", "gt");
  dialog.addCondition({ feature: "SUCROFER_DOSE_prev_visit", op: "le", threshold: 0.0 });
  dialog.setModel({ beta0: -0.6056191, beta1: [0.2510769] });
}

describe("EditDialog", () => {
  it("emits the canonical edit JSON", () => {
    const dialog = new EditDialog("dr-a", CLOCK);
    dialog.open(RULE_28);
    applyReferenceEdits(dialog);
    expect(dialog.editJson()).toEqual({
      rule_id: 28,
      operations: [
        { kind: "modify-threshold", feature: "EPO_DOSE_per_week_3_visit_before", threshold: 0.2 },
        { kind: "remove-condition", feature: "Delta_Hb_2_visit_before", op: "gt" },
        {
          kind: "add-condition",
          condition: { feature: "SUCROFER_DOSE_prev_visit", op: "le", threshold: 0.0 },
        },
        { kind: "set-model", model: { beta0: -0.6056191, beta1: [0.2510769] } },
      ],
      author: "dr-a",
      timestamp: "2026-08-14T10:30:00+00:00",
    });
    // a modify without an op selector must not serialize an "op" key
    const wire = JSON.parse(JSON.stringify(dialog.editJson()));
    expect("op" in wire.operations[0]).toBe(false);
    expect("op" in wire.operations[1]).toBe(true);
  });

  it("dry-run preview reflects the edited rule", async () => {
    const { server, client } = world();
    const dialog = new EditDialog("dr-a", CLOCK);
    dialog.open(RULE_28);

    const before = await dialog.refreshPreview(client);
    expect(before.dry_run).toBe(true);
    expect(before.staged).toBe(false);
    expect(before.member_count).toBe(4); // both patients, two visits each

    applyReferenceEdits(dialog);
    const after = await dialog.refreshPreview(client);
    expect(after.member_count).toBe(2); // tightened threshold drops patient A
    expect(after.rule.provenance).toBe("edited");
    expect(after.text).toContain("EPO_DOSE_per_week_3_visit_before > 0.2");
    expect(after.text).toContain("SUCROFER_DOSE_prev_visit <= 0");
    expect(after.text).toContain("-0.6056191 + 0.2510769 * EPO_DOSE");
    expect(after.text).not.toContain("Delta_Hb_2_visit_before");
    expect(server.editsStaged).toHaveLength(0); // dry runs never stage

    const pane = dialog.renderPreview();
    expect(pane).toContain("2 member visits");
    expect(pane).toContain("EPO_DOSE_per_week_3_visit_before &gt; 0.2");
  });

  it("closing without operations sends nothing", async () => {
    const { server, client } = world();
    const dialog = new EditDialog("dr-a", CLOCK);
    dialog.open(RULE_28);
    const before = server.requestCount;
    const result = await dialog.stage(client);
    expect(result).toBeNull();
    expect(server.requestCount).toBe(before);
    expect(server.editsStaged).toHaveLength(0);
    expect(dialog.rule).toBeNull();
  });

  it("staging posts the edit and closes the dialog", async () => {
    const { server, client } = world();
    const dialog = new EditDialog("dr-a", CLOCK);
    dialog.open(RULE_28);
    applyReferenceEdits(dialog);
    const staged = await dialog.stage(client);
    expect(staged?.staged).toBe(true);
    expect(staged?.edit_ref).toBe(0);
    expect(staged?.dry_run).toBe(false);
    expect(server.editsStaged).toHaveLength(1);
    expect(server.editsStaged[0].author).toBe("dr-a");
    expect(dialog.rule).toBeNull();
  });

  it("surfaces an unsatisfiable edit as a 422", async () => {
    const { server, client } = world();
    const dialog = new EditDialog("dr-a", CLOCK);
    dialog.open(RULE_1);
    dialog.addCondition({ feature: "z9", op: "le", threshold: 0.0 });
    dialog.addCondition({ feature: "z9", op: "gt", threshold: 0.0 });
    const err = await dialog.stage(client).catch((e) => e);
    expect(err).toBeInstanceOf(ApiError);
    expect(err.status).toBe(422);
    expect(err.kind).toBe("unsatisfiable-rule");
    expect(server.editsStaged).toHaveLength(0);
  });

  it("renders the empty preview placeholder before any dry run", () => {
    const dialog = new EditDialog("dr-a", CLOCK);
    dialog.open(RULE_28);
    expect(dialog.renderPreview()).toBe(`<p class="preview empty">no preview yet</p>`);
  });
});
