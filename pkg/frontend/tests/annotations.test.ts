import { describe, expect, it } from "vitest";

import { ApiClient } from "../src/api.js";
import { AnnotationPanel, type AnnotationDraft } from "../src/annotations.js";
import { FixtureServer } from "./server.js";
import { REGRESSORS, RULE_1, TARGET_NAME, rule1Patients } from "./fixtures.js";

function world(): { server: FixtureServer; client: ApiClient } {
  const server = new FixtureServer([RULE_1], rule1Patients(), REGRESSORS, TARGET_NAME);
  return { server, client: new ApiClient("", null, server.fetch) };
}

const CLOCK = () => "2026-08-14T09:00:00+00:00";

function draft(overrides: Partial<AnnotationDraft> = {}): AnnotationDraft {
  return {
    patientId: "P1",
    careDate: "2026-01-01",
    xSnapshot: { EPO_DOSE: 2.0 },
    yHat: 0.12,
    ruleId: 1,
    advice: 0.4,
    kind: "target-correction",
    rater: "alice",
    ...overrides,
  };
}

describe("AnnotationPanel", () => {
  it("saves a valid annotation and shows the server echo", async () => {
    const { server, client } = world();
    const panel = new AnnotationPanel(undefined, CLOCK);
    const entry = await panel.submit(client, draft());
    expect(entry.status).toBe("saved");
    expect(entry.index).toBe(0);
    expect(entry.record.edit_ref).toBeNull(); // server echo is authoritative
    expect(server.annotations).toHaveLength(1);

    const listing = await client.annotations();
    expect(listing.records).toEqual([entry.record]);
    expect(panel.render()).toContain("saved #0");
  });

  it("loadMine equals the server's rater filter", async () => {
    const { client } = world();
    const panel = new AnnotationPanel(undefined, CLOCK);
    await panel.submit(client, draft({ rater: "alice" }));
    await panel.submit(client, draft({ rater: "bob", advice: 0.5 }));
    const mine = await panel.loadMine(client, "alice");
    expect(mine).toHaveLength(1);
    expect(mine[0].rater).toBe("alice");
    const all = await client.annotations();
    expect(all.records).toHaveLength(2);
  });

  it("feeds the agreement endpoint", async () => {
    const { client } = world();
    const panel = new AnnotationPanel(undefined, CLOCK);
    await panel.submit(client, draft({ rater: "alice" }));

    const single = await client.agreement();
    expect(single.alpha).toBeNull();
    expect(single.reason).toBeTruthy();
    expect(single.raters).toEqual(["alice"]);
    expect(single.n_records).toBe(1);

    // second rater on the same (patient, date, kind) unit makes it pairable
    await panel.submit(client, draft({ rater: "bob", advice: 0.41 }));
    const paired = await client.agreement();
    expect(paired.alpha).not.toBeNull();
    expect(paired.gate).not.toBeNull();
    expect(paired.units).toContain("P1|2026-01-01|target-correction");
    expect(paired.raters).toEqual(["alice", "bob"]);
    expect(paired.n_records).toBe(2);
  });

  it("rejects an out-of-bounds dose suggestion without a network call", async () => {
    const { server, client } = world();
    const panel = new AnnotationPanel({ min: 0, max: 8 }, CLOCK);
    const before = server.requestCount;
    const entry = await panel.submit(client, draft({ kind: "dose-suggestion", advice: 12 }));
    expect(entry.status).toBe("failed");
    expect(entry.error).toBe("dose must be between 0 and 8");
    expect(server.requestCount).toBe(before);
    expect(panel.entries).toHaveLength(0); // invalid drafts never join the list
  });

  it("requires a rater id", async () => {
    const { client } = world();
    const panel = new AnnotationPanel(undefined, CLOCK);
    const entry = await panel.submit(client, draft({ rater: "  " }));
    expect(entry.status).toBe("failed");
    expect(entry.error).toBe("rater id is required");
  });

  it("queues on 409 and retries after the iterate finishes", async () => {
    const { server, client } = world();
    const panel = new AnnotationPanel(undefined, CLOCK);
    server.blockWrites = true;
    const entry = await panel.submit(client, draft());
    expect(entry.status).toBe("queued");
    expect(entry.error).toBe("an iterate is already running");
    expect(panel.queued).toHaveLength(1);
    expect(server.annotations).toHaveLength(0);

    server.blockWrites = false;
    await panel.retry(client);
    expect(entry.status).toBe("saved");
    expect(entry.index).toBe(0);
    expect(panel.queued).toHaveLength(0);
    expect(server.annotations).toHaveLength(1);
  });

  it("queues when the server is unreachable", async () => {
    const { server, client } = world();
    const panel = new AnnotationPanel(undefined, CLOCK);
    server.offline = true;
    const entry = await panel.submit(client, draft());
    expect(entry.status).toBe("queued");
    expect(entry.error).toBe("server unreachable");
    expect(panel.render()).toContain("queued (server unreachable)");

    server.offline = false;
    await panel.retry(client);
    expect(entry.status).toBe("saved");
  });
});
