/** Annotation capture: validate locally, post optimistically, reconcile
 * with the server's 201, and queue-and-retry when an iterate holds the
 * loop (409). Failed submissions stay visible rather than vanishing. */

import { ApiClient, ApiError, OfflineError } from "./api.js";
import type { AdviceKind, AdviceRecord } from "./types.js";

export interface DoseBounds {
  min: number;
  max: number;
}

export interface AnnotationDraft {
  patientId: string;
  careDate: string;
  xSnapshot: Record<string, number | null>;
  yHat: number;
  ruleId: number;
  advice: number;
  kind: AdviceKind;
  rater: string;
}

export type EntryStatus = "pending" | "saved" | "queued" | "failed";

export interface AnnotationEntry {
  record: AdviceRecord;
  status: EntryStatus;
  index?: number;
  error?: string;
}

function toRecord(draft: AnnotationDraft, timestamp: string): AdviceRecord {
  return {
    patient_id: draft.patientId,
    care_date: draft.careDate,
    x_snapshot: draft.xSnapshot,
    y_hat: draft.yHat,
    rule_id: draft.ruleId,
    advice: draft.advice,
    advice_kind: draft.kind,
    rater: draft.rater,
    timestamp,
  };
}

export class AnnotationPanel {
  entries: AnnotationEntry[] = [];

  constructor(
    readonly bounds: DoseBounds = { min: 0, max: 8 },
    private readonly now: () => string = () => new Date().toISOString(),
  ) {}

  /** null means the draft is sendable; otherwise the inline message. */
  validate(draft: AnnotationDraft): string | null {
    if (!draft.rater.trim()) return "rater id is required";
    if (!Number.isFinite(draft.advice)) return "advice value is required";
    if (draft.kind === "dose-suggestion") {
      if (draft.advice < this.bounds.min || draft.advice > this.bounds.max) {
        return `dose must be between ${this.bounds.min} and ${this.bounds.max}`;
      }
    }
    return null;
  }

  /** Optimistic submit: invalid drafts never reach the network. Returns
   * the entry that now represents the draft in the list. */
  async submit(client: ApiClient, draft: AnnotationDraft): Promise<AnnotationEntry> {
    const error = this.validate(draft);
    if (error !== null) {
      return { record: toRecord(draft, this.now()), status: "failed", error };
    }
    const entry: AnnotationEntry = { record: toRecord(draft, this.now()), status: "pending" };
    this.entries.push(entry);
    await this.deliver(client, entry);
    return entry;
  }

  private async deliver(client: ApiClient, entry: AnnotationEntry): Promise<void> {
    try {
      const created = await client.submitAnnotation(entry.record);
      entry.status = "saved";
      entry.index = created.index;
      entry.record = created.record; // the server echo is authoritative
    } catch (err) {
      if (err instanceof ApiError && err.status === 409) {
        entry.status = "queued"; // iterate in flight: retry later
        entry.error = err.detail;
      } else if (err instanceof OfflineError) {
        entry.status = "queued";
        entry.error = "server unreachable";
      } else {
        entry.status = "failed";
        entry.error = err instanceof ApiError ? err.detail : String(err);
      }
    }
  }

  get queued(): AnnotationEntry[] {
    return this.entries.filter((e) => e.status === "queued");
  }

  /** Re-deliver everything the last iterate blocked. */
  async retry(client: ApiClient): Promise<void> {
    for (const entry of this.queued) {
      entry.status = "pending";
      await this.deliver(client, entry);
    }
  }

  /** The rater's saved list, straight from the server: what the rater
   * sees must equal GET /api/v1/annotations?rater=... */
  async loadMine(client: ApiClient, rater: string): Promise<AdviceRecord[]> {
    const listing = await client.annotations(rater);
    return listing.records;
  }

  render(): string {
    const items = this.entries
      .map((e) => {
        const label =
          e.status === "saved"
            ? `saved #${e.index}`
            : e.status === "queued"
              ? `queued (${e.error ?? "retrying"})`
              : e.status;
        return (
          `<li class="annotation ${e.status}">` +
          `${e.record.rater}: ${e.record.advice_kind} ${e.record.advice} ` +
          `for ${e.record.patient_id}@${e.record.care_date} ` +
          `<span class="status">${label}</span></li>`
        );
      })
      .join("");
    return `<ul class="annotation-list">${items}</ul>`;
  }
}
