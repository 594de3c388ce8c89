/** Rule-edit dialog: collects edit operations, previews them through the
 * server's dry-run validation (edited rule text, satisfiability, member
 * count, sampled synthetic points), and stages the edit only on an
 * explicit confirm. Closing without operations stages nothing. */

import type { ApiClient } from "./api.js";
import { escapeHtml } from "./ruleText.js";
import type {
  Condition,
  EditOperation,
  EditPreview,
  Op,
  Rule,
  RuleEditDoc,
  RuleModel,
} from "./types.js";

export class EditDialog {
  rule: Rule | null = null;
  operations: EditOperation[] = [];
  preview: EditPreview | null = null;

  constructor(
    public author: string,
    private readonly now: () => string = () => new Date().toISOString(),
  ) {}

  open(rule: Rule): void {
    this.rule = rule;
    this.operations = [];
    this.preview = null;
  }

  close(): void {
    this.rule = null;
    this.operations = [];
    this.preview = null;
  }

  modifyThreshold(feature: string, threshold: number, op?: Op): void {
    const operation: EditOperation = { kind: "modify-threshold", feature, threshold };
    if (op !== undefined) operation.op = op;
    this.operations.push(operation);
  }

  removeCondition(feature: string, op: Op): void {
    this.operations.push({ kind: "remove-condition", feature, op });
  }

  addCondition(condition: Condition): void {
    this.operations.push({ kind: "add-condition", condition });
  }

  setModel(model: RuleModel): void {
    this.operations.push({ kind: "set-model", model });
  }

  /** The staged-edit JSON, exactly the shape the rules engine consumes. */
  editJson(): RuleEditDoc {
    if (this.rule === null) throw new Error("no rule open");
    return {
      rule_id: this.rule.id,
      operations: this.operations,
      author: this.author,
      timestamp: this.now(),
    };
  }

  /** Server-side dry run; updates the preview pane state. */
  async refreshPreview(client: ApiClient): Promise<EditPreview> {
    this.preview = await client.submitEdit(this.editJson().rule_id, this.editJson(), true);
    return this.preview;
  }

  /** Stage for the next iterate. A dialog with no operations is a no-op
   * close: nothing is sent, nothing is staged. */
  async stage(client: ApiClient): Promise<EditPreview | null> {
    if (this.rule === null || this.operations.length === 0) {
      this.close();
      return null;
    }
    const staged = await client.submitEdit(this.editJson().rule_id, this.editJson(), false);
    this.close();
    return staged;
  }

  renderPreview(): string {
    if (this.preview === null) return `<p class="preview empty">no preview yet</p>`;
    const p = this.preview;
    const points = p.sampled_points
      .map((row) => {
        const cells = Object.entries(row)
          .map(([f, v]) => `<td data-feature="${f}">${v === null ? "–" : String(v)}</td>`)
          .join("");
        return `<tr>${cells}</tr>`;
      })
      .join("");
    return (
      `<div class="preview ${p.satisfiable ? "ok" : "unsatisfiable"}">` +
      `<p class="text">${escapeHtml(p.text)}</p>` +
      `<p class="members">${p.member_count} member visits</p>` +
      (p.satisfiable ? "" : `<p class="warn">edit makes the rule unsatisfiable</p>`) +
      `<table class="sampled">${points}</table></div>`
    );
  }
}
