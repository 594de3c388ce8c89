/** Left panel: the learned rule groups with their conditions, model line,
 * and patient counts. Selecting a rule filters the patient list; all
 * counts come from the patients endpoint, never recomputed locally. */

import type { ApiClient } from "./api.js";
import type { PatientSummary, Rule } from "./types.js";
import { conditionToText, escapeHtml as esc } from "./ruleText.js";

export interface RuleGroupView {
  rule: Rule;
  patientCount: number;
}

export class RuleBrowser {
  groups: RuleGroupView[] = [];
  regressors: string[] = [];
  selected: number | null = null;
  patients: PatientSummary[] = [];
  modelVersion: number | null = null;

  /** Pull rules plus per-rule member counts; the unfiltered patient list
   * is the initial right-panel content. */
  async load(client: ApiClient): Promise<void> {
    const doc = await client.rules();
    this.regressors = doc.regressors;
    this.modelVersion = doc.model_version;
    this.groups = [];
    for (const rule of doc.rules) {
      const members = await client.patients(rule.id);
      this.groups.push({ rule, patientCount: members.patients.length });
    }
    this.selected = null;
    this.patients = (await client.patients()).patients;
  }

  /** Select a rule (or null for all); refreshes the patient list. */
  async select(client: ApiClient, ruleId: number | null): Promise<void> {
    this.selected = ruleId;
    const listing = ruleId === null ? await client.patients() : await client.patients(ruleId);
    this.patients = listing.patients;
  }

  render(): string {
    if (this.groups.length === 0) {
      return `<p class="empty">No rules in the current model. Run an iteration first.</p>`;
    }
    const items = this.groups.map(({ rule, patientCount }) => {
      const conds = rule.conditions.length
        ? rule.conditions
            .map((c) => `<li class="cond">${esc(conditionToText(c))}</li>`)
            .join("")
        : `<li class="cond">TRUE</li>`;
      const terms = rule.model.beta1
        .map((b, k) => ` + ${b} * ${esc(this.regressors[k] ?? `x${k}`)}`)
        .join("");
      const cls = rule.id === this.selected ? "rule selected" : "rule";
      return (
        `<li class="${cls}" data-rule-id="${rule.id}">` +
        `<span class="rule-id">RULE #${rule.id}</span>` +
        `<ul class="conds">${conds}</ul>` +
        `<span class="model">${rule.model.beta0}${terms}</span>` +
        `<span class="count">${patientCount} patients</span>` +
        `</li>`
      );
    });
    return `<ul class="rule-list">${items.join("")}</ul>`;
  }

  renderPatients(): string {
    const rows = this.patients
      .map(
        (p) =>
          `<li class="patient" data-patient-id="${esc(p.id)}">${esc(p.id)}` +
          ` <span class="visits">${p.n_visits} visits</span></li>`,
      )
      .join("");
    return `<ul class="patient-list">${rows}</ul>`;
  }
}
