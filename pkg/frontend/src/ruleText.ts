/** Human-readable rule rendering and its inverse.
 *
 * The invariant that matters: text produced here parses back to the same
 * rule JSON (conditions and model bit for bit). Numbers are therefore
 * rendered with Number.prototype.toString, the shortest representation
 * that round-trips to the identical double.
 */

import type { Condition, Op, Rule, RuleModel } from "./types.js";

/** Minimal escaping for rule/feature text interpolated into markup. */
export function escapeHtml(s: string): string {
  return s.replace(/&/g, "&amp;").replace(/</g, "&lt;").replace(/>/g, "&gt;");
}

export function conditionToText(c: Condition): string {
  const cmp = c.op === "le" ? "<=" : ">";
  return `${c.feature} ${cmp} ${c.threshold}`;
}

export function ruleToText(rule: Rule, regressors: string[], targetLabel: string): string {
  const body = rule.conditions.length
    ? rule.conditions.map(conditionToText).join(" AND ")
    : "TRUE";
  let rhs = `${rule.model.beta0}`;
  rule.model.beta1.forEach((b, k) => {
    rhs += ` + ${b} * ${regressors[k] ?? `x${k}`}`;
  });
  return `RULE #${rule.id}: IF ${body} THEN ${targetLabel} = ${rhs}`;
}

export interface ParsedRuleText {
  id: number;
  conditions: Condition[];
  model: RuleModel;
  target: string;
  regressors: string[];
}

const HEAD = /^RULE #(\d+): IF (.+) THEN (\S+) = (.+)$/;
const COND = /^(\S+) (<=|>) (-?[\d.eE+-]+)$/;

export function parseRuleText(text: string): ParsedRuleText {
  const m = HEAD.exec(text);
  if (!m) throw new Error(`unparseable rule text: ${text}`);
  const conditions: Condition[] = [];
  if (m[2] !== "TRUE") {
    for (const part of m[2].split(" AND ")) {
      const c = COND.exec(part.trim());
      if (!c) throw new Error(`unparseable condition: ${part}`);
      const op: Op = c[2] === "<=" ? "le" : "gt";
      conditions.push({ feature: c[1], op, threshold: Number(c[3]) });
    }
  }
  const terms = m[4].split(" + ");
  const beta0 = Number(terms[0]);
  if (!Number.isFinite(beta0)) throw new Error(`unparseable intercept: ${terms[0]}`);
  const beta1: number[] = [];
  const regressors: string[] = [];
  for (const term of terms.slice(1)) {
    const bits = term.split(" * ");
    if (bits.length !== 2) throw new Error(`unparseable term: ${term}`);
    beta1.push(Number(bits[0]));
    regressors.push(bits[1]);
  }
  return { id: Number(m[1]), conditions, model: { beta0, beta1 }, target: m[3], regressors };
}
