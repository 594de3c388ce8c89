/** Right panel: one patient's visit trajectory and the what-if
 * dose-response line with the target band overlay.
 *
 * Every number in the markup is the API value rendered with String();
 * nothing is predicted or interpolated client-side.
 */

import { escapeHtml as esc } from "./ruleText.js";
import type { DoseResponse, Trajectory } from "./types.js";

function num(v: number | null): string {
  return v === null ? "–" : String(v);
}

export function renderTrajectory(t: Trajectory): string {
  const rows = t.visits
    .map(
      (v) =>
        `<tr data-care-date="${esc(v.care_date)}">` +
        `<td class="date">${esc(v.care_date)}</td>` +
        `<td class="observed">${num(v.target)}</td>` +
        `<td class="predicted">${String(v.prediction)}</td>` +
        `</tr>`,
    )
    .join("");
  return (
    `<table class="trajectory" data-patient-id="${esc(t.patient_id)}" ` +
    `data-model-version="${t.model_version}">` +
    `<thead><tr><th>visit</th><th>observed ${esc(t.target_name)}</th>` +
    `<th>predicted ${esc(t.target_name)}</th></tr></thead>` +
    `<tbody>${rows}</tbody></table>`
  );
}

export function renderDoseResponse(d: DoseResponse): string {
  const [lo, hi] = d.band;
  const rows = d.points
    .map((p) => {
      const inBand = p.projected_hb >= lo && p.projected_hb <= hi;
      return (
        `<tr class="${inBand ? "in-band" : "off-band"}" data-dose="${p.dose}">` +
        `<td class="dose">${String(p.dose)}</td>` +
        `<td class="delta">${String(p.delta_hb)}</td>` +
        `<td class="projected">${String(p.projected_hb)}</td>` +
        `</tr>`
      );
    })
    .join("");
  return (
    `<div class="dose-response" data-model-version="${d.model_version}">` +
    `<p class="current">Current Hb ${String(d.current_hb)} mg/dl; ` +
    `target band <span class="band" data-band="${lo},${hi}">${lo}–${hi} mg/dl</span></p>` +
    `<table class="dose-grid">` +
    `<thead><tr><th>dose</th><th>ΔHb</th><th>projected Hb</th></tr></thead>` +
    `<tbody>${rows}</tbody></table></div>`
  );
}
