/** Wires the stores to the DOM. All logic lives in the imported modules;
 * this file only reads form fields, swaps innerHTML, and delegates
 * clicks. State changes always re-render from store state so the page
 * never shows anything the API did not return. */

import { ApiClient, ApiError, OfflineError } from "./api.js";
import { AnnotationPanel } from "./annotations.js";
import { EditDialog } from "./editDialog.js";
import { renderDoseResponse, renderTrajectory } from "./patientView.js";
import { RuleBrowser } from "./ruleBrowser.js";

function el<T extends HTMLElement>(id: string): T {
  const node = document.getElementById(id);
  if (!node) throw new Error(`missing #${id}`);
  return node as T;
}

export function startApp(): void {
  const params = new URLSearchParams(window.location.search);
  const client = new ApiClient("", params.get("token"));
  const browser = new RuleBrowser();
  const annotations = new AnnotationPanel();
  const dialog = new EditDialog(params.get("rater") ?? "anonymous");

  const banner = el<HTMLDivElement>("banner");
  client.onVersionChange = (next, prev) => {
    banner.textContent =
      `Model updated (v${prev} -> v${next}) while you were working. ` +
      `Reload to annotate against the current rules.`;
    banner.hidden = false;
  };

  const offline = (err: unknown) => {
    if (err instanceof OfflineError) {
      banner.textContent = "Server unreachable. Showing nothing rather than stale data.";
      banner.hidden = false;
      return true;
    }
    return false;
  };

  const rulesPane = el<HTMLDivElement>("rules");
  const patientsPane = el<HTMLDivElement>("patients");
  const detailPane = el<HTMLDivElement>("patient-detail");
  const annotationsPane = el<HTMLDivElement>("annotations");

  const redraw = () => {
    rulesPane.innerHTML = browser.render();
    patientsPane.innerHTML = browser.renderPatients();
    annotationsPane.innerHTML = annotations.render();
  };

  rulesPane.addEventListener("click", (ev) => {
    const item = (ev.target as HTMLElement).closest<HTMLElement>("[data-rule-id]");
    if (!item) return;
    const id = Number(item.dataset.ruleId);
    void browser
      .select(client, browser.selected === id ? null : id)
      .then(redraw)
      .catch(offline);
  });

  patientsPane.addEventListener("click", (ev) => {
    const item = (ev.target as HTMLElement).closest<HTMLElement>("[data-patient-id]");
    if (!item) return;
    const pid = item.dataset.patientId as string;
    void (async () => {
      try {
        const trajectory = await client.trajectory(pid);
        const dose = await client.doseResponse(pid, { currentHb: 10.0 });
        detailPane.innerHTML = renderTrajectory(trajectory) + renderDoseResponse(dose);
        detailPane.dataset.patientId = pid;
      } catch (err) {
        if (!offline(err)) throw err;
      }
    })();
  });

  el<HTMLFormElement>("annotate-form").addEventListener("submit", (ev) => {
    ev.preventDefault();
    const form = ev.target as HTMLFormElement;
    const fields = new FormData(form);
    const pid = detailPane.dataset.patientId;
    if (!pid) return;
    void (async () => {
      const entry = await annotations.submit(client, {
        patientId: pid,
        careDate: String(fields.get("care_date") ?? ""),
        xSnapshot: {},
        yHat: Number(fields.get("y_hat") ?? 0),
        ruleId: browser.selected ?? 0,
        advice: Number(fields.get("advice")),
        kind: (fields.get("kind") as "dose-suggestion" | "target-correction") ?? "dose-suggestion",
        rater: String(fields.get("rater") ?? ""),
      });
      el<HTMLParagraphElement>("annotate-error").textContent = entry.error ?? "";
      redraw();
    })();
  });

  el<HTMLButtonElement>("retry-queued").addEventListener("click", () => {
    void annotations.retry(client).then(redraw);
  });

  el<HTMLButtonElement>("iterate").addEventListener("click", () => {
    void client
      .iterate()
      .then((result) => {
        banner.textContent = result.rejected
          ? `Iteration rejected: ${result.rejection}`
          : `Model advanced to v${result.metrics?.version}.`;
        banner.hidden = false;
        return browser.load(client).then(redraw);
      })
      .catch((err) => {
        if (err instanceof ApiError && err.status === 409) {
          banner.textContent = "An iteration is already running; try again shortly.";
          banner.hidden = false;
        } else if (!offline(err)) {
          throw err;
        }
      });
  });

  void browser
    .load(client)
    .then(redraw)
    .catch(offline);

  // surfaced for the edit dialog's buttons, wired ad hoc in the page
  (window as unknown as { doseloop: object }).doseloop = { client, browser, annotations, dialog };
}

if (typeof document !== "undefined" && document.getElementById("rules")) {
  startApp();
}
