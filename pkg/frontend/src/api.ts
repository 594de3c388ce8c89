/** Typed client for the /api/v1 endpoints.
 *
 * Every response body embeds model_version; the client tracks it and
 * notifies when the server moved on mid-session so the app can show the
 * reload banner instead of silently mixing versions.
 */

import type {
  AdviceRecord,
  Agreement,
  AnnotationCreated,
  AnnotationList,
  DoseResponse,
  EditPreview,
  IterateResult,
  MetricsHistory,
  PatientList,
  RuleDetail,
  RuleEditDoc,
  RuleSetDoc,
  Trajectory,
  VersionsDoc,
} from "./types.js";

export class ApiError extends Error {
  constructor(
    readonly status: number,
    readonly kind: string,
    readonly detail: string,
  ) {
    super(`${kind}: ${detail}`);
  }
}

/** Network-level failure (server unreachable), distinct from an API error. */
export class OfflineError extends Error {}

type FetchLike = (input: string, init?: RequestInit) => Promise<Response>;

export class ApiClient {
  modelVersion: number | null = null;
  onVersionChange: ((next: number, prev: number) => void) | null = null;

  constructor(
    private readonly baseUrl: string = "",
    private readonly token: string | null = null,
    private readonly fetchFn: FetchLike = (input, init) => fetch(input, init),
  ) {}

  private async request<T>(method: string, path: string, body?: unknown): Promise<T> {
    const headers: Record<string, string> = { accept: "application/json" };
    if (this.token !== null) headers["authorization"] = `Bearer ${this.token}`;
    if (body !== undefined) headers["content-type"] = "application/json";
    let resp: Response;
    try {
      resp = await this.fetchFn(this.baseUrl + path, {
        method,
        headers,
        body: body === undefined ? undefined : JSON.stringify(body),
      });
    } catch (err) {
      throw new OfflineError(String(err));
    }
    const payload = await resp.json();
    if (!resp.ok) {
      throw new ApiError(resp.status, payload.error ?? "error", payload.detail ?? "");
    }
    if (typeof payload.model_version === "number") {
      const prev = this.modelVersion;
      this.modelVersion = payload.model_version;
      if (prev !== null && prev !== payload.model_version && this.onVersionChange) {
        this.onVersionChange(payload.model_version, prev);
      }
    }
    return payload as T;
  }

  rules(): Promise<RuleSetDoc> {
    return this.request("GET", "/api/v1/rules");
  }

  rule(id: number): Promise<RuleDetail> {
    return this.request("GET", `/api/v1/rules/${id}`);
  }

  submitEdit(ruleId: number, edit: RuleEditDoc, dryRun: boolean): Promise<EditPreview> {
    const flag = dryRun ? "?dry_run=true" : "";
    return this.request("POST", `/api/v1/rules/${ruleId}/edits${flag}`, edit);
  }

  patients(ruleId?: number): Promise<PatientList> {
    const q = ruleId === undefined ? "" : `?rule=${ruleId}`;
    return this.request("GET", `/api/v1/patients${q}`);
  }

  trajectory(patientId: string): Promise<Trajectory> {
    return this.request("GET", `/api/v1/patients/${encodeURIComponent(patientId)}/trajectory`);
  }

  doseResponse(
    patientId: string,
    opts: { grid?: number[]; currentHb?: number; visit?: string } = {},
  ): Promise<DoseResponse> {
    const params = new URLSearchParams();
    if (opts.grid) params.set("grid", opts.grid.join(","));
    if (opts.currentHb !== undefined) params.set("current_hb", String(opts.currentHb));
    if (opts.visit !== undefined) params.set("visit", opts.visit);
    const q = params.toString() ? `?${params.toString()}` : "";
    return this.request(
      "GET",
      `/api/v1/patients/${encodeURIComponent(patientId)}/dose-response${q}`,
    );
  }

  submitAnnotation(record: AdviceRecord): Promise<AnnotationCreated> {
    return this.request("POST", "/api/v1/annotations", record);
  }

  annotations(rater?: string): Promise<AnnotationList> {
    const q = rater === undefined ? "" : `?rater=${encodeURIComponent(rater)}`;
    return this.request("GET", `/api/v1/annotations${q}`);
  }

  agreement(threshold?: number): Promise<Agreement> {
    const q = threshold === undefined ? "" : `?threshold=${threshold}`;
    return this.request("GET", `/api/v1/agreement${q}`);
  }

  iterate(): Promise<IterateResult> {
    return this.request("POST", "/api/v1/loop/iterate");
  }

  metrics(): Promise<MetricsHistory> {
    return this.request("GET", "/api/v1/metrics");
  }

  versions(): Promise<VersionsDoc> {
    return this.request("GET", "/api/v1/versions");
  }
}
