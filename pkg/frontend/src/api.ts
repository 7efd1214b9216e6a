/**
 * Thin typed client for the /v1 endpoints. One base-URL setting; errors
 * carry the HTTP status so cards can surface them without guessing.
 */

import type { RunDetail, ScenarioRequest, ScenarioResponse, SystemSummary } from "./types.js";

export class ApiError extends Error {
  constructor(public status: number, message: string) {
    super(message);
  }
}

async function asJson<T>(response: Response): Promise<T> {
  if (!response.ok) {
    let detail = response.statusText;
    try {
      const body = await response.json();
      detail = body.error ?? JSON.stringify(body);
    } catch {
      // fall through with the status text
    }
    throw new ApiError(response.status, detail);
  }
  return (await response.json()) as T;
}

export class ScenarioApi {
  constructor(private baseUrl: string) {}

  get base(): string {
    return this.baseUrl.replace(/\/+$/, "");
  }

  async system(): Promise<SystemSummary> {
    return asJson(await fetch(`${this.base}/v1/system`));
  }

  async runScenario(request: ScenarioRequest): Promise<ScenarioResponse> {
    return asJson(
      await fetch(`${this.base}/v1/scenarios/run`, {
        method: "POST",
        headers: { "content-type": "application/json" },
        body: JSON.stringify(request),
      })
    );
  }

  async runDetail(runId: string): Promise<RunDetail> {
    return asJson(await fetch(`${this.base}/v1/runs/${encodeURIComponent(runId)}`));
  }
}
