// Typed client over the documented /api schemas; no private endpoints.

import type { ApiError, EditRequest, JobJson, SceneJson } from "./types.js";

export class ApiHttpError extends Error {
  readonly status: number;
  readonly payload: ApiError | null;

  constructor(status: number, payload: ApiError | null) {
    super(payload?.error ?? `HTTP ${status}`);
    this.status = status;
    this.payload = payload;
  }
}

export type FetchLike = (url: string, init?: RequestInit) => Promise<Response>;

export class ApiClient {
  private readonly base: string;
  private readonly fetchFn: FetchLike;

  constructor(base = "", fetchFn: FetchLike = fetch.bind(globalThis)) {
    this.base = base.replace(/\/$/, "");
    this.fetchFn = fetchFn;
  }

  private async json<T>(url: string, init?: RequestInit): Promise<T> {
    const res = await this.fetchFn(this.base + url, init);
    if (!res.ok) {
      let payload: ApiError | null = null;
      try {
        payload = (await res.json()) as ApiError;
      } catch {
        payload = null;
      }
      throw new ApiHttpError(res.status, payload);
    }
    return (await res.json()) as T;
  }

  getScene(sceneId: string): Promise<SceneJson> {
    return this.json<SceneJson>(`/api/scenes/${sceneId}`);
  }

  getJob(jobId: string): Promise<JobJson> {
    return this.json<JobJson>(`/api/jobs/${jobId}`);
  }

  generate(body: { category: string; seed: number; from_gt_boxes?: boolean }): Promise<JobJson> {
    return this.json<JobJson>(`/api/generate`, {
      method: "POST",
      headers: { "content-type": "application/json" },
      body: JSON.stringify(body),
    });
  }

  submitEdit(sceneId: string, body: EditRequest): Promise<JobJson> {
    return this.json<JobJson>(`/api/scenes/${sceneId}/edit`, {
      method: "POST",
      headers: { "content-type": "application/json" },
      body: JSON.stringify(body),
    });
  }

  async getMeshBytes(sceneId: string, partId: number): Promise<ArrayBuffer> {
    const res = await this.fetchFn(`${this.base}/api/scenes/${sceneId}/parts/${partId}/mesh`);
    if (!res.ok) {
      let payload: ApiError | null = null;
      try {
        payload = (await res.json()) as ApiError;
      } catch {
        payload = null;
      }
      throw new ApiHttpError(res.status, payload);
    }
    return res.arrayBuffer();
  }
}
