// Wire types mirroring the server's /api schemas (all versioned JSON).

export interface ScenePartEntry {
  part_id: number;
  min: [number, number, number];
  max: [number, number, number];
  pvox: string;
  mesh: string | null;
  frozen: boolean;
  empty: boolean;
}

export interface SceneJson {
  version: number;
  scene_id: string;
  seed: number;
  condition: { category: string; sample_seed: number };
  from_gt_boxes: boolean;
  parts: ScenePartEntry[];
  global: { pvox: string | null };
  latents: string;
}

export interface JobJson {
  version: number;
  job_id: string;
  kind: "generate" | "edit";
  status: "queued" | "running" | "done" | "failed";
  scene_id: string | null;
  progress: number;
  error: string;
}

export interface ApiError {
  version: number;
  error: string;
}

export type EditOp =
  | { op: "add"; box: BoxJson }
  | { op: "delete"; part_id: number }
  | { op: "transform"; part_id: number; box: BoxJson };

export interface BoxJson {
  min: [number, number, number];
  max: [number, number, number];
}

export interface EditRequest {
  ops: EditOp[];
  frozen: number[];
  seed: number;
}
