// DOM-free orchestration of the edit loop: load scene, fetch mesh hashes,
// submit validated edits, poll to completion, refresh, and verify that frozen
// parts came back byte-identical.

import { ApiClient } from "./api.js";
import { sha256Hex } from "./hash.js";
import { UiSceneModel } from "./model.js";
import { pollJob, type PollOptions } from "./poll.js";
import type { JobJson, SceneJson } from "./types.js";

export interface LoadedScene {
  scene: SceneJson;
  model: UiSceneModel;
  meshes: Map<number, ArrayBuffer>;
}

export async function loadScene(api: ApiClient, sceneId: string): Promise<LoadedScene> {
  const scene = await api.getScene(sceneId);
  const model = new UiSceneModel(scene);
  const meshes = new Map<number, ArrayBuffer>();
  for (const entry of scene.parts) {
    if (!entry.mesh) continue;
    const bytes = await api.getMeshBytes(scene.scene_id, entry.part_id);
    meshes.set(entry.part_id, bytes);
    model.part(entry.part_id).meshHash = sha256Hex(new Uint8Array(bytes));
  }
  return { scene, model, meshes };
}

export interface EditOutcome {
  job: JobJson;
  refreshed: LoadedScene;
  regeneratedParts: number[];   // ids whose mesh hash changed (or are new)
  brokenFrozen: number[];       // frozen ids whose hash changed (must be empty)
}

export async function submitEditAndRefresh(
  api: ApiClient,
  current: LoadedScene,
  seed: number,
  poll: PollOptions = {},
): Promise<EditOutcome> {
  const { ops, frozen } = current.model.validatePayload();
  const job = await api.submitEdit(current.scene.scene_id, { ops, frozen, seed });
  const finished = await pollJob(api, job.job_id, poll);

  const refreshed = await loadScene(api, current.scene.scene_id);
  const before = new Map<number, string>();
  for (const p of current.model.parts) {
    if (p.meshHash !== null) before.set(p.partId, p.meshHash);
  }
  const regenerated: number[] = [];
  const newHashes = new Map<number, string>();
  for (const p of refreshed.model.parts) {
    if (p.meshHash === null) continue;
    newHashes.set(p.partId, p.meshHash);
    if (before.get(p.partId) !== p.meshHash) regenerated.push(p.partId);
  }
  const brokenFrozen = current.model.verifyFrozen(newHashes);
  return { job: finished, refreshed, regeneratedParts: regenerated, brokenFrozen };
}
