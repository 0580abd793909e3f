// Page bootstrap: scene loading, part list panel, edit controls, submit loop.

import { ApiClient, ApiHttpError } from "./api.js";
import { EditValidationError, clampBox } from "./model.js";
import { SceneViewer } from "./viewer.js";
import { loadScene, submitEditAndRefresh, type LoadedScene } from "./workflow.js";
import type { BoxJson } from "./types.js";

const api = new ApiClient("");
let current: LoadedScene | null = null;
let viewer: SceneViewer | null = null;
let submitting = false;

const $ = <T extends HTMLElement>(id: string): T => {
  const el = document.getElementById(id);
  if (!el) throw new Error(`missing element #${id}`);
  return el as T;
};

function status(text: string, isError = false): void {
  const el = $("status");
  el.textContent = text;
  el.className = isError ? "error" : "";
}

function renderPartList(): void {
  if (!current) return;
  const list = $("parts");
  list.innerHTML = "";
  for (const p of current.model.parts) {
    const row = document.createElement("div");
    row.className = "part-row";
    const label = document.createElement("span");
    label.textContent = `part ${p.partId}${p.isNew ? " (new)" : ""}${p.empty ? " (empty)" : ""}`;
    label.onclick = () => viewer?.select(p.partId);

    const frozenBtn = document.createElement("button");
    frozenBtn.textContent = p.frozen ? "frozen" : "freeze";
    frozenBtn.className = p.frozen ? "frozen" : "";
    frozenBtn.onclick = () => {
      try {
        const on = current!.model.toggleFrozen(p.partId);
        viewer?.setFrozen(p.partId, on);
        renderPartList();
      } catch (err) {
        reportError(err);
      }
    };

    const visBtn = document.createElement("button");
    visBtn.textContent = p.visible ? "hide" : "show";
    visBtn.onclick = () => {
      p.visible = !p.visible;
      viewer?.setVisible(p.partId, p.visible);
      renderPartList();
    };

    const delBtn = document.createElement("button");
    delBtn.textContent = "delete";
    delBtn.onclick = () => {
      try {
        current!.model.deletePart(p.partId);
        viewer?.removePart(p.partId);
        renderPartList();
      } catch (err) {
        reportError(err);
      }
    };

    row.append(label, frozenBtn, visBtn, delBtn);
    list.append(row);
  }
  $("pending").textContent = JSON.stringify(current.model.pendingOps(), null, 1);
}

function reportError(err: unknown): void {
  if (err instanceof EditValidationError) {
    status(`invalid edit: ${err.message}` + (err.op ? ` op=${JSON.stringify(err.op)}` : ""), true);
  } else if (err instanceof ApiHttpError) {
    status(`server ${err.status}: ${err.message}`, true);
  } else {
    status(String(err), true);
  }
}

async function doLoad(): Promise<void> {
  const sceneId = ($("scene-id") as HTMLInputElement).value.trim();
  if (!sceneId) return status("enter a scene id", true);
  try {
    status(`loading ${sceneId}...`);
    current = await loadScene(api, sceneId);
    viewer!.clearParts();
    for (const p of current.model.parts) {
      viewer!.setPart(p.partId, p.box, current.meshes.get(p.partId) ?? null, p.frozen);
    }
    status(`loaded ${sceneId}: ${current.model.parts.length} parts`);
    renderPartList();
  } catch (err) {
    reportError(err);
  }
}

async function doSubmit(): Promise<void> {
  if (!current || submitting) return;
  let payload;
  try {
    payload = current.model.validatePayload();
  } catch (err) {
    reportError(err);
    return;
  }
  submitting = true;
  ($("submit") as HTMLButtonElement).disabled = true;
  const beforeMeshes = new Map(current.meshes);
  try {
    status(`submitting ${payload.ops.length} ops, ${payload.frozen.length} frozen...`);
    const seed = parseInt(($("seed") as HTMLInputElement).value || "0", 10);
    const outcome = await submitEditAndRefresh(api, current, seed, {
      onProgress: (job) => status(`job ${job.job_id}: ${job.status} ${(job.progress * 100).toFixed(0)}%`),
    });
    current = outcome.refreshed;
    viewer!.clearParts();
    for (const p of current.model.parts) {
      viewer!.setPart(p.partId, p.box, current.meshes.get(p.partId) ?? null, false);
    }
    viewer!.showCompare(beforeMeshes);
    renderPartList();
    const frozenNote = outcome.brokenFrozen.length
      ? ` FROZEN MISMATCH: ${outcome.brokenFrozen.join(",")}`
      : " (frozen parts verified unchanged)";
    status(`${outcome.regeneratedParts.length} parts regenerated${frozenNote}`,
           outcome.brokenFrozen.length > 0);
  } catch (err) {
    reportError(err);
  } finally {
    submitting = false;
    ($("submit") as HTMLButtonElement).disabled = false;
  }
}

function wireUp(): void {
  viewer = new SceneViewer($("viewport") as HTMLCanvasElement, {
    onSelect: (partId) => {
      $("selection").textContent = partId === null ? "none" : `part ${partId}`;
    },
    onBoxDragged: (partId, box) => {
      try {
        current?.model.moveBox(partId, box);
        renderPartList();
      } catch (err) {
        reportError(err);
      }
    },
  });
  viewer.renderLoop();

  $("load").onclick = () => void doLoad();
  $("submit").onclick = () => void doSubmit();
  $("add-box").onclick = () => {
    if (!current) return;
    const box: BoxJson = clampBox({ min: [-0.2, -0.2, -0.2], max: [0.2, 0.2, 0.2] });
    const id = current.model.addBox(box);
    viewer!.setPart(id, box, null, false);
    renderPartList();
  };
  $("freeze-all").onclick = () => {
    if (!current) return;
    current.model.freezeAll();
    for (const p of current.model.parts) viewer!.setFrozen(p.partId, p.frozen);
    renderPartList();
  };
  $("thaw-all").onclick = () => {
    if (!current) return;
    current.model.thawAll();
    for (const p of current.model.parts) viewer!.setFrozen(p.partId, false);
    renderPartList();
  };
  $("hide-compare").onclick = () => viewer!.hideCompare();

  for (const [id, axis, sign] of [
    ["scale-x-up", 0, 1], ["scale-x-down", 0, -1],
    ["scale-y-up", 1, 1], ["scale-y-down", 1, -1],
    ["scale-z-up", 2, 1], ["scale-z-down", 2, -1],
  ] as const) {
    $(id).onclick = () => {
      if (!current || !viewer) return;
      const sel = viewer.selectedPart();
      if (sel === null) return status("select a part first", true);
      const p = current.model.part(sel);
      const factor = sign > 0 ? 1.1 : 1 / 1.1;
      const c = (p.box.min[axis] + p.box.max[axis]) / 2;
      const half = ((p.box.max[axis] - p.box.min[axis]) / 2) * factor;
      const box: BoxJson = {
        min: [...p.box.min] as BoxJson["min"],
        max: [...p.box.max] as BoxJson["max"],
      };
      box.min[axis] = c - half;
      box.max[axis] = c + half;
      try {
        current.model.moveBox(sel, box);
        viewer.moveBox(sel, current.model.part(sel).box);
        renderPartList();
      } catch (err) {
        reportError(err);
      }
    };
  }
}

window.addEventListener("DOMContentLoaded", wireUp);
