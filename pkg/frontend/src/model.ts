// Client-side scene/editing state.
//
// The invariants the server enforces with 422s are mirrored here so the UI
// never constructs a rejected payload: ops must target known parts, frozen
// parts are never edited, and gizmo boxes always have positive extents inside
// object space.

import type { BoxJson, EditOp, SceneJson } from "./types.js";

export interface PartUiState {
  partId: number;
  box: BoxJson;          // current gizmo box (may differ from baseBox while editing)
  baseBox: BoxJson;      // box as loaded from the server
  frozen: boolean;
  visible: boolean;
  empty: boolean;
  meshHash: string | null;   // byte-hash of the last fetched PLY
  isNew: boolean;        // added locally, not yet on the server
}

export class EditValidationError extends Error {
  readonly op: EditOp | null;

  constructor(message: string, op: EditOp | null = null) {
    super(message);
    this.op = op;
  }
}

const EPS = 1e-6;

export function boxIsValid(box: BoxJson): boolean {
  for (let a = 0; a < 3; a++) {
    if (!(box.max[a] - box.min[a] > 0)) return false;
    if (box.min[a] < -1 || box.max[a] > 1) return false;
    if (!Number.isFinite(box.min[a]) || !Number.isFinite(box.max[a])) return false;
  }
  return true;
}

export function clampBox(box: BoxJson): BoxJson {
  // Gizmo output contract: min <= max with positive extents, inside [-1, 1].
  const min: [number, number, number] = [0, 0, 0];
  const max: [number, number, number] = [0, 0, 0];
  for (let a = 0; a < 3; a++) {
    let lo = Math.min(box.min[a], box.max[a]);
    let hi = Math.max(box.min[a], box.max[a]);
    lo = Math.max(-1, Math.min(lo, 1 - EPS));
    hi = Math.max(lo + EPS, Math.min(hi, 1));
    min[a] = lo;
    max[a] = hi;
  }
  return { min, max };
}

function boxesEqual(a: BoxJson, b: BoxJson): boolean {
  for (let i = 0; i < 3; i++) {
    if (a.min[i] !== b.min[i] || a.max[i] !== b.max[i]) return false;
  }
  return true;
}

export class UiSceneModel {
  sceneId: string;
  seed: number;
  parts: PartUiState[] = [];
  deleted: number[] = [];
  private nextLocalId: number;

  constructor(scene: SceneJson) {
    this.sceneId = scene.scene_id;
    this.seed = scene.seed;
    this.parts = scene.parts.map((p) => ({
      partId: p.part_id,
      box: { min: [...p.min] as BoxJson["min"], max: [...p.max] as BoxJson["max"] },
      baseBox: { min: [...p.min] as BoxJson["min"], max: [...p.max] as BoxJson["max"] },
      frozen: false,
      visible: true,
      empty: p.empty,
      meshHash: null,
      isNew: false,
    }));
    this.nextLocalId = Math.max(0, ...this.parts.map((p) => p.partId)) + 1;
  }

  part(partId: number): PartUiState {
    const p = this.parts.find((q) => q.partId === partId);
    if (!p) throw new EditValidationError(`unknown part id ${partId}`);
    return p;
  }

  toggleFrozen(partId: number): boolean {
    const p = this.part(partId);
    if (!p.frozen && this.isEdited(partId)) {
      throw new EditValidationError(
        `part ${partId} has pending edits and cannot be frozen`,
        { op: "transform", part_id: partId, box: p.box },
      );
    }
    p.frozen = !p.frozen;
    return p.frozen;
  }

  freezeAll(): void {
    for (const p of this.parts) {
      if (!p.isNew && !this.isEdited(p.partId)) p.frozen = true;
    }
  }

  thawAll(): void {
    for (const p of this.parts) p.frozen = false;
  }

  isEdited(partId: number): boolean {
    const p = this.part(partId);
    return p.isNew || !boxesEqual(p.box, p.baseBox);
  }

  moveBox(partId: number, box: BoxJson): void {
    const p = this.part(partId);
    if (p.frozen) {
      throw new EditValidationError(`part ${partId} is frozen; unfreeze before editing`, {
        op: "transform",
        part_id: partId,
        box,
      });
    }
    p.box = clampBox(box);
  }

  addBox(box: BoxJson): number {
    const clamped = clampBox(box);
    const partId = this.nextLocalId++;
    this.parts.push({
      partId,
      box: clamped,
      baseBox: clamped,
      frozen: false,
      visible: true,
      empty: false,
      meshHash: null,
      isNew: true,
    });
    return partId;
  }

  deletePart(partId: number): void {
    const p = this.part(partId);
    if (p.frozen) {
      throw new EditValidationError(`part ${partId} is frozen; unfreeze before deleting`, {
        op: "delete",
        part_id: partId,
      });
    }
    this.parts = this.parts.filter((q) => q.partId !== partId);
    if (!p.isNew) this.deleted.push(partId);
  }

  pendingOps(): EditOp[] {
    const ops: EditOp[] = [];
    for (const partId of this.deleted) ops.push({ op: "delete", part_id: partId });
    for (const p of this.parts) {
      if (p.isNew) {
        ops.push({ op: "add", box: p.box });
      } else if (!boxesEqual(p.box, p.baseBox)) {
        ops.push({ op: "transform", part_id: p.partId, box: p.box });
      }
    }
    return ops;
  }

  frozenIds(): number[] {
    return this.parts.filter((p) => p.frozen && !p.isNew).map((p) => p.partId);
  }

  /** Mirrors the server's 422 rules; throws with the offending op attached. */
  validatePayload(): { ops: EditOp[]; frozen: number[] } {
    const ops = this.pendingOps();
    const frozen = this.frozenIds();
    const known = new Set(
      this.parts.filter((p) => !p.isNew).map((p) => p.partId).concat(this.deleted),
    );
    const edited = new Set<number>();
    for (const op of ops) {
      if (op.op === "delete" || op.op === "transform") {
        if (!known.has(op.part_id)) {
          throw new EditValidationError(`op targets unknown part ${op.part_id}`, op);
        }
        edited.add(op.part_id);
      }
      if (op.op === "add" || op.op === "transform") {
        if (!boxIsValid(op.box)) {
          throw new EditValidationError("op carries an invalid box", op);
        }
      }
    }
    for (const id of frozen) {
      if (edited.has(id)) {
        throw new EditValidationError(`frozen part ${id} is also edited`, null);
      }
    }
    if (this.parts.length === 0) {
      throw new EditValidationError("edit would remove every part", null);
    }
    return { ops, frozen };
  }

  /** After a refresh: which previously frozen parts changed hash (should be none). */
  verifyFrozen(newHashes: Map<number, string>): number[] {
    const broken: number[] = [];
    for (const p of this.parts) {
      if (!p.frozen || p.meshHash === null) continue;
      const after = newHashes.get(p.partId);
      if (after !== undefined && after !== p.meshHash) broken.push(p.partId);
    }
    return broken;
  }
}
