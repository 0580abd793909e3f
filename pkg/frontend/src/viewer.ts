// three.js viewport: part meshes, wireframe box gizmos, selection, and a
// before/after split view rendered from cached mesh bytes.

import * as THREE from "three";
import { OrbitControls } from "three/examples/jsm/controls/OrbitControls.js";
import { parsePly } from "./ply.js";
import type { BoxJson } from "./types.js";

export interface ViewerCallbacks {
  onSelect?: (partId: number | null) => void;
  onBoxDragged?: (partId: number, box: BoxJson) => void;
}

interface PartObjects {
  mesh: THREE.Mesh | null;
  wire: THREE.LineSegments;
  box: BoxJson;
  frozen: boolean;
}

const FROZEN_COLOR = 0x4fb3ff;
const NORMAL_COLOR = 0xffaa33;
const SELECTED_COLOR = 0xff3366;

export class SceneViewer {
  readonly renderer: THREE.WebGLRenderer;
  readonly scene = new THREE.Scene();
  readonly camera: THREE.PerspectiveCamera;
  private readonly controls: OrbitControls;
  private readonly parts = new Map<number, PartObjects>();
  private readonly compareGroup = new THREE.Group();
  private selected: number | null = null;
  private callbacks: ViewerCallbacks;
  private dragging = false;
  private dragPlane = new THREE.Plane();
  private dragStart = new THREE.Vector3();
  private dragBox: BoxJson | null = null;

  constructor(canvas: HTMLCanvasElement, callbacks: ViewerCallbacks = {}) {
    this.callbacks = callbacks;
    this.renderer = new THREE.WebGLRenderer({ canvas, antialias: true });
    this.renderer.setClearColor(0x15181d);
    this.camera = new THREE.PerspectiveCamera(45, 1, 0.01, 50);
    this.camera.position.set(2.4, 1.8, 2.4);
    this.controls = new OrbitControls(this.camera, canvas);
    this.controls.enableDamping = true;

    this.scene.add(new THREE.AmbientLight(0xffffff, 0.55));
    const sun = new THREE.DirectionalLight(0xffffff, 1.1);
    sun.position.set(3, 5, 2);
    this.scene.add(sun);
    this.scene.add(new THREE.AxesHelper(1.2));
    this.compareGroup.position.x = 2.6;
    this.scene.add(this.compareGroup);

    canvas.addEventListener("pointerdown", (e) => this.onPointerDown(e));
    canvas.addEventListener("pointermove", (e) => this.onPointerMove(e));
    canvas.addEventListener("pointerup", () => this.onPointerUp());
    this.resize();
    window.addEventListener("resize", () => this.resize());
  }

  resize(): void {
    const canvas = this.renderer.domElement;
    const w = canvas.clientWidth || canvas.width;
    const h = canvas.clientHeight || canvas.height;
    this.renderer.setSize(w, h, false);
    this.camera.aspect = w / h;
    this.camera.updateProjectionMatrix();
  }

  renderLoop(): void {
    const tick = () => {
      this.controls.update();
      this.renderer.render(this.scene, this.camera);
      requestAnimationFrame(tick);
    };
    tick();
  }

  clearParts(): void {
    for (const obj of this.parts.values()) {
      if (obj.mesh) this.scene.remove(obj.mesh);
      this.scene.remove(obj.wire);
    }
    this.parts.clear();
    this.selected = null;
  }

  setPart(partId: number, box: BoxJson, meshBytes: ArrayBuffer | null, frozen: boolean): void {
    this.removePart(partId);
    let mesh: THREE.Mesh | null = null;
    if (meshBytes) {
      mesh = new THREE.Mesh(plyToGeometry(meshBytes),
                            new THREE.MeshLambertMaterial({ vertexColors: true }));
      mesh.userData.partId = partId;
      this.scene.add(mesh);
    }
    const wire = makeBoxWire(box, frozen ? FROZEN_COLOR : NORMAL_COLOR);
    wire.userData.partId = partId;
    this.scene.add(wire);
    this.parts.set(partId, { mesh, wire, box, frozen });
  }

  removePart(partId: number): void {
    const obj = this.parts.get(partId);
    if (!obj) return;
    if (obj.mesh) this.scene.remove(obj.mesh);
    this.scene.remove(obj.wire);
    this.parts.delete(partId);
  }

  setFrozen(partId: number, frozen: boolean): void {
    const obj = this.parts.get(partId);
    if (!obj) return;
    obj.frozen = frozen;
    this.refreshWire(partId);
  }

  setVisible(partId: number, visible: boolean): void {
    const obj = this.parts.get(partId);
    if (!obj) return;
    if (obj.mesh) obj.mesh.visible = visible;
    obj.wire.visible = visible;
  }

  moveBox(partId: number, box: BoxJson): void {
    const obj = this.parts.get(partId);
    if (!obj) return;
    obj.box = box;
    this.refreshWire(partId);
  }

  select(partId: number | null): void {
    this.selected = partId;
    for (const id of this.parts.keys()) this.refreshWire(id);
    this.callbacks.onSelect?.(partId);
  }

  selectedPart(): number | null {
    return this.selected;
  }

  /** Side-by-side comparison: render cached "before" meshes offset to the right. */
  showCompare(meshes: Map<number, ArrayBuffer>): void {
    this.hideCompare();
    for (const bytes of meshes.values()) {
      const mesh = new THREE.Mesh(plyToGeometry(bytes),
                                  new THREE.MeshLambertMaterial({ vertexColors: true }));
      this.compareGroup.add(mesh);
    }
  }

  hideCompare(): void {
    while (this.compareGroup.children.length) {
      this.compareGroup.remove(this.compareGroup.children[0]);
    }
  }

  private refreshWire(partId: number): void {
    const obj = this.parts.get(partId);
    if (!obj) return;
    this.scene.remove(obj.wire);
    const color = partId === this.selected
      ? SELECTED_COLOR
      : obj.frozen ? FROZEN_COLOR : NORMAL_COLOR;
    obj.wire = makeBoxWire(obj.box, color);
    obj.wire.userData.partId = partId;
    this.scene.add(obj.wire);
  }

  private pointerRay(e: PointerEvent): THREE.Raycaster {
    const rect = this.renderer.domElement.getBoundingClientRect();
    const ndc = new THREE.Vector2(
      ((e.clientX - rect.left) / rect.width) * 2 - 1,
      -((e.clientY - rect.top) / rect.height) * 2 + 1,
    );
    const ray = new THREE.Raycaster();
    ray.setFromCamera(ndc, this.camera);
    return ray;
  }

  private onPointerDown(e: PointerEvent): void {
    const ray = this.pointerRay(e);
    const meshes = [...this.parts.values()].flatMap((o) => (o.mesh ? [o.mesh] : []));
    const wires = [...this.parts.values()].map((o) => o.wire);
    const hit = ray.intersectObjects([...meshes, ...wires], false)[0];
    if (!hit) {
      this.select(null);
      return;
    }
    const partId = hit.object.userData.partId as number;
    this.select(partId);
    if (e.shiftKey) {
      // shift-drag translates the selected box in a camera-facing plane
      const obj = this.parts.get(partId)!;
      this.dragging = true;
      this.controls.enabled = false;
      this.dragBox = { min: [...obj.box.min], max: [...obj.box.max] } as BoxJson;
      const center = boxCenter(obj.box);
      this.dragPlane.setFromNormalAndCoplanarPoint(
        this.camera.getWorldDirection(new THREE.Vector3()).negate(), center,
      );
      ray.ray.intersectPlane(this.dragPlane, this.dragStart);
    }
  }

  private onPointerMove(e: PointerEvent): void {
    if (!this.dragging || this.selected === null || !this.dragBox) return;
    const ray = this.pointerRay(e);
    const here = new THREE.Vector3();
    if (!ray.ray.intersectPlane(this.dragPlane, here)) return;
    const delta = here.clone().sub(this.dragStart);
    const moved: BoxJson = {
      min: [this.dragBox.min[0] + delta.x, this.dragBox.min[1] + delta.y,
            this.dragBox.min[2] + delta.z],
      max: [this.dragBox.max[0] + delta.x, this.dragBox.max[1] + delta.y,
            this.dragBox.max[2] + delta.z],
    };
    this.moveBox(this.selected, moved);
    this.callbacks.onBoxDragged?.(this.selected, moved);
  }

  private onPointerUp(): void {
    this.dragging = false;
    this.dragBox = null;
    this.controls.enabled = true;
  }
}

function plyToGeometry(bytes: ArrayBuffer): THREE.BufferGeometry {
  const mesh = parsePly(bytes);
  const geo = new THREE.BufferGeometry();
  geo.setAttribute("position", new THREE.BufferAttribute(mesh.positions, 3));
  if (mesh.colors) {
    geo.setAttribute("color", new THREE.BufferAttribute(mesh.colors, 3));
  } else {
    const grey = new Float32Array(mesh.positions.length).fill(0.75);
    geo.setAttribute("color", new THREE.BufferAttribute(grey, 3));
  }
  geo.setIndex(new THREE.BufferAttribute(mesh.indices, 1));
  geo.computeVertexNormals();
  return geo;
}

function boxCenter(box: BoxJson): THREE.Vector3 {
  return new THREE.Vector3(
    (box.min[0] + box.max[0]) / 2,
    (box.min[1] + box.max[1]) / 2,
    (box.min[2] + box.max[2]) / 2,
  );
}

function makeBoxWire(box: BoxJson, color: number): THREE.LineSegments {
  const size = [box.max[0] - box.min[0], box.max[1] - box.min[1], box.max[2] - box.min[2]];
  const geo = new THREE.BoxGeometry(size[0], size[1], size[2]);
  const wire = new THREE.LineSegments(
    new THREE.EdgesGeometry(geo),
    new THREE.LineBasicMaterial({ color }),
  );
  const c = boxCenter(box);
  wire.position.copy(c);
  return wire;
}
