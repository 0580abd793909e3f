"""HTTP job API backing the interactive editor.

Endpoints (all JSON carries an explicit ``version`` field):
  POST /api/generate                      -> queue a generation job
  GET  /api/jobs/{job_id}                 -> job status
  GET  /api/scenes/{scene_id}             -> scene.json
  GET  /api/scenes/{scene_id}/parts/{k}/mesh -> PLY bytes
  POST /api/scenes/{scene_id}/edit        -> queue an edit job (422 on bad ops)

Sampling jobs run on a single worker by default so checkpoint memory stays
bounded; reads are served concurrently.
"""

from __future__ import annotations

import json
import queue
import threading
import uuid
from contextlib import asynccontextmanager
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

from fastapi import FastAPI, HTTPException
from fastapi.responses import FileResponse, JSONResponse
from fastapi.staticfiles import StaticFiles
from pydantic import BaseModel

from .pipeline import (
    InvalidEditError,
    StageBundle,
    edit_scene,
    load_scene,
    run_from_boxes,
    run_full,
    save_scene,
    validate_edit,
)
from .synthdata import CATEGORIES, generate_sample

API_VERSION = 1


@dataclass
class JobRecord:
    job_id: str
    kind: str                  # generate | edit
    status: str = "queued"     # queued | running | done | failed
    scene_id: Optional[str] = None
    progress: float = 0.0
    error: str = ""
    lock: threading.Lock = field(default_factory=threading.Lock, repr=False)

    def update(self, **kw):
        with self.lock:
            if "progress" in kw:
                kw["progress"] = max(self.progress, float(kw["progress"]))
            if self.status in ("done", "failed"):
                return  # terminal states are final
            for k, v in kw.items():
                setattr(self, k, v)

    def to_json(self) -> dict:
        with self.lock:
            return {
                "version": API_VERSION,
                "job_id": self.job_id,
                "kind": self.kind,
                "status": self.status,
                "scene_id": self.scene_id,
                "progress": self.progress,
                "error": self.error,
            }


class GenerateRequest(BaseModel):
    category: str
    seed: int = 0
    sample_seed: Optional[int] = None
    from_gt_boxes: bool = False


class EditRequest(BaseModel):
    ops: list
    frozen: list = []
    seed: int = 0


class JobStore:
    def __init__(self):
        self._jobs: dict[str, JobRecord] = {}
        self._by_scene: dict[str, str] = {}
        self._lock = threading.Lock()

    def create(self, kind: str, scene_id: Optional[str] = None) -> JobRecord:
        job = JobRecord(job_id=uuid.uuid4().hex[:12], kind=kind, scene_id=scene_id)
        with self._lock:
            self._jobs[job.job_id] = job
        return job

    def get(self, job_id: str) -> Optional[JobRecord]:
        return self._jobs.get(job_id)

    def running_for_scene(self, scene_id: str) -> bool:
        with self._lock:
            for job in self._jobs.values():
                if job.scene_id == scene_id and job.status in ("queued", "running"):
                    return True
        return False


def create_app(store_dir: str | Path, bundle: StageBundle,
               frontend_dir: str | Path | None = None) -> FastAPI:
    store = Path(store_dir)
    store.mkdir(parents=True, exist_ok=True)
    jobs = JobStore()
    work: queue.Queue = queue.Queue()
    shutdown = threading.Event()

    def scene_dir(scene_id: str) -> Path:
        path = store / scene_id
        if not (path / "scene.json").exists():
            raise HTTPException(404, detail={"version": API_VERSION,
                                             "error": f"unknown scene {scene_id!r}"})
        return path

    def run_job(job: JobRecord, fn):
        job.update(status="running", progress=0.05)
        try:
            state = fn(lambda frac: job.update(progress=frac))
            save_scene(state, store)
            job.update(scene_id=state.scene_id, progress=1.0)
            job.update(status="done")
        except Exception as exc:  # surfaced in the job record, not the server log
            job.update(error=f"{type(exc).__name__}: {exc}")
            job.update(status="failed")

    def worker():
        while not shutdown.is_set():
            try:
                item = work.get(timeout=0.1)
            except queue.Empty:
                continue
            run_job(*item)
            work.task_done()

    @asynccontextmanager
    async def lifespan(app: FastAPI):
        thread = threading.Thread(target=worker, daemon=True, name="sampling-worker")
        thread.start()
        yield
        shutdown.set()
        thread.join(timeout=2.0)

    app = FastAPI(lifespan=lifespan)

    @app.exception_handler(HTTPException)
    async def flat_errors(_, exc: HTTPException):
        detail = exc.detail if isinstance(exc.detail, dict) else {
            "version": API_VERSION, "error": str(exc.detail)}
        return JSONResponse(detail, status_code=exc.status_code)

    @app.post("/api/generate")
    def post_generate(req: GenerateRequest):
        if req.category not in CATEGORIES:
            raise HTTPException(422, detail={"version": API_VERSION,
                                             "error": f"unknown category {req.category!r}"})
        condition = {"category": req.category,
                     "sample_seed": req.sample_seed if req.sample_seed is not None else req.seed}
        job = jobs.create("generate")

        def fn(progress):
            scene_id = f"{condition['category']}-{condition['sample_seed']}-s{req.seed}-{job.job_id}"
            if req.from_gt_boxes:
                gt = generate_sample(condition["sample_seed"], condition["category"])
                return run_from_boxes(bundle, condition, gt.boxes(), req.seed,
                                      scene_id=scene_id,
                                      part_ids=[p.part_id for p in gt.parts],
                                      progress=progress)
            return run_full(bundle, condition, req.seed, scene_id=scene_id,
                            progress=progress)

        work.put((job, fn))
        return JSONResponse(job.to_json(), status_code=202)

    @app.get("/api/jobs/{job_id}")
    def get_job(job_id: str):
        job = jobs.get(job_id)
        if job is None:
            raise HTTPException(404, detail={"version": API_VERSION,
                                             "error": f"unknown job {job_id!r}"})
        return job.to_json()

    @app.get("/api/scenes/{scene_id}")
    def get_scene(scene_id: str):
        payload = json.loads((scene_dir(scene_id) / "scene.json").read_text())
        payload["version"] = API_VERSION
        return payload

    @app.get("/api/scenes/{scene_id}/parts/{part_id}/mesh")
    def get_part_mesh(scene_id: str, part_id: int):
        path = scene_dir(scene_id)
        meta = json.loads((path / "scene.json").read_text())
        for entry in meta["parts"]:
            if entry["part_id"] == part_id:
                if not entry["mesh"]:
                    raise HTTPException(404, detail={"version": API_VERSION,
                                                     "error": f"part {part_id} has no mesh (empty)"})
                return FileResponse(path / entry["mesh"], media_type="application/octet-stream")
        raise HTTPException(404, detail={"version": API_VERSION,
                                         "error": f"unknown part {part_id} in scene {scene_id!r}"})

    @app.post("/api/scenes/{scene_id}/edit")
    def post_edit(scene_id: str, req: EditRequest):
        path = scene_dir(scene_id)
        if jobs.running_for_scene(scene_id):
            raise HTTPException(409, detail={"version": API_VERSION,
                                             "error": f"scene {scene_id!r} has a running job"})
        state = load_scene(path)
        try:
            validate_edit(state, req.ops, req.frozen)
        except InvalidEditError as exc:
            raise HTTPException(422, detail={"version": API_VERSION, "error": str(exc)})
        job = jobs.create("edit", scene_id=scene_id)

        def fn(progress):
            fresh = load_scene(path)
            return edit_scene(bundle, fresh, req.ops, req.frozen, req.seed,
                              scene_id=scene_id, progress=progress)

        work.put((job, fn))
        return JSONResponse(job.to_json(), status_code=202)

    if frontend_dir is not None and Path(frontend_dir).exists():
        app.mount("/", StaticFiles(directory=str(frontend_dir), html=True), name="ui")

    return app
