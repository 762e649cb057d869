"""HTTP service backing the dual-view annotation tool.

Serves task pairs (two projections of one scene), the screw outline for
client-side overlay, and scores submitted poses against ground truth with
the same metric code the experiments use. Ground truth never leaves the
server before a submission is scored (and, in study mode, not before the
session is closed).

Records append to a JSON-lines file guarded by a file lock; suitable for
a handful of concurrent annotators.
"""

from __future__ import annotations

import io
import json
import time
from pathlib import Path

import numpy as np
from fastapi import FastAPI, HTTPException, Response
from fastapi.staticfiles import StaticFiles
from filelock import FileLock
from pydantic import BaseModel, Field

from .experiments import Dataset
from .geometry import (
    GeometryError,
    WorldPose,
    forward_angle_error,
    position_error_mm,
    project_point,
    vec3,
    world_to_image_pose,
)
from .phantom import screw_outline
from .renderer import window_to_8bit


class PoseIn(BaseModel):
    origin: list[float] = Field(min_length=3, max_length=3)
    axis: list[float] = Field(min_length=3, max_length=3)
    roll_deg: float = 0.0


class SubmissionIn(BaseModel):
    annotator: str
    pose: PoseIn
    attempt: int | None = None
    started_at: float | None = None


class Task:
    def __init__(self, task_id, record, split, view_indices):
        self.task_id = task_id
        self.record = record
        self.split = split
        self.view_indices = view_indices


class AnnotationStore:
    """Append-only JSON-lines store; one line per (task, annotator, attempt)."""

    def __init__(self, path: Path):
        self.path = Path(path)
        self.path.parent.mkdir(parents=True, exist_ok=True)
        self.lock = FileLock(str(self.path) + ".lock")

    def records(self) -> list[dict]:
        if not self.path.exists():
            return []
        out = []
        with open(self.path) as f:
            for line in f:
                line = line.strip()
                if line:
                    out.append(json.loads(line))
        return out

    def append(self, record: dict) -> None:
        with self.lock:
            with open(self.path, "a") as f:
                f.write(json.dumps(record, sort_keys=True) + "\n")

    def has_attempt(self, task_id: str, annotator: str, attempt: int) -> bool:
        return any(r["task_id"] == task_id and r["annotator"] == annotator
                   and r["attempt"] == attempt for r in self.records())

    def next_attempt(self, task_id: str, annotator: str) -> int:
        attempts = [r["attempt"] for r in self.records()
                    if r["task_id"] == task_id and r["annotator"] == annotator]
        return max(attempts) + 1 if attempts else 0


CSV_HEADER = ("task_id,annotator,attempt,view,pos_err_mm,fwd_angle_err_deg,"
              "tilt_gt_deg,ts_start,ts_submit")


def score_pose(task: Task, dataset: Dataset, pose: WorldPose) -> list[dict]:
    """Per-view errors of a submitted pose; raises GeometryError if unusable."""
    out = []
    for view in task.view_indices:
        g = dataset.geometry(task.split, view)
        sub_ip = world_to_image_pose(pose, g)  # raises if not projectable
        gt_ip = task.record.views[view].image_pose
        out.append({
            "view": view,
            "pos_err_mm": position_error_mm(task.record.world_pose,
                                            (sub_ip.u, sub_ip.v), g),
            "fwd_angle_err_deg": forward_angle_error(gt_ip.alpha_deg,
                                                     sub_ip.alpha_deg),
            "tilt_gt_deg": gt_ip.tilt_deg,
            "x_instr": [sub_ip.u, sub_ip.v],
            "alpha_deg": sub_ip.alpha_deg,
        })
    return out


def create_app(cfg: dict, dataset: Dataset | None = None,
               frontend_dir: str | Path | None = None) -> FastAPI:
    if dataset is None:
        dataset = Dataset.load(cfg["dataset"]["out_dir"])
    if "expert" not in dataset.splits or not dataset.splits["expert"]:
        raise ValueError("dataset has no expert split to annotate")
    serve_cfg = cfg["serve"]
    mode = serve_cfg.get("mode", "practice")
    if mode not in ("practice", "study"):
        raise ValueError(f"unknown serve mode: {mode}")
    store = AnnotationStore(Path(serve_cfg["records"]))

    split = "expert"
    n_views = len(dataset.view_geometries[split])
    tasks: dict[str, Task] = {}
    for rec in dataset.splits[split]:
        for pair in range(max(n_views - 1, 1)):
            views = (0, pair + 1) if n_views > 1 else (0,)
            task_id = f"{rec.image_id}_p{pair}"
            tasks[task_id] = Task(task_id, rec, split, views)
    task_order = sorted(tasks)

    window = serve_cfg.get("window") or (dataset.lo, dataset.hi)

    # windowed 8-bit PNGs, rendered once at startup
    png_cache: dict[str, bytes] = {}
    from PIL import Image
    for rec in dataset.splits[split]:
        for v_idx, _ in enumerate(rec.views):
            pixels = dataset.load_pixels(split, rec, v_idx)
            img = Image.fromarray(window_to_8bit(pixels, window[0], window[1]))
            buf = io.BytesIO()
            img.save(buf, format="PNG")
            suffix = f"_v{v_idx}" if len(rec.views) > 1 else ""
            png_cache[f"{rec.image_id}{suffix}"] = buf.getvalue()

    app = FastAPI(title="screwpose annotation service")
    state = {"closed": False}

    def errors_visible() -> bool:
        return mode == "practice" or state["closed"]

    @app.get("/api/tasks")
    def list_tasks(annotator: str = ""):
        done = {(r["task_id"], r["annotator"]) for r in store.records()}
        return [{
            "task_id": tid,
            "status": "done" if (tid, annotator) in done else "pending",
        } for tid in task_order]

    @app.get("/api/tasks/{task_id}")
    def get_task(task_id: str):
        task = tasks.get(task_id)
        if task is None:
            raise HTTPException(status_code=404, detail="unknown task")
        views = []
        for view in task.view_indices:
            suffix = f"_v{view}" if len(task.record.views) > 1 else ""
            views.append({
                "image_id": f"{task.record.image_id}{suffix}",
                "image_url": f"/api/images/{task.record.image_id}{suffix}.png",
                "geometry": dataset.geometry(task.split, view).to_json(),
            })
        return {
            "task_id": task_id,
            "screw_id": "default",
            "mode": mode,
            "views": views,
        }

    @app.get("/api/images/{image_id}.png")
    def get_image(image_id: str):
        data = png_cache.get(image_id)
        if data is None:
            raise HTTPException(status_code=404, detail="unknown image")
        return Response(content=data, media_type="image/png")

    @app.get("/api/screw/{screw_id}")
    def get_screw(screw_id: str):
        if screw_id != "default":
            raise HTTPException(status_code=404, detail="unknown screw")
        return {
            "outline": screw_outline(dataset.screw).tolist(),
            "dimensions": dataset.screw.to_json(),
        }

    @app.post("/api/tasks/{task_id}/annotations")
    def submit(task_id: str, body: SubmissionIn):
        task = tasks.get(task_id)
        if task is None:
            raise HTTPException(status_code=404, detail="unknown task")
        try:
            pose = WorldPose(vec3(body.pose.origin),
                             vec3(body.pose.axis) /
                             np.linalg.norm(body.pose.axis),
                             body.pose.roll_deg)
            scored = score_pose(task, dataset, pose)
        except (GeometryError, ValueError, ZeroDivisionError) as exc:
            raise HTTPException(status_code=400,
                                detail=f"invalid pose: {exc}")
        attempt = (body.attempt if body.attempt is not None
                   else store.next_attempt(task_id, body.annotator))
        if store.has_attempt(task_id, body.annotator, attempt):
            raise HTTPException(status_code=409,
                                detail=f"attempt {attempt} already submitted")
        record = {
            "task_id": task_id,
            "annotator": body.annotator,
            "attempt": attempt,
            "pose": pose.to_json(),
            "ts_start": body.started_at,
            "ts_submit": time.time(),
            "views": scored,
        }
        store.append(record)
        response = {k: record[k] for k in
                    ("task_id", "annotator", "attempt", "ts_start", "ts_submit")}
        if errors_visible():
            response["views"] = scored
        return response

    @app.post("/api/session/close")
    def close_session():
        state["closed"] = True
        return {"closed": True}

    @app.get("/api/results.csv")
    def results_csv():
        lines = [CSV_HEADER]
        for r in store.records():
            for v in r["views"]:
                lines.append(",".join([
                    r["task_id"], r["annotator"], str(r["attempt"]),
                    str(v["view"]), repr(float(v["pos_err_mm"])),
                    repr(float(v["fwd_angle_err_deg"])),
                    repr(float(v["tilt_gt_deg"])),
                    "" if r["ts_start"] is None else repr(float(r["ts_start"])),
                    repr(float(r["ts_submit"])),
                ]))
        return Response(content="\n".join(lines) + "\n",
                        media_type="text/csv")

    @app.get("/api/selftest")
    def selftest():
        if mode != "practice":
            raise HTTPException(status_code=404,
                                detail="self test only in practice mode")
        task_id = task_order[0]
        task = tasks[task_id]
        return {
            "task_id": task_id,
            "pose": task.record.world_pose.to_json(),
            "image_poses": [
                task.record.views[v].image_pose.to_json()
                for v in task.view_indices],
        }

    if frontend_dir is None:
        candidate = Path(__file__).resolve().parents[2] / "frontend" / "dist"
        frontend_dir = candidate if candidate.exists() else None
    if frontend_dir is not None and Path(frontend_dir).exists():
        app.mount("/", StaticFiles(directory=str(frontend_dir), html=True),
                  name="frontend")

    return app
