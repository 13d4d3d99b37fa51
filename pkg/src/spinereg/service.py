"""HTTP session service for the interactive labeling UI.

Sessions are in-memory and ephemeral: each holds a spine model, a scene
cloud with its spatial index, the current articulated pose, a bounded
undo stack, and at most one running job (optimization or ICP). Pose
mutations are serialized by a per-session lock; the optimizer runs in a
background thread and publishes progress events consumed as a
newline-delimited JSON stream.

Geometry payloads for rendering are voxel-downsampled and encoded as
base64 little-endian float32 triples.
"""

from __future__ import annotations

import base64
import json
import queue
import threading
import uuid
from pathlib import Path
from typing import List, Optional

import numpy as np
from fastapi import FastAPI, HTTPException
from fastapi.responses import StreamingResponse
from pydantic import BaseModel, Field

from .errors import DegenerateGeometryError, SpineRegError
from .geometry import NeighborIndex, PointCloud, RigidTransform, estimate_normals, load_cloud
from .kinematics import (
    ArticulatedPose, AXIS_NAMES, SpineModel, clamp_pose, deform_mesh,
    forward_kinematics, load_model,
)
from .labels import SequenceRecord, propagate_labels, save_label
from .registration import (
    MeshSampleCache, OptimizerConfig, coarse_align_landmarks, encode_pose,
    icp_refine, objective, optimize_pose,
)

UNDO_LIMIT = 100
RENDER_VOXEL_MM = 2.0


def _b64_f32(points: np.ndarray) -> str:
    return base64.b64encode(points.astype("<f4").tobytes()).decode("ascii")


def voxel_downsample(points: np.ndarray, voxel: float) -> np.ndarray:
    """One representative point per occupied voxel (first hit wins)."""
    if len(points) == 0:
        return points
    keys = np.floor(points / voxel).astype(np.int64)
    _, first = np.unique(keys, axis=0, return_index=True)
    return points[np.sort(first)]


class Session:
    def __init__(self, session_id: str, model: SpineModel, scene: PointCloud):
        self.id = session_id
        self.model = model
        self.scene = scene
        self.scene_index = NeighborIndex(scene)
        self.pose = ArticulatedPose.zero(model)
        self.undo_stack: List[ArticulatedPose] = []
        self.lock = threading.Lock()
        self.job: Optional[dict] = None  # {id, kind, queue, done}
        self.cache = MeshSampleCache.build(model, 4000, seed=0)

    def metrics(self, corr_threshold: float = 8.0):
        return objective(self.model, encode_pose(self.model, self.pose),
                         self.scene, self.scene_index, corr_threshold, self.cache)

    def push_undo(self):
        self.undo_stack.append(self.pose)
        if len(self.undo_stack) > UNDO_LIMIT:
            self.undo_stack.pop(0)


class CreateSessionRequest(BaseModel):
    model_file: str
    cloud_file: str
    normals_viewpoint: List[float] = Field(default=[0.0, 0.0, 0.0])


class JointEditRequest(BaseModel):
    joint: int
    axis: str
    angle_rad: float


class GlobalEditRequest(BaseModel):
    rotation: List[List[float]]
    translation_mm: List[float]


class CoarseAlignRequest(BaseModel):
    pairs: List[dict]  # {"mesh": [x,y,z], "scene": [x,y,z]}


class OptimizeRequest(BaseModel):
    config: dict = Field(default_factory=dict)


class IcpRequest(BaseModel):
    threshold_mm: float = 10.0
    max_iterations: int = 50
    sample_count: int = 8000


class SaveLabelRequest(BaseModel):
    path: str
    sequence_id: str = "session"
    exposure: int = 0


def create_app() -> FastAPI:
    app = FastAPI(title="spinereg labeling service", version="1")
    sessions: dict = {}
    sessions_lock = threading.Lock()

    def get_session(session_id: str) -> Session:
        with sessions_lock:
            session = sessions.get(session_id)
        if session is None:
            raise HTTPException(status_code=404, detail=f"unknown session {session_id}")
        return session

    def pose_payload(session: Session) -> dict:
        report = session.metrics()
        return {
            "pose": session.pose.to_json_dict(),
            "metrics": {
                "corr_ratio": report.corr_ratio,
                "containment": report.containment,
                "combined": report.combined,
            },
        }

    @app.post("/sessions")
    def create_session(req: CreateSessionRequest):
        try:
            model = load_model(req.model_file)
            scene = load_cloud(req.cloud_file)
            if scene.normals is None:
                scene = estimate_normals(scene, k=30, viewpoint=req.normals_viewpoint)
        except (SpineRegError, FileNotFoundError, ValueError) as exc:
            raise HTTPException(status_code=400, detail=str(exc))
        session_id = uuid.uuid4().hex[:12]
        with sessions_lock:
            sessions[session_id] = Session(session_id, model, scene)
        return {"session_id": session_id}

    @app.get("/sessions/{session_id}")
    def get_state(session_id: str):
        session = get_session(session_id)
        with session.lock:
            payload = pose_payload(session)
            payload.update({
                "session_id": session.id,
                "job_state": session.job["kind"] if session.job else "idle",
                "undo_depth": len(session.undo_stack),
                "model": {
                    "labels": list(session.model.labels),
                    "joints": [
                        {
                            "position_mm": j.position.tolist(),
                            "axes": {name: axis.tolist()
                                     for name, axis in zip(AXIS_NAMES, j.axes)},
                            "limits_rad": {name: j.limits[i].tolist()
                                           for i, name in enumerate(AXIS_NAMES)},
                        }
                        for j in session.model.joints
                    ],
                },
            })
        return payload

    @app.get("/sessions/{session_id}/geometry")
    def get_geometry(session_id: str, voxel_mm: float = RENDER_VOXEL_MM,
                     containment: bool = False):
        session = get_session(session_id)
        with session.lock:
            scene_pts = voxel_downsample(session.scene.positions, voxel_mm)
            mesh = deform_mesh(session.model, session.pose)
            mesh_pts = voxel_downsample(mesh.vertices, voxel_mm)
            payload = {
                "scene": {"count": len(scene_pts), "positions_b64": _b64_f32(scene_pts)},
                "mesh": {"count": len(mesh_pts), "positions_b64": _b64_f32(mesh_pts)},
            }
            if session.scene.colors is not None:
                keys = np.floor(session.scene.positions / voxel_mm).astype(np.int64)
                _, first = np.unique(keys, axis=0, return_index=True)
                colors = session.scene.colors[np.sort(first)]
                payload["scene"]["colors_b64"] = _b64_f32(colors)
            if containment:
                transforms = forward_kinematics(session.model, session.pose)
                sample_pts = session.cache.deformed(transforms)
                dist, idx = session.scene_index.query(sample_pts)
                v = session.scene.positions[np.minimum(idx, len(session.scene) - 1)] - sample_pts
                n = session.scene.normals[np.minimum(idx, len(session.scene) - 1)]
                above = (np.einsum("ij,ij->i", n, v) < 0.0).astype(np.uint8)
                payload["containment"] = {
                    "count": len(sample_pts),
                    "positions_b64": _b64_f32(sample_pts),
                    "above_b64": base64.b64encode(above.tobytes()).decode("ascii"),
                }
        return payload

    def apply_pose_edit(session: Session, new_pose: ArticulatedPose) -> dict:
        if session.job is not None:
            raise HTTPException(status_code=409, detail="a job is running; edits are rejected")
        session.push_undo()
        session.pose = clamp_pose(session.model, new_pose)
        return pose_payload(session)

    @app.post("/sessions/{session_id}/joint")
    def set_joint(session_id: str, req: JointEditRequest):
        session = get_session(session_id)
        with session.lock:
            if not 0 <= req.joint < session.model.n_joints:
                raise HTTPException(status_code=400,
                                    detail=f"joint {req.joint} outside 0..{session.model.n_joints - 1}")
            if req.axis not in AXIS_NAMES:
                raise HTTPException(status_code=400,
                                    detail=f"axis must be one of {AXIS_NAMES}")
            angles = session.pose.joint_angles.copy()
            angles[req.joint, AXIS_NAMES.index(req.axis)] = req.angle_rad
            return apply_pose_edit(session, ArticulatedPose(angles, session.pose.global_transform))

    @app.post("/sessions/{session_id}/global")
    def set_global(session_id: str, req: GlobalEditRequest):
        session = get_session(session_id)
        with session.lock:
            try:
                transform = RigidTransform(np.asarray(req.rotation, dtype=float),
                                           np.asarray(req.translation_mm, dtype=float))
            except ValueError as exc:
                raise HTTPException(status_code=400, detail=str(exc))
            return apply_pose_edit(session, session.pose.with_global(transform))

    @app.post("/sessions/{session_id}/coarse-align")
    def coarse_align(session_id: str, req: CoarseAlignRequest):
        session = get_session(session_id)
        with session.lock:
            try:
                pre = np.array([p["mesh"] for p in req.pairs], dtype=float)
                intra = np.array([p["scene"] for p in req.pairs], dtype=float)
                transform = coarse_align_landmarks(pre, intra)
            except (KeyError, ValueError, DegenerateGeometryError) as exc:
                raise HTTPException(status_code=400, detail=str(exc))
            payload = apply_pose_edit(session, session.pose.with_global(transform))
            payload["transform"] = {
                "rotation": transform.rotation.tolist(),
                "translation_mm": transform.translation.tolist(),
            }
            return payload

    @app.post("/sessions/{session_id}/optimize")
    def start_optimize(session_id: str, req: OptimizeRequest):
        session = get_session(session_id)
        with session.lock:
            if session.job is not None:
                raise HTTPException(status_code=409, detail="a job is already running")
            try:
                cfg = OptimizerConfig.from_json(json.dumps(req.config)) if req.config \
                    else OptimizerConfig(basinhop_iterations=5, sample_count=4000,
                                         smooth_correspondences=True)
            except (TypeError, ValueError) as exc:
                raise HTTPException(status_code=400, detail=str(exc))
            job = {"id": uuid.uuid4().hex[:12], "kind": "optimizing",
                   "queue": queue.Queue(), "done": threading.Event()}
            session.job = job

        def worker():
            try:
                pose, _ = optimize_pose(session.model, session.scene, session.pose,
                                        cfg, on_progress=lambda p: job["queue"].put({
                                            "job_id": job["id"],
                                            "iteration": p.iteration,
                                            "combined": p.combined,
                                            "corr_ratio": p.corr_ratio,
                                            "containment": p.containment,
                                            "elapsed_ms": p.elapsed_ms,
                                            "done": False,
                                        }))
                with session.lock:
                    session.push_undo()
                    session.pose = pose
            except SpineRegError as exc:
                job["queue"].put({"job_id": job["id"], "error": str(exc), "done": True})
            finally:
                job["queue"].put({"job_id": job["id"], "done": True})
                with session.lock:
                    session.job = None
                job["done"].set()

        threading.Thread(target=worker, daemon=True).start()
        return {"job_id": job["id"]}

    @app.get("/sessions/{session_id}/progress")
    def stream_progress(session_id: str):
        session = get_session(session_id)
        job = session.job
        if job is None:
            raise HTTPException(status_code=404, detail="no running job")

        def events():
            while True:
                try:
                    event = job["queue"].get(timeout=60.0)
                except queue.Empty:
                    break
                yield json.dumps(event, sort_keys=True) + "\n"
                if event.get("done"):
                    break

        return StreamingResponse(events(), media_type="application/x-ndjson")

    @app.post("/sessions/{session_id}/icp")
    def run_icp(session_id: str, req: IcpRequest):
        session = get_session(session_id)
        with session.lock:
            if session.job is not None:
                raise HTTPException(status_code=409, detail="a job is already running")
            session.job = {"id": uuid.uuid4().hex[:12], "kind": "icp-running",
                           "queue": queue.Queue(), "done": threading.Event()}
        try:
            from .geometry import sample_surface
            mesh = deform_mesh(session.model, session.pose)
            sample = sample_surface(mesh, req.sample_count, seed=0)
            report = icp_refine(sample, session.scene_index, req.threshold_mm,
                                req.max_iterations)
            with session.lock:
                session.push_undo()
                session.pose = session.pose.with_global(
                    report.transform.compose(session.pose.global_transform))
                payload = pose_payload(session)
            payload["icp"] = {
                "fitness": report.fitness,
                "inlier_rmse_mm": report.inlier_rmse,
                "iterations": report.iterations,
            }
            return payload
        finally:
            with session.lock:
                session.job = None

    @app.post("/sessions/{session_id}/undo")
    def undo(session_id: str):
        session = get_session(session_id)
        with session.lock:
            if session.job is not None:
                raise HTTPException(status_code=409, detail="a job is running")
            if not session.undo_stack:
                raise HTTPException(status_code=400, detail="undo stack is empty")
            session.pose = session.undo_stack.pop()
            return pose_payload(session)

    @app.post("/sessions/{session_id}/save-label")
    def save_session_label(session_id: str, req: SaveLabelRequest):
        session = get_session(session_id)
        with session.lock:
            pose = session.pose
            model = session.model
        # The session scene is the reference frame; persist it next to the label.
        out = Path(req.path)
        out.parent.mkdir(parents=True, exist_ok=True)
        from .geometry import save_cloud_ply
        frame_path = out.with_suffix(".frame.ply")
        save_cloud_ply(session.scene, frame_path)
        seq = SequenceRecord(req.sequence_id, (str(frame_path),), 0,
                             exposure=req.exposure or model.n_links)
        label = propagate_labels(model, seq, pose, model_ref="session",
                                 sample_count=4000, sample_seed=0)
        save_label(label, out)
        return {"label_path": str(out)}

    return app
