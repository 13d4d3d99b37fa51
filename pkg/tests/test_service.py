import base64
import json

import numpy as np
import pytest
from fastapi.testclient import TestClient

from spinereg.geometry import estimate_normals, sample_surface, save_cloud_ply
from spinereg.kinematics import ArticulatedPose, deform_mesh, save_model
from spinereg.labels import load_label
from spinereg.service import create_app, voxel_downsample

from helpers import box_chain


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    root = tmp_path_factory.mktemp("svc")
    model = box_chain(3)
    model_path = save_model(model, root / "model")
    cloud = sample_surface(deform_mesh(model, ArticulatedPose.zero(model)), 3000, seed=1)
    cloud = estimate_normals(cloud, k=16, viewpoint=(0.0, 300.0, 40.0))
    cloud_path = root / "scene.ply"
    save_cloud_ply(cloud, cloud_path)
    return root, str(model_path), str(cloud_path)


@pytest.fixture()
def client(workspace):
    return TestClient(create_app())


def make_session(client, workspace):
    _, model_path, cloud_path = workspace
    resp = client.post("/sessions", json={"model_file": model_path,
                                          "cloud_file": cloud_path})
    assert resp.status_code == 200
    return resp.json()["session_id"]


class TestSessionLifecycle:
    def test_create_and_get_state(self, client, workspace):
        sid = make_session(client, workspace)
        state = client.get(f"/sessions/{sid}").json()
        assert state["job_state"] == "idle"
        assert len(state["model"]["joints"]) == 2
        assert state["metrics"]["combined"] <= 1.0

    def test_unknown_session_404(self, client):
        assert client.get("/sessions/nope").status_code == 404

    def test_bad_files_400(self, client):
        resp = client.post("/sessions", json={"model_file": "/no/such.json",
                                              "cloud_file": "/no/such.ply"})
        assert resp.status_code == 400


class TestPoseEdits:
    def test_set_joint_clamps(self, client, workspace):
        sid = make_session(client, workspace)
        resp = client.post(f"/sessions/{sid}/joint",
                           json={"joint": 0, "axis": "mediolateral",
                                 "angle_rad": 1.0})
        assert resp.status_code == 200
        angle = resp.json()["pose"]["joint_angles_rad"][0][0]
        assert angle == pytest.approx(np.radians(13.0))

    def test_invalid_joint_400(self, client, workspace):
        sid = make_session(client, workspace)
        resp = client.post(f"/sessions/{sid}/joint",
                           json={"joint": 7, "axis": "mediolateral", "angle_rad": 0.1})
        assert resp.status_code == 400

    def test_invalid_axis_400(self, client, workspace):
        sid = make_session(client, workspace)
        resp = client.post(f"/sessions/{sid}/joint",
                           json={"joint": 0, "axis": "sideways", "angle_rad": 0.1})
        assert resp.status_code == 400

    def test_set_global_roundtrip(self, client, workspace):
        sid = make_session(client, workspace)
        resp = client.post(f"/sessions/{sid}/global",
                           json={"rotation": np.eye(3).tolist(),
                                 "translation_mm": [1.0, 2.0, 3.0]})
        assert resp.status_code == 200
        assert resp.json()["pose"]["global"]["translation_mm"] == [1.0, 2.0, 3.0]

    def test_invalid_rotation_400(self, client, workspace):
        sid = make_session(client, workspace)
        bad = np.eye(3); bad_list = bad.tolist(); bad_list[0][1] = 0.5
        resp = client.post(f"/sessions/{sid}/global",
                           json={"rotation": bad_list, "translation_mm": [0, 0, 0]})
        assert resp.status_code == 400

    def test_undo_restores_exact_pose(self, client, workspace):
        sid = make_session(client, workspace)
        before = client.get(f"/sessions/{sid}").json()["pose"]
        client.post(f"/sessions/{sid}/joint",
                    json={"joint": 0, "axis": "anteroposterior", "angle_rad": 0.05})
        client.post(f"/sessions/{sid}/joint",
                    json={"joint": 1, "axis": "longitudinal", "angle_rad": 0.02})
        client.post(f"/sessions/{sid}/undo")
        resp = client.post(f"/sessions/{sid}/undo")
        assert resp.json()["pose"] == before

    def test_undo_empty_400(self, client, workspace):
        sid = make_session(client, workspace)
        assert client.post(f"/sessions/{sid}/undo").status_code == 400

    def test_coarse_align_sets_global(self, client, workspace):
        sid = make_session(client, workspace)
        pairs = [{"mesh": [0, 0, 0], "scene": [1, 0, 0]},
                 {"mesh": [10, 0, 0], "scene": [11, 0, 0]},
                 {"mesh": [0, 10, 0], "scene": [1, 10, 0]},
                 {"mesh": [0, 0, 10], "scene": [1, 0, 10]}]
        resp = client.post(f"/sessions/{sid}/coarse-align", json={"pairs": pairs})
        assert resp.status_code == 200
        assert resp.json()["transform"]["translation_mm"] == pytest.approx([1.0, 0.0, 0.0])

    def test_collinear_landmarks_400(self, client, workspace):
        sid = make_session(client, workspace)
        pairs = [{"mesh": [i, 0, 0], "scene": [i, 0, 0]} for i in range(3)]
        resp = client.post(f"/sessions/{sid}/coarse-align", json={"pairs": pairs})
        assert resp.status_code == 400


class TestJobs:
    def optimize_config(self):
        return {"basinhop_iterations": 1, "inner_max_iters": 5,
                "sample_count": 600, "smooth_correspondences": True,
                "seed": 3}

    def test_optimize_streams_monotone_progress(self, client, workspace):
        sid = make_session(client, workspace)
        resp = client.post(f"/sessions/{sid}/optimize",
                           json={"config": self.optimize_config()})
        assert resp.status_code == 200
        job_id = resp.json()["job_id"]
        events = []
        with client.stream("GET", f"/sessions/{sid}/progress") as stream:
            for line in stream.iter_lines():
                if line:
                    events.append(json.loads(line))
        assert events[-1]["done"] is True
        combined = [e["combined"] for e in events if not e.get("done")]
        assert combined == sorted(combined, reverse=True)
        assert all(e["job_id"] == job_id for e in events)
        # job finished: session is idle again
        assert client.get(f"/sessions/{sid}").json()["job_state"] == "idle"

    def test_concurrent_job_409(self, client, workspace):
        sid = make_session(client, workspace)
        assert client.post(f"/sessions/{sid}/optimize",
                           json={"config": self.optimize_config()}).status_code == 200
        second = client.post(f"/sessions/{sid}/optimize",
                             json={"config": self.optimize_config()})
        edit = client.post(f"/sessions/{sid}/joint",
                           json={"joint": 0, "axis": "mediolateral", "angle_rad": 0.1})
        # drain the stream so the worker finishes cleanly
        with client.stream("GET", f"/sessions/{sid}/progress") as stream:
            for _ in stream.iter_lines():
                pass
        assert second.status_code == 409
        assert edit.status_code == 409

    def test_icp_applies_transform(self, client, workspace):
        sid = make_session(client, workspace)
        resp = client.post(f"/sessions/{sid}/icp",
                           json={"threshold_mm": 10.0, "max_iterations": 10,
                                 "sample_count": 1500})
        assert resp.status_code == 200
        body = resp.json()
        assert 0.0 <= body["icp"]["fitness"] <= 1.0
        assert body["icp"]["inlier_rmse_mm"] >= 0.0


class TestGeometryPayload:
    def test_positions_decode(self, client, workspace):
        sid = make_session(client, workspace)
        payload = client.get(f"/sessions/{sid}/geometry").json()
        raw = base64.b64decode(payload["scene"]["positions_b64"])
        arr = np.frombuffer(raw, dtype="<f4").reshape(-1, 3)
        assert len(arr) == payload["scene"]["count"]
        assert len(arr) > 0

    def test_containment_payload(self, client, workspace):
        sid = make_session(client, workspace)
        payload = client.get(f"/sessions/{sid}/geometry",
                             params={"containment": "true"}).json()
        above = np.frombuffer(base64.b64decode(payload["containment"]["above_b64"]),
                              dtype=np.uint8)
        assert len(above) == payload["containment"]["count"]
        assert set(np.unique(above)).issubset({0, 1})

    def test_voxel_downsample_spacing(self):
        rng = np.random.default_rng(8)
        pts = rng.uniform(0, 20, (5000, 3))
        out = voxel_downsample(pts, 2.0)
        assert len(out) < len(pts)
        keys = np.floor(out / 2.0).astype(int)
        assert len(np.unique(keys, axis=0)) == len(out)


class TestSaveLabel:
    def test_roundtrip(self, client, workspace, tmp_path):
        root, model_path, cloud_path = workspace
        sid = make_session(client, workspace)
        client.post(f"/sessions/{sid}/joint",
                    json={"joint": 0, "axis": "mediolateral", "angle_rad": 0.05})
        out = tmp_path / "session.label.json"
        resp = client.post(f"/sessions/{sid}/save-label", json={"path": str(out)})
        assert resp.status_code == 200
        label = load_label(resp.json()["label_path"])
        assert label.pose.joint_angles[0, 0] == pytest.approx(0.05)
