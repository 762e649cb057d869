import io
import json

import numpy as np
import pytest
from fastapi.testclient import TestClient
from PIL import Image

from screwpose.config import apply_overrides
from screwpose.experiments import generate_dataset
from screwpose.geometry import (
    ProjectionGeometry,
    WorldPose,
    forward_angle_error,
    position_error_mm,
    project_point,
    vec3,
    world_to_image_pose,
)
from screwpose.service import create_app

from test_experiments import micro_config


@pytest.fixture(scope="module")
def service_env(tmp_path_factory):
    root = tmp_path_factory.mktemp("svc")
    cfg = micro_config(root)
    ds = generate_dataset(cfg)
    return root, cfg, ds


def make_client(service_env, mode="practice", name="records"):
    root, cfg, ds = service_env
    cfg = apply_overrides(cfg, [
        f"serve.records={root / (name + '.jsonl')}",
        f"serve.mode={mode}",
    ])
    app = create_app(cfg, dataset=ds)
    return TestClient(app), ds


def gt_of(ds, task_id):
    image_id = task_id.rsplit("_p", 1)[0]
    for rec in ds.splits["expert"]:
        if rec.image_id == image_id:
            return rec
    raise KeyError(task_id)


class TestTaskEndpoints:
    def test_task_list_all_pending_then_done_per_annotator(self, service_env):
        client, ds = make_client(service_env, name="rec_list")
        tasks = client.get("/api/tasks", params={"annotator": "a1"}).json()
        assert len(tasks) == len(ds.splits["expert"])  # one pair per scene
        assert all(t["status"] == "pending" for t in tasks)

        rec = gt_of(ds, tasks[0]["task_id"])
        body = {"annotator": "a1",
                "pose": {"origin": list(map(float, rec.world_pose.origin)),
                         "axis": list(map(float, rec.world_pose.axis))}}
        r = client.post(f"/api/tasks/{tasks[0]['task_id']}/annotations",
                        json=body)
        assert r.status_code == 200

        after = client.get("/api/tasks", params={"annotator": "a1"}).json()
        assert after[0]["status"] == "done"
        other = client.get("/api/tasks", params={"annotator": "a2"}).json()
        assert other[0]["status"] == "pending"

    def test_task_json_has_geometry_but_no_ground_truth(self, service_env):
        client, ds = make_client(service_env, name="rec_secret")
        tasks = client.get("/api/tasks").json()
        body = client.get(f"/api/tasks/{tasks[0]['task_id']}").json()
        assert len(body["views"]) == 2

        def all_keys(node):
            if isinstance(node, dict):
                for k, v in node.items():
                    yield k
                    yield from all_keys(v)
            elif isinstance(node, list):
                for v in node:
                    yield from all_keys(v)

        secrets = {"world_pose", "image_pose", "x_instr", "alpha_deg",
                   "tilt_deg", "origin", "axis", "roll_deg",
                   "out_of_plane_sign", "depth_mm"}
        leaked = secrets & set(all_keys(body))
        assert not leaked, f"ground-truth fields leaked: {leaked}"
        g = ProjectionGeometry.from_json(body["views"][0]["geometry"])
        assert g.image_width == ds.geometry("expert", 0).image_width

    def test_unknown_ids_404(self, service_env):
        client, _ = make_client(service_env, name="rec_404")
        assert client.get("/api/tasks/nope").status_code == 404
        assert client.get("/api/images/nope.png").status_code == 404
        assert client.get("/api/screw/nope").status_code == 404

    def test_png_dimensions_match_geometry(self, service_env):
        client, ds = make_client(service_env, name="rec_png")
        tasks = client.get("/api/tasks").json()
        body = client.get(f"/api/tasks/{tasks[0]['task_id']}").json()
        r = client.get(body["views"][0]["image_url"])
        assert r.status_code == 200
        img = Image.open(io.BytesIO(r.content))
        g = ds.geometry("expert", 0)
        assert img.size == (g.image_width, g.image_height)

    def test_screw_outline_endpoint(self, service_env):
        client, ds = make_client(service_env, name="rec_screw")
        body = client.get("/api/screw/default").json()
        outline = np.array(body["outline"])
        assert outline.shape[1] == 2
        assert body["dimensions"]["shaft_length"] == ds.screw.shaft_length

    def test_projected_gt_lands_on_rendered_screw(self, service_env):
        # cross-component: geometry JSON + PNG must agree with the renderer
        client, ds = make_client(service_env, name="rec_xcomp")
        tasks = client.get("/api/tasks").json()
        task_id = tasks[0]["task_id"]
        body = client.get(f"/api/tasks/{task_id}").json()
        rec = gt_of(ds, task_id)
        for k, view in enumerate(body["views"]):
            g = ProjectionGeometry.from_json(view["geometry"])
            u, v = project_point(rec.world_pose.origin, g)
            gt_ip = rec.views[k].image_pose
            assert abs(u - gt_ip.u) < 1e-9
            assert abs(v - gt_ip.v) < 1e-9
            r = client.get(view["image_url"])
            arr = np.asarray(Image.open(io.BytesIO(r.content)), dtype=float)
            iu, iv = int(round(u)), int(round(v))
            # metal absorbs: the windowed display is darker at the screw
            border = float(arr[2:6, 2:6].mean())
            assert arr[iv, iu] < border - 30


class TestSubmission:
    def test_ground_truth_scores_zero(self, service_env):
        client, ds = make_client(service_env, name="rec_zero")
        tasks = client.get("/api/tasks").json()
        task_id = tasks[0]["task_id"]
        rec = gt_of(ds, task_id)
        body = {"annotator": "a1",
                "pose": {"origin": list(map(float, rec.world_pose.origin)),
                         "axis": list(map(float, rec.world_pose.axis))}}
        r = client.post(f"/api/tasks/{task_id}/annotations", json=body).json()
        for view in r["views"]:
            assert abs(view["pos_err_mm"]) < 1e-9
            assert abs(view["fwd_angle_err_deg"]) < 1e-9

    def test_one_mm_parallel_offset_scores_one_mm(self, service_env):
        client, ds = make_client(service_env, name="rec_1mm")
        tasks = client.get("/api/tasks").json()
        task_id = tasks[0]["task_id"]
        rec = gt_of(ds, task_id)
        g = ds.geometry("expert", 0)
        offset_pose = WorldPose(rec.world_pose.origin + 1.0 * g.detector_u,
                                rec.world_pose.axis)
        body = {"annotator": "a1",
                "pose": {"origin": list(map(float, offset_pose.origin)),
                         "axis": list(map(float, offset_pose.axis))}}
        r = client.post(f"/api/tasks/{task_id}/annotations", json=body).json()
        view0 = [v for v in r["views"] if v["view"] == 0][0]
        assert view0["pos_err_mm"] == pytest.approx(1.0, abs=1e-9)

    def test_random_submissions_match_offline_recompute(self, service_env):
        client, ds = make_client(service_env, name="rec_oracle")
        tasks = client.get("/api/tasks").json()
        rng = np.random.default_rng(5)
        for task in tasks:
            rec = gt_of(ds, task["task_id"])
            pose = WorldPose(rec.world_pose.origin + rng.normal(0, 3, 3),
                             rec.world_pose.axis)
            body = {"annotator": "a9",
                    "pose": {"origin": list(map(float, pose.origin)),
                             "axis": list(map(float, pose.axis))}}
            got = client.post(f"/api/tasks/{task['task_id']}/annotations",
                              json=body).json()
            for k, view in enumerate(got["views"]):
                g = ds.geometry("expert", view["view"])
                sub_ip = world_to_image_pose(pose, g)
                expect_pos = position_error_mm(rec.world_pose,
                                               (sub_ip.u, sub_ip.v), g)
                gt_ip = rec.views[view["view"]].image_pose
                expect_ang = forward_angle_error(gt_ip.alpha_deg,
                                                 sub_ip.alpha_deg)
                assert view["pos_err_mm"] == pytest.approx(expect_pos,
                                                           abs=1e-9)
                assert view["fwd_angle_err_deg"] == pytest.approx(expect_ang,
                                                                  abs=1e-9)

    def test_duplicate_attempt_conflicts(self, service_env):
        client, ds = make_client(service_env, name="rec_dup")
        tasks = client.get("/api/tasks").json()
        task_id = tasks[0]["task_id"]
        rec = gt_of(ds, task_id)
        body = {"annotator": "a1", "attempt": 0,
                "pose": {"origin": list(map(float, rec.world_pose.origin)),
                         "axis": list(map(float, rec.world_pose.axis))}}
        assert client.post(f"/api/tasks/{task_id}/annotations",
                           json=body).status_code == 200
        assert client.post(f"/api/tasks/{task_id}/annotations",
                           json=body).status_code == 409
        body.pop("attempt")  # auto-increment picks the next free attempt
        assert client.post(f"/api/tasks/{task_id}/annotations",
                           json=body).status_code == 200

    def test_invalid_pose_rejected(self, service_env):
        client, ds = make_client(service_env, name="rec_bad")
        tasks = client.get("/api/tasks").json()
        task_id = tasks[0]["task_id"]
        # axis along the viewing ray: forward angle undefined in view 0
        rec = gt_of(ds, task_id)
        g = ds.geometry("expert", 0)
        view_dir = rec.world_pose.origin - g.source
        view_dir = view_dir / np.linalg.norm(view_dir)
        body = {"annotator": "a1",
                "pose": {"origin": list(map(float, rec.world_pose.origin)),
                         "axis": list(map(float, view_dir))}}
        assert client.post(f"/api/tasks/{task_id}/annotations",
                           json=body).status_code == 400
        body = {"annotator": "a1",
                "pose": {"origin": [0.0, 0.0], "axis": [1.0, 0.0, 0.0]}}
        assert client.post(f"/api/tasks/{task_id}/annotations",
                           json=body).status_code in (400, 422)


class TestModesAndResults:
    def test_study_mode_hides_errors_until_close(self, service_env):
        client, ds = make_client(service_env, mode="study", name="rec_study")
        tasks = client.get("/api/tasks").json()
        task_id = tasks[0]["task_id"]
        rec = gt_of(ds, task_id)
        body = {"annotator": "a1",
                "pose": {"origin": list(map(float, rec.world_pose.origin)),
                         "axis": list(map(float, rec.world_pose.axis))}}
        r = client.post(f"/api/tasks/{task_id}/annotations", json=body).json()
        assert "views" not in r
        assert client.get("/api/selftest").status_code == 404
        client.post("/api/session/close")
        body["attempt"] = 5
        r2 = client.post(f"/api/tasks/{task_id}/annotations", json=body).json()
        assert "views" in r2

    def test_selftest_in_practice_mode(self, service_env):
        client, ds = make_client(service_env, name="rec_selftest")
        body = client.get("/api/selftest").json()
        assert "pose" in body and "image_poses" in body
        rec = gt_of(ds, body["task_id"])
        np.testing.assert_allclose(body["pose"]["origin"],
                                   rec.world_pose.origin)

    def test_results_csv_round_trip(self, service_env):
        client, ds = make_client(service_env, name="rec_csv")
        empty = client.get("/api/results.csv").text
        assert empty.strip().splitlines() == [empty.strip().splitlines()[0]]

        tasks = client.get("/api/tasks").json()
        rng = np.random.default_rng(7)
        submitted = []
        for task in tasks:
            rec = gt_of(ds, task["task_id"])
            pose = WorldPose(rec.world_pose.origin + rng.normal(0, 2, 3),
                             rec.world_pose.axis)
            body = {"annotator": "a1", "started_at": 100.0,
                    "pose": {"origin": list(map(float, pose.origin)),
                             "axis": list(map(float, pose.axis))}}
            got = client.post(f"/api/tasks/{task['task_id']}/annotations",
                              json=body).json()
            submitted.append(got)

        text = client.get("/api/results.csv").text
        lines = text.strip().splitlines()
        assert len(lines) == 1 + 2 * len(tasks)  # two views per submission
        header = lines[0].split(",")
        rows = [dict(zip(header, line.split(","))) for line in lines[1:]]
        by_key = {(r["task_id"], int(r["view"])): r for r in rows}
        for got in submitted:
            for view in got["views"]:
                row = by_key[(got["task_id"], view["view"])]
                assert float(row["pos_err_mm"]) == view["pos_err_mm"]
                assert float(row["fwd_angle_err_deg"]) == \
                    view["fwd_angle_err_deg"]
                assert float(row["ts_start"]) == 100.0
