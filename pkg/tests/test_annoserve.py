"""Annotation service: session lifecycle, undo, crash resume, oracle parity."""

import json
import threading
import urllib.error
import urllib.request
from pathlib import Path

import numpy as np
import pytest

from milliseg.annoserve import AnnotationService, make_server
from milliseg.annotate import annotate_frame
from milliseg.clustering import ClusterBudget, cluster_frame, load_clustering, save_clustering
from milliseg.datamodel import (
    load_manifest,
    load_manifest_frame,
    save_pseudo_labels,
)
from milliseg.errors import (
    InvalidClassError,
    MissingClusteringError,
    NothingToUndoError,
    OutOfOrderError,
    UnknownFrameError,
    UnknownSessionError,
)
from milliseg.synthetic import SyntheticSpec, generate_dataset


@pytest.fixture()
def workspace(tmp_path):
    spec = SyntheticSpec(
        num_classes=4,
        points_per_frame=300,
        frames_per_sequence=2,
        sequences=1,
        feature_dim=8,
        separation=6.0,
        seed=21,
    )
    manifest = generate_dataset(spec, tmp_path / "ds")
    clustering_dir = tmp_path / "clusterings"
    clustering_dir.mkdir()
    budget = ClusterBudget(alpha=0.02, min_factor=2)
    for _, mf in manifest.all_frames():
        frame = load_manifest_frame(manifest, mf.frame_id)
        clustering = cluster_frame(frame, budget, 4, seed=5)
        save_clustering(clustering, clustering_dir / f"{mf.frame_id}.mlnc")
    return manifest, clustering_dir, tmp_path


def service_for(workspace, subdir="serve"):
    manifest, clustering_dir, tmp_path = workspace
    return AnnotationService(manifest, clustering_dir, tmp_path / subdir)


def complete_session(service, manifest, frame_id, wrong_class_for=()):
    """Drive a session to completion with oracle answers; returns session id."""
    frame = load_manifest_frame(manifest, frame_id)
    created = service.create_session(frame_id)
    sid = created["session_id"]
    while True:
        nxt = service.next_click(sid)
        if nxt["done"]:
            return sid
        p = nxt["point"]["index"]
        cls = int(frame.gt_labels[p])
        if p in wrong_class_for:
            cls = (cls + 1) % 4
        service.submit_label(sid, p, cls)


class TestSessionLifecycle:
    def test_queue_length_is_k(self, workspace):
        manifest, clustering_dir, _ = workspace
        service = service_for(workspace)
        fid = manifest.all_frames()[0][1].frame_id
        created = service.create_session(fid)
        k = load_clustering(clustering_dir / f"{fid}.mlnc").num_clusters
        assert created["k"] == k
        assert created["cursor"] == 0

    def test_next_does_not_advance(self, workspace):
        manifest, _, _ = workspace
        service = service_for(workspace)
        fid = manifest.all_frames()[0][1].frame_id
        sid = service.create_session(fid)["session_id"]
        first = service.next_click(sid)
        again = service.next_click(sid)
        assert first["point"]["index"] == again["point"]["index"]
        assert first["cursor"] == again["cursor"] == 0

    def test_full_session_completes_and_writes_labels(self, workspace):
        manifest, _, tmp_path = workspace
        service = service_for(workspace)
        fid = manifest.all_frames()[0][1].frame_id
        sid = complete_session(service, manifest, fid)
        prog = service.progress(sid)
        assert prog["status"] == "COMPLETE"
        assert (tmp_path / "serve" / "labels" / f"{fid}.mlnl").exists()
        assert service.next_click(sid)["done"]

    def test_context_payload_contains_cluster_and_click(self, workspace):
        manifest, clustering_dir, _ = workspace
        service = service_for(workspace)
        fid = manifest.all_frames()[0][1].frame_id
        sid = service.create_session(fid)["session_id"]
        nxt = service.next_click(sid)
        point = nxt["point"]
        indices = {p["index"] for p in nxt["context"]}
        assert point["index"] in indices
        clustering = load_clustering(clustering_dir / f"{fid}.mlnc")
        members = np.flatnonzero(clustering.assignments == point["cluster"])
        assert set(members.tolist()) <= indices

    def test_context_decimated_to_cap(self, workspace):
        manifest, clustering_dir, tmp_path = workspace
        service = AnnotationService(
            manifest, clustering_dir, tmp_path / "small", max_context_points=10,
            context_radius=1e9,
        )
        fid = manifest.all_frames()[0][1].frame_id
        sid = service.create_session(fid)["session_id"]
        nxt = service.next_click(sid)
        assert len(nxt["context"]) <= 11  # cap plus the guaranteed clicked point
        assert nxt["point"]["index"] in {p["index"] for p in nxt["context"]}

    def test_unknown_frame_and_missing_clustering(self, workspace):
        manifest, clustering_dir, tmp_path = workspace
        service = service_for(workspace)
        with pytest.raises(UnknownFrameError):
            service.create_session("nope")
        fid = manifest.all_frames()[1][1].frame_id
        (clustering_dir / f"{fid}.mlnc").unlink()
        with pytest.raises(MissingClusteringError):
            service.create_session(fid)

    def test_unknown_session(self, workspace):
        service = service_for(workspace)
        with pytest.raises(UnknownSessionError):
            service.next_click("missing")


class TestSubmitValidation:
    def test_out_of_order_rejected_state_unchanged(self, workspace):
        manifest, _, _ = workspace
        service = service_for(workspace)
        fid = manifest.all_frames()[0][1].frame_id
        sid = service.create_session(fid)["session_id"]
        current = service.next_click(sid)["point"]["index"]
        with pytest.raises(OutOfOrderError):
            service.submit_label(sid, current + 1, 0)
        assert service.progress(sid)["cursor"] == 0
        assert service.next_click(sid)["point"]["index"] == current

    def test_invalid_class(self, workspace):
        manifest, _, _ = workspace
        service = service_for(workspace)
        fid = manifest.all_frames()[0][1].frame_id
        sid = service.create_session(fid)["session_id"]
        p = service.next_click(sid)["point"]["index"]
        with pytest.raises(InvalidClassError):
            service.submit_label(sid, p, 99)

    def test_submit_persisted_before_ack(self, workspace):
        manifest, _, tmp_path = workspace
        service = service_for(workspace)
        fid = manifest.all_frames()[0][1].frame_id
        sid = service.create_session(fid)["session_id"]
        p = service.next_click(sid)["point"]["index"]
        service.submit_label(sid, p, 1)
        on_disk = json.loads((tmp_path / "serve" / "sessions" / f"{sid}.json").read_text())
        assert on_disk["cursor"] == 1
        assert on_disk["responses"] == [[p, 1]]


class TestUndo:
    def test_fresh_session_nothing_to_undo(self, workspace):
        manifest, _, _ = workspace
        service = service_for(workspace)
        fid = manifest.all_frames()[0][1].frame_id
        sid = service.create_session(fid)["session_id"]
        with pytest.raises(NothingToUndoError):
            service.undo(sid)

    def test_submit_then_undo_restores_fresh_state(self, workspace):
        manifest, _, _ = workspace
        service = service_for(workspace)
        fid = manifest.all_frames()[0][1].frame_id
        sid = service.create_session(fid)["session_id"]
        p = service.next_click(sid)["point"]["index"]
        service.submit_label(sid, p, 2)
        service.undo(sid)
        assert service.progress(sid)["cursor"] == 0
        assert service.next_click(sid)["point"]["index"] == p

    def test_randomized_submit_undo_walk(self, workspace):
        manifest, _, _ = workspace
        service = service_for(workspace)
        fid = manifest.all_frames()[0][1].frame_id
        frame = load_manifest_frame(manifest, fid)
        sid = service.create_session(fid)["session_id"]
        rng = np.random.default_rng(3)
        depth = 0
        for _ in range(200):
            if depth > 0 and rng.random() < 0.45:
                service.undo(sid)
                depth -= 1
            else:
                nxt = service.next_click(sid)
                if nxt["done"]:
                    break
                p = nxt["point"]["index"]
                service.submit_label(sid, p, int(frame.gt_labels[p]))
                depth += 1
        while depth > 0:
            service.undo(sid)
            depth -= 1
        assert service.progress(sid)["cursor"] == 0
        with pytest.raises(NothingToUndoError):
            service.undo(sid)


class TestSpatialQueueOrder:
    def test_spatial_order_visits_all_centers_with_shorter_travel(self, workspace):
        manifest, clustering_dir, tmp_path = workspace
        fid = manifest.all_frames()[0][1].frame_id
        frame = load_manifest_frame(manifest, fid)
        base = AnnotationService(manifest, clustering_dir, tmp_path / "a")
        spatial = AnnotationService(
            manifest, clustering_dir, tmp_path / "b", queue_order="spatial"
        )

        def queue_of(service):
            sid = service.create_session(fid)["session_id"]
            out = []
            while True:
                nxt = service.next_click(sid)
                if nxt["done"]:
                    return out, sid
                p = nxt["point"]["index"]
                out.append(p)
                service.submit_label(sid, p, int(frame.gt_labels[p]))

        cluster_queue, _ = queue_of(base)
        spatial_queue, _ = queue_of(spatial)
        assert sorted(cluster_queue) == sorted(spatial_queue)

        def travel(queue):
            pts = frame.points[queue].astype(float)
            return float(np.sum(np.linalg.norm(np.diff(pts, axis=0), axis=1)))

        assert travel(spatial_queue) <= travel(cluster_queue)
        # identical (point, class) responses -> identical label bytes
        a = (tmp_path / "a" / "labels" / f"{fid}.mlnl").read_bytes()
        b = (tmp_path / "b" / "labels" / f"{fid}.mlnl").read_bytes()
        assert a == b


class TestCrashResume:
    def test_new_service_resumes_at_persisted_cursor(self, workspace):
        manifest, clustering_dir, tmp_path = workspace
        service = service_for(workspace)
        fid = manifest.all_frames()[0][1].frame_id
        frame = load_manifest_frame(manifest, fid)
        sid = service.create_session(fid)["session_id"]
        for _ in range(3):
            p = service.next_click(sid)["point"]["index"]
            service.submit_label(sid, p, int(frame.gt_labels[p]))
        del service

        revived = service_for(workspace)  # same dirs, no shared memory
        assert revived.progress(sid)["cursor"] == 3
        while not revived.next_click(sid)["done"]:
            p = revived.next_click(sid)["point"]["index"]
            revived.submit_label(sid, p, int(frame.gt_labels[p]))
        assert revived.progress(sid)["status"] == "COMPLETE"


class TestOracleParity:
    def test_byte_identical_outputs(self, workspace):
        manifest, clustering_dir, tmp_path = workspace
        fid = manifest.all_frames()[0][1].frame_id
        frame = load_manifest_frame(manifest, fid)

        clustering = load_clustering(
            clustering_dir / f"{fid}.mlnc", features=frame.features
        )
        oracle_path = tmp_path / "oracle.mlnl"
        save_pseudo_labels(annotate_frame(frame, clustering), oracle_path)

        service = service_for(workspace)
        complete_session(service, manifest, fid)
        served_path = tmp_path / "serve" / "labels" / f"{fid}.mlnl"
        assert served_path.read_bytes() == oracle_path.read_bytes()

    def test_undo_rewrite_changes_output_consistently(self, workspace):
        manifest, clustering_dir, tmp_path = workspace
        fid = manifest.all_frames()[0][1].frame_id
        frame = load_manifest_frame(manifest, fid)
        service = service_for(workspace)
        sid = complete_session(service, manifest, fid)
        served_path = tmp_path / "serve" / "labels" / f"{fid}.mlnl"
        before = served_path.read_bytes()
        # undo the last answer and submit the same class again
        service.undo(sid)
        p = service.next_click(sid)["point"]["index"]
        service.submit_label(sid, p, int(frame.gt_labels[p]))
        assert served_path.read_bytes() == before


class TestHttpLayer:
    @pytest.fixture()
    def server(self, workspace):
        service = service_for(workspace, subdir="http")
        srv = make_server(service)
        thread = threading.Thread(target=srv.serve_forever, daemon=True)
        thread.start()
        yield srv.server_address[1], workspace
        srv.shutdown()
        thread.join()

    @staticmethod
    def _req(port, method, path, body=None):
        data = json.dumps(body).encode() if body is not None else None
        req = urllib.request.Request(
            f"http://127.0.0.1:{port}{path}",
            data=data,
            method=method,
            headers={"Content-Type": "application/json"},
        )
        with urllib.request.urlopen(req) as resp:
            return json.loads(resp.read())

    def test_full_session_over_http(self, server):
        port, (manifest, _, tmp_path) = server
        fid = manifest.all_frames()[0][1].frame_id
        frame = load_manifest_frame(manifest, fid)
        classes = self._req(port, "GET", f"/frames/{fid}/classes")
        assert classes["num_classes"] == 4
        s = self._req(port, "POST", "/sessions", {"frame_id": fid})
        sid = s["session_id"]
        while True:
            nxt = self._req(port, "GET", f"/sessions/{sid}/next")
            if nxt["done"]:
                break
            p = nxt["point"]["index"]
            self._req(
                port, "POST", f"/sessions/{sid}/label",
                {"point": p, "class": int(frame.gt_labels[p])},
            )
        prog = self._req(port, "GET", f"/sessions/{sid}/progress")
        assert prog["status"] == "COMPLETE"
        assert (tmp_path / "http" / "labels" / f"{fid}.mlnl").exists()

    def test_http_error_statuses(self, server):
        port, (manifest, _, _) = server
        with pytest.raises(urllib.error.HTTPError) as err:
            self._req(port, "GET", "/sessions/nope/progress")
        assert err.value.code == 404
        fid = manifest.all_frames()[0][1].frame_id
        s = self._req(port, "POST", "/sessions", {"frame_id": fid})
        sid = s["session_id"]
        nxt = self._req(port, "GET", f"/sessions/{sid}/next")
        with pytest.raises(urllib.error.HTTPError) as err:
            self._req(
                port, "POST", f"/sessions/{sid}/label",
                {"point": nxt["point"]["index"] + 1, "class": 0},
            )
        assert err.value.code == 409

    def test_points_endpoint(self, server):
        port, (manifest, _, _) = server
        fid = manifest.all_frames()[0][1].frame_id
        doc = self._req(port, "GET", f"/frames/{fid}/points?center=5&radius=10")
        assert doc["point"]["index"] == 5
        assert {"index", "x", "y", "z", "cluster"} <= set(doc["context"][0].keys())
