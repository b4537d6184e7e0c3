"""HTTP service that walks a human annotator through one click per cluster.

The server owns the click queue (cluster centers in cluster-id order), hands
out one highlighted point at a time with enough surrounding context to judge
its class, and records exactly one class per cluster. Session state is
persisted to disk before any acknowledgement leaves the server, so a crash
never loses an acknowledged response, and a finished session writes the same
pseudo-label bytes the oracle path would for identical answers.
"""

from __future__ import annotations

import json
import os
import re
import threading
import time
import uuid
from dataclasses import dataclass, field
from http.server import BaseHTTPRequestHandler, ThreadingHTTPServer
from pathlib import Path
from urllib.parse import parse_qs, urlparse

import numpy as np

from .clustering import Clustering, load_clustering, propagate_labels
from .datamodel import (
    DatasetManifest,
    Frame,
    load_manifest_frame,
    save_pseudo_labels,
)
from .errors import (
    InvalidClassError,
    MillisegError,
    MissingClusteringError,
    NothingToUndoError,
    OutOfOrderError,
    UnknownFrameError,
    UnknownSessionError,
)

DEFAULT_CONTEXT_RADIUS = 15.0
MAX_CONTEXT_POINTS = 50_000


@dataclass
class SessionState:
    session_id: str
    frame_id: str
    queue: list[int]
    cursor: int = 0
    responses: list[tuple[int, int]] = field(default_factory=list)

    def to_json(self) -> dict:
        return {
            "session_id": self.session_id,
            "frame_id": self.frame_id,
            "queue": list(self.queue),
            "cursor": self.cursor,
            "responses": [[p, c] for p, c in self.responses],
        }

    @classmethod
    def from_json(cls, doc: dict) -> "SessionState":
        return cls(
            session_id=doc["session_id"],
            frame_id=doc["frame_id"],
            queue=[int(p) for p in doc["queue"]],
            cursor=int(doc["cursor"]),
            responses=[(int(p), int(c)) for p, c in doc["responses"]],
        )


class AnnotationService:
    """Session bookkeeping plus frame/clustering access for the HTTP layer."""

    def __init__(
        self,
        manifest: DatasetManifest,
        clustering_dir: str | Path,
        out_dir: str | Path,
        context_radius: float = DEFAULT_CONTEXT_RADIUS,
        max_context_points: int = MAX_CONTEXT_POINTS,
        queue_order: str = "cluster",
    ):
        if queue_order not in ("cluster", "spatial"):
            raise ValueError(f"queue_order must be cluster or spatial, got {queue_order!r}")
        self.manifest = manifest
        self.clustering_dir = Path(clustering_dir)
        self.labels_dir = Path(out_dir) / "labels"
        self.sessions_dir = Path(out_dir) / "sessions"
        self.labels_dir.mkdir(parents=True, exist_ok=True)
        self.sessions_dir.mkdir(parents=True, exist_ok=True)
        self.context_radius = context_radius
        self.max_context_points = max_context_points
        self.queue_order = queue_order

        self._frames: dict[str, Frame] = {}
        self._clusterings: dict[str, Clustering] = {}
        self._sessions: dict[str, SessionState] = {}
        self._locks: dict[str, threading.Lock] = {}
        self._global = threading.Lock()

    # -- frame / clustering access ----------------------------------------

    def _frame(self, frame_id: str) -> Frame:
        with self._global:
            if frame_id not in self._frames:
                try:
                    self._frames[frame_id] = load_manifest_frame(
                        self.manifest, frame_id
                    )
                except MillisegError as exc:
                    raise UnknownFrameError(f"unknown frame {frame_id!r}") from exc
            return self._frames[frame_id]

    def _clustering(self, frame_id: str) -> Clustering:
        with self._global:
            if frame_id not in self._clusterings:
                path = self.clustering_dir / f"{frame_id}.mlnc"
                if not path.exists():
                    raise MissingClusteringError(
                        f"no clustering artifact for frame {frame_id!r}"
                    )
                self._clusterings[frame_id] = load_clustering(path)
            return self._clusterings[frame_id]

    def _lock(self, session_id: str) -> threading.Lock:
        with self._global:
            return self._locks.setdefault(session_id, threading.Lock())

    # -- session persistence ------------------------------------------------

    def _session_path(self, session_id: str) -> Path:
        return self.sessions_dir / f"{session_id}.json"

    def _persist(self, state: SessionState) -> None:
        # Write-ahead: the temp file is fully written and atomically renamed
        # before any response is acknowledged to the client.
        path = self._session_path(state.session_id)
        tmp = path.with_suffix(".tmp")
        tmp.write_text(json.dumps(state.to_json()))
        os.replace(tmp, path)

    def _session(self, session_id: str) -> SessionState:
        with self._global:
            if session_id in self._sessions:
                return self._sessions[session_id]
        path = self._session_path(session_id)
        if not path.exists():
            raise UnknownSessionError(f"unknown session {session_id!r}")
        state = SessionState.from_json(json.loads(path.read_text()))
        with self._global:
            self._sessions[session_id] = state
        return state

    # -- operations -------------------------------------------------------------

    def _build_queue(self, frame_id: str) -> list[int]:
        """Cluster-id order by default; the spatial option chains each next
        click to the nearest remaining center so the camera barely moves."""
        clustering = self._clustering(frame_id)
        centers = [int(p) for p in clustering.center_points]
        if self.queue_order == "cluster":
            return centers
        pts = self._frame(frame_id).points[centers].astype(np.float64)
        remaining = list(range(len(centers)))
        order = [remaining.pop(0)]
        while remaining:
            last = pts[order[-1]]
            d2 = np.sum((pts[remaining] - last) ** 2, axis=1)
            order.append(remaining.pop(int(np.argmin(d2))))
        return [centers[i] for i in order]

    def create_session(self, frame_id: str) -> dict:
        self._frame(frame_id)
        queue = self._build_queue(frame_id)
        state = SessionState(
            session_id=uuid.uuid4().hex[:12], frame_id=frame_id, queue=queue
        )
        self._persist(state)
        with self._global:
            self._sessions[state.session_id] = state
        return {
            "session_id": state.session_id,
            "frame_id": frame_id,
            "k": len(queue),
            "cursor": 0,
        }

    def next_click(self, session_id: str) -> dict:
        state = self._session(session_id)
        clustering = self._clustering(state.frame_id)
        k = len(state.queue)
        if state.cursor >= k:
            return {"done": True, "cursor": state.cursor, "k": k}
        point = state.queue[state.cursor]
        frame = self._frame(state.frame_id)
        return {
            "done": False,
            "cursor": state.cursor,
            "k": k,
            "point": self._point_payload(frame, clustering, point),
            "context": self._context(frame, clustering, point, self.context_radius),
        }

    def submit_label(self, session_id: str, point: int, class_id: int) -> dict:
        with self._lock(session_id):
            state = self._session(session_id)
            clustering = self._clustering(state.frame_id)
            k = len(state.queue)
            if state.cursor >= k:
                raise OutOfOrderError("session already complete")
            expected = state.queue[state.cursor]
            if point != expected:
                raise OutOfOrderError(
                    f"expected point {expected}, got {point}"
                )
            if not (0 <= class_id < self.manifest.num_classes):
                raise InvalidClassError(
                    f"class {class_id} outside [0, {self.manifest.num_classes})"
                )
            state.responses.append((point, class_id))
            state.cursor += 1
            self._persist(state)
            done = state.cursor == k
            if done:
                self._finalize(state, clustering)
            return {"ok": True, "cursor": state.cursor, "k": k, "done": done}

    def undo(self, session_id: str) -> dict:
        with self._lock(session_id):
            state = self._session(session_id)
            if state.cursor == 0:
                raise NothingToUndoError("no responses to undo")
            state.cursor -= 1
            state.responses.pop()
            self._persist(state)
            return {"ok": True, "cursor": state.cursor}

    def progress(self, session_id: str) -> dict:
        state = self._session(session_id)
        k = len(state.queue)
        return {
            "session_id": session_id,
            "frame_id": state.frame_id,
            "cursor": state.cursor,
            "k": k,
            "status": "COMPLETE" if state.cursor >= k else "PENDING",
        }

    def classes(self, frame_id: str) -> dict:
        self._frame(frame_id)
        return {
            "frame_id": frame_id,
            "num_classes": self.manifest.num_classes,
            "class_names": list(self.manifest.class_names),
        }

    def points(self, frame_id: str, center: int, radius: float) -> dict:
        frame = self._frame(frame_id)
        clustering = self._clustering(frame_id)
        if not (0 <= center < frame.num_points):
            raise UnknownFrameError(f"point {center} outside frame {frame_id!r}")
        return {
            "frame_id": frame_id,
            "point": self._point_payload(frame, clustering, center),
            "context": self._context(frame, clustering, center, radius),
        }

    # -- payload helpers ----------------------------------------------------------

    @staticmethod
    def _point_payload(frame: Frame, clustering: Clustering, idx: int) -> dict:
        x, y, z = (float(v) for v in frame.points[idx])
        return {
            "index": idx,
            "x": x,
            "y": y,
            "z": z,
            "cluster": int(clustering.assignments[idx]),
        }

    def _context(
        self, frame: Frame, clustering: Clustering, idx: int, radius: float
    ) -> list[dict]:
        """Clicked point, its cluster, and anything within ``radius`` meters,
        decimated to the payload cap with the clicked point always included."""
        members = clustering.assignments == clustering.assignments[idx]
        d2 = np.sum((frame.points - frame.points[idx]) ** 2, axis=1)
        chosen = np.flatnonzero(members | (d2 <= radius * radius))
        if chosen.size > self.max_context_points:
            stride = int(np.ceil(chosen.size / self.max_context_points))
            chosen = np.union1d(chosen[::stride], [idx])
        pts = frame.points[chosen]
        clusters = clustering.assignments[chosen]
        return [
            {
                "index": int(i),
                "x": float(p[0]),
                "y": float(p[1]),
                "z": float(p[2]),
                "cluster": int(c),
            }
            for i, p, c in zip(chosen, pts, clusters)
        ]

    def _finalize(self, state: SessionState, clustering: Clustering) -> None:
        # Responses map back through each point's own cluster, so any queue
        # ordering writes the identical file for identical (point, class) pairs.
        center_labels = np.zeros(clustering.num_clusters, dtype=np.uint32)
        for point, class_id in state.responses:
            center_labels[clustering.assignments[point]] = class_id
        pl = propagate_labels(clustering, center_labels, frame_id=state.frame_id)
        save_pseudo_labels(pl, self.labels_dir / f"{state.frame_id}.mlnl")


# -- HTTP layer --------------------------------------------------------------------

_STATUS = {
    "UNKNOWN_SESSION": 404,
    "UNKNOWN_FRAME": 404,
    "MISSING_CLUSTERING": 404,
    "OUT_OF_ORDER": 409,
    "INVALID_CLASS": 409,
    "NOTHING_TO_UNDO": 409,
}

_ROUTES = [
    ("POST", re.compile(r"^/sessions$"), "create"),
    ("GET", re.compile(r"^/sessions/([^/]+)/next$"), "next"),
    ("POST", re.compile(r"^/sessions/([^/]+)/label$"), "label"),
    ("POST", re.compile(r"^/sessions/([^/]+)/undo$"), "undo"),
    ("GET", re.compile(r"^/sessions/([^/]+)/progress$"), "progress"),
    ("GET", re.compile(r"^/frames/([^/]+)/classes$"), "classes"),
    ("GET", re.compile(r"^/frames/([^/]+)/points$"), "points"),
]


class AnnotationHandler(BaseHTTPRequestHandler):
    service: AnnotationService

    def log_message(self, fmt, *args):
        pass

    def _send(self, status: int, doc: dict) -> None:
        body = json.dumps(doc).encode()
        self.send_response(status)
        self.send_header("Content-Type", "application/json")
        self.send_header("Content-Length", str(len(body)))
        self.send_header("Access-Control-Allow-Origin", "*")
        self.end_headers()
        self.wfile.write(body)

    def _body(self) -> dict:
        length = int(self.headers.get("Content-Length") or 0)
        if length == 0:
            return {}
        return json.loads(self.rfile.read(length))

    def _dispatch(self, method: str) -> None:
        url = urlparse(self.path)
        for verb, pattern, name in _ROUTES:
            if verb != method:
                continue
            m = pattern.match(url.path)
            if not m:
                continue
            try:
                self._handle(name, m, url)
            except MillisegError as exc:
                self._send(
                    _STATUS.get(exc.code, 500),
                    {"error": exc.code, "message": str(exc)},
                )
            except (json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
                self._send(400, {"error": "BAD_REQUEST", "message": str(exc)})
            return
        self._send(404, {"error": "NOT_FOUND", "message": self.path})

    def _handle(self, name: str, m: re.Match, url) -> None:
        svc = self.service
        if name == "create":
            doc = self._body()
            self._send(200, svc.create_session(str(doc["frame_id"])))
        elif name == "next":
            self._send(200, svc.next_click(m.group(1)))
        elif name == "label":
            doc = self._body()
            self._send(
                200, svc.submit_label(m.group(1), int(doc["point"]), int(doc["class"]))
            )
        elif name == "undo":
            self._send(200, svc.undo(m.group(1)))
        elif name == "progress":
            self._send(200, svc.progress(m.group(1)))
        elif name == "classes":
            self._send(200, svc.classes(m.group(1)))
        elif name == "points":
            q = parse_qs(url.query)
            center = int(q.get("center", ["0"])[0])
            radius = float(q.get("radius", [str(self.service.context_radius)])[0])
            self._send(200, svc.points(m.group(1), center, radius))

    def do_GET(self):
        self._dispatch("GET")

    def do_POST(self):
        self._dispatch("POST")

    def do_OPTIONS(self):
        self.send_response(204)
        self.send_header("Access-Control-Allow-Origin", "*")
        self.send_header("Access-Control-Allow-Methods", "GET, POST, OPTIONS")
        self.send_header("Access-Control-Allow-Headers", "Content-Type")
        self.end_headers()


def make_server(
    service: AnnotationService, host: str = "127.0.0.1", port: int = 0
) -> ThreadingHTTPServer:
    handler = type("BoundHandler", (AnnotationHandler,), {"service": service})
    return ThreadingHTTPServer((host, port), handler)


def serve_until_complete(
    service: AnnotationService,
    frame_ids: list[str],
    host: str = "127.0.0.1",
    port: int = 8787,
    poll_seconds: float = 0.5,
) -> None:
    """Run the service until every frame has a pseudo-label file on disk."""
    server = make_server(service, host, port)
    thread = threading.Thread(target=server.serve_forever, daemon=True)
    thread.start()
    print(
        f"annotation service on http://{host}:{server.server_address[1]}, "
        f"waiting for {len(frame_ids)} frames",
        flush=True,
    )
    try:
        while True:
            missing = [
                f for f in frame_ids if not (service.labels_dir / f"{f}.mlnl").exists()
            ]
            if not missing:
                break
            time.sleep(poll_seconds)
    finally:
        server.shutdown()
        thread.join()
