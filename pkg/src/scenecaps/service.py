"""HTTP service around a capsule network session.

Scenes arrive as PNG or PGM bodies, are de-rendered immediately, and the
resulting graphs are stored as numbered versions per scene.  Incomplete
passes enqueue oracle queries; answers trigger structural edits and a
re-detection of the originating scene.  Every completed mutation is
written to disk before the response goes out, so a restarted service
serves byte-identical reads.
"""

import io
import json
import os
import re
import threading

import numpy as np
from PIL import Image

from .meta import (CAUSES, DecisionMatrix, FeatureSet, OracleAnswer,
                   OracleQuery, apply_answer, best_candidate, build_context,
                   decide, detect_incompleteness, evaluate_features,
                   pose_question)
from .network import CapsuleNetwork, DetectConfig, SceneGraph, observation_box
from .train import AugmentConfig, SemanticTrainConfig, project_attrs

_POSE = None


def _pose_view():
    global _POSE
    if _POSE is None:
        from .attributes import standard_layout
        _POSE = standard_layout([])
    return _POSE


def decode_image(data: bytes) -> np.ndarray:
    """Grayscale float image in [0, 1] from PNG/PGM bytes."""
    try:
        img = Image.open(io.BytesIO(data))
        img.load()
    except Exception as exc:
        raise ValueError(f"undecodable image: {exc}") from exc
    arr = np.asarray(img.convert("L"), dtype=np.float64) / 255.0
    if arr.ndim != 2 or arr.size == 0:
        raise ValueError("image decodes to an empty layer")
    return arr


def encode_png(layer: np.ndarray) -> bytes:
    arr = np.clip(np.asarray(layer, dtype=np.float64), 0.0, 1.0)
    img = Image.fromarray((arr * 255.0).round().astype(np.uint8), mode="L")
    out = io.BytesIO()
    img.save(out, format="PNG")
    return out.getvalue()


def crop_for_node(image: np.ndarray, attrs: dict, margin: int = 3) -> np.ndarray:
    """Pixel crop around a node's observed box, clamped to the image."""
    H, W = image.shape
    pose = _pose_view()
    x0, y0, x1, y1 = observation_box(project_attrs(attrs, pose))
    px0 = max(int(np.floor(x0 * W)) - margin, 0)
    py0 = max(int(np.floor(y0 * H)) - margin, 0)
    px1 = min(int(np.ceil(x1 * W)) + margin, W)
    py1 = min(int(np.ceil(y1 * H)) + margin, H)
    if px1 <= px0 or py1 <= py0:
        return image.copy()
    return image[py0:py1, px0:px1].copy()


class SessionStore:
    """Disk-backed session: network, decision matrix, scenes, query queue.

    All mutations run under a single writer lock and are flushed to disk
    before the caller sees a result.
    """

    def __init__(self, root, detect: DetectConfig = DetectConfig(),
                 aug: AugmentConfig | None = None,
                 fit: SemanticTrainConfig | None = None,
                 seed_matrix: bool = False):
        self.root = str(root)
        self.detect_config = detect
        self.aug = aug if aug is not None else AugmentConfig()
        self.fit = fit if fit is not None else SemanticTrainConfig()
        self.lock = threading.Lock()
        self.scenes: dict[str, dict] = {}   # sid -> {image, versions: [dict]}
        self.queries: list[OracleQuery] = []
        os.makedirs(os.path.join(self.root, "scenes"), exist_ok=True)
        os.makedirs(os.path.join(self.root, "crops"), exist_ok=True)

        net_dir = os.path.join(self.root, "network")
        if os.path.isfile(os.path.join(net_dir, "network.json")):
            self.network = CapsuleNetwork.load(net_dir)
        else:
            self.network = CapsuleNetwork()

        matrix_path = os.path.join(self.root, "matrix.json")
        if os.path.isfile(matrix_path):
            self.matrix = DecisionMatrix.load(matrix_path)
        elif seed_matrix:
            self.matrix = DecisionMatrix.seeded()
        else:
            self.matrix = DecisionMatrix.zeros()

        self._restore_scenes()
        self._restore_queries()

    # ---------------------------------------------------------- restore

    def _restore_scenes(self) -> None:
        scenes_dir = os.path.join(self.root, "scenes")
        for sid in sorted(os.listdir(scenes_dir)):
            sdir = os.path.join(scenes_dir, sid)
            img_path = os.path.join(sdir, "image.png")
            if not os.path.isfile(img_path):
                continue
            with open(img_path, "rb") as fh:
                image = decode_image(fh.read())
            versions = []
            pattern = re.compile(r"graph_v(\d+)\.json$")
            found = {}
            for name in os.listdir(sdir):
                m = pattern.match(name)
                if m:
                    with open(os.path.join(sdir, name)) as fh:
                        found[int(m.group(1))] = json.load(fh)
            for v in sorted(found):
                versions.append(found[v])
            self.scenes[sid] = {"image": image, "versions": versions}

    def _restore_queries(self) -> None:
        path = os.path.join(self.root, "queries.json")
        if os.path.isfile(path):
            with open(path) as fh:
                self.queries = [OracleQuery.from_json(o) for o in json.load(fh)]

    # ------------------------------------------------------------ flush

    def _flush_network(self) -> None:
        self.network.save(os.path.join(self.root, "network"))

    def _flush_matrix(self) -> None:
        self.matrix.save(os.path.join(self.root, "matrix.json"))

    def _flush_queries(self) -> None:
        path = os.path.join(self.root, "queries.json")
        with open(path, "w") as fh:
            json.dump([q.to_json() for q in self.queries], fh, indent=2,
                      sort_keys=True)
            fh.write("\n")

    def _write_graph(self, sid: str, version: int, graph_json: dict) -> None:
        path = os.path.join(self.root, "scenes", sid,
                            f"graph_v{version}.json")
        with open(path, "w") as fh:
            json.dump(graph_json, fh, indent=2, sort_keys=True)
            fh.write("\n")

    # ------------------------------------------------------------ scenes

    def _next_scene_id(self) -> str:
        n = 1 + max((int(s[1:]) for s in self.scenes
                     if s.startswith("s") and s[1:].isdigit()), default=0)
        return f"s{n}"

    def _next_query_id(self) -> int:
        return 1 + max((q.id for q in self.queries), default=0)

    def ingest_scene(self, data: bytes) -> dict:
        """Store, detect, version the graph, and maybe enqueue a query."""
        image = decode_image(data)   # raises ValueError on bad bytes
        with self.lock:
            sid = self._next_scene_id()
            sdir = os.path.join(self.root, "scenes", sid)
            os.makedirs(sdir, exist_ok=True)
            with open(os.path.join(sdir, "image.png"), "wb") as fh:
                fh.write(encode_png(image))
            graph = self.network.detect(image, image_ref=sid)
            gj = graph.to_json()
            self.scenes[sid] = {"image": image, "versions": [gj]}
            self._write_graph(sid, 0, gj)
            qid = self._maybe_enqueue(sid, graph, image)
            self._flush_network()
            self._flush_queries()
            out = {"scene_id": sid, "graph_version": 0}
            if qid is not None:
                out["query_id"] = qid
            return out

    def _maybe_enqueue(self, sid: str, graph: SceneGraph,
                       image: np.ndarray) -> int | None:
        incomplete, roots = detect_incompleteness(graph)
        if not incomplete:
            return None
        features = evaluate_features(self.network, graph, self.network.memory)
        cause = decide(self.matrix, features)
        context = build_context(self.network, graph)
        # an undecided matrix still needs a concrete question to pose
        asked = cause if cause is not None else ("A2" if features.f2 else "A1")
        qid = self._next_query_id()
        crops = []
        for i, node in enumerate(roots):
            crop = crop_for_node(image, node.attrs)
            name = f"q{qid}_{i}.png"
            with open(os.path.join(self.root, "crops", name), "wb") as fh:
                fh.write(encode_png(crop))
            crops.append(f"/v1/oracle/queries/{qid}/crops/{i}.png")
        context.update({"scene_id": sid, "features": list(features.true_ids()),
                        "crops": crops})
        self.queries.append(OracleQuery(id=qid, cause=cause,
                                        question=pose_question(asked, context),
                                        context=context))
        return qid

    def graph_json(self, sid: str, version: int | None = None) -> dict:
        scene = self.scenes.get(sid)
        if scene is None:
            raise KeyError(f"unknown scene {sid!r}")
        versions = scene["versions"]
        if version is None:
            version = len(versions) - 1
        if not 0 <= version < len(versions):
            raise KeyError(f"scene {sid!r} has no version {version}")
        return versions[version]

    # ----------------------------------------------------------- queries

    def query(self, qid: int) -> OracleQuery:
        for q in self.queries:
            if q.id == qid:
                return q
        raise KeyError(f"unknown query {qid}")

    def pending(self) -> list:
        return [q for q in self.queries if q.status == "pending"]

    def crop_bytes(self, qid: int, index: int) -> bytes:
        q = self.query(qid)
        crops = q.context.get("crops", [])
        if not 0 <= index < len(crops):
            raise KeyError(f"query {qid} has no crop {index}")
        path = os.path.join(self.root, "crops", f"q{qid}_{index}.png")
        with open(path, "rb") as fh:
            return fh.read()

    @staticmethod
    def _summaries(cause: str, report: dict) -> list:
        if cause == "A2":
            return [f"capsule {c['capsule']} created, route trained"
                    for c in report["created"]]
        if cause == "A1":
            return [f"capsule {report['capsule']} gained route "
                    f"{report['route']}, trained one-shot"]
        if cause == "B1":
            return [f"attribute {report['attribute']} retrained on capsule "
                    f"{report['capsule']}"]
        return [f"attribute {report['attribute']} added to capsule "
                f"{report['capsule']}"]

    def answer_query(self, qid: int, payload: dict) -> dict:
        """Apply an oracle answer atomically; persist before returning."""
        with self.lock:
            q = self.query(qid)   # raises KeyError -> 404
            if q.status != "pending":
                raise PermissionError(f"query {qid} already answered")
            try:
                answer = OracleAnswer(
                    cause=payload.get("cause"),
                    name=payload.get("name"),
                    groups=payload.get("groups"),
                    capsule=payload.get("capsule"),
                    query_id=qid)
            except ValueError as exc:
                raise ValueError(str(exc)) from exc
            sid = q.context["scene_id"]
            scene = self.scenes[sid]
            flags = {f.lower(): True for f in q.context.get("features", [])}
            features = FeatureSet(**flags)
            graph = SceneGraph.from_json(self.graph_json(sid))
            report = apply_answer(self.network, answer, graph,
                                  self.network.memory, matrix=self.matrix,
                                  features=features, aug=self.aug,
                                  fit=self.fit)
            q.status = "answered"
            regraph = self.network.detect(scene["image"], image_ref=sid)
            gj = regraph.to_json()
            scene["versions"].append(gj)
            version = len(scene["versions"]) - 1
            self._write_graph(sid, version, gj)
            self._maybe_enqueue(sid, regraph, scene["image"])
            self._flush_network()
            self._flush_matrix()
            self._flush_queries()
            return {"applied": {"cause": answer.cause,
                                "summary": self._summaries(answer.cause,
                                                           report)},
                    "scene_id": sid, "graph_version": version}

    def network_json(self) -> dict:
        out = self.network.to_json()
        out["matrix"] = self.matrix.to_json()
        return out


# -------------------------------------------------------------- HTTP app

def create_app(store: SessionStore):
    from fastapi import FastAPI, Request, Response
    from fastapi.exceptions import RequestValidationError
    from fastapi.responses import JSONResponse
    from starlette.exceptions import HTTPException as StarletteHTTPException

    class CanonicalJSON(JSONResponse):
        """Sorted keys and tight separators: restart-stable bytes."""

        def render(self, content) -> bytes:
            return json.dumps(content, sort_keys=True,
                              separators=(",", ":")).encode()

    app = FastAPI(title="scenecaps", docs_url=None, redoc_url=None,
                  openapi_url=None, default_response_class=CanonicalJSON)
    app.state.store = store

    def error(status: int, kind: str, detail: str) -> CanonicalJSON:
        return CanonicalJSON(status_code=status,
                             content={"error": kind, "detail": detail})

    @app.exception_handler(StarletteHTTPException)
    async def _http_error(request: Request, exc: StarletteHTTPException):
        return error(exc.status_code, "http", str(exc.detail))

    @app.exception_handler(RequestValidationError)
    async def _validation_error(request: Request,
                                exc: RequestValidationError):
        return error(422, "validation", str(exc.errors()))

    @app.post("/v1/scenes")
    async def post_scene(request: Request):
        body = await request.body()
        try:
            return store.ingest_scene(body)
        except ValueError as exc:
            return error(400, "malformed-image", str(exc))

    @app.get("/v1/scenes/{sid}/graph")
    async def get_graph(sid: str, version: int | None = None):
        try:
            return store.graph_json(sid, version)
        except KeyError as exc:
            return error(404, "not-found", str(exc.args[0]))

    @app.get("/v1/oracle/queries")
    async def get_queries(status: str | None = None):
        if status == "pending":
            items = store.pending()
        elif status in (None, "all"):
            items = store.queries
        elif status == "answered":
            items = [q for q in store.queries if q.status == "answered"]
        else:
            return error(422, "validation", f"unknown status {status!r}")
        return [q.to_json() for q in items]

    @app.get("/v1/oracle/queries/{qid}/crops/{index}.png")
    async def get_crop(qid: int, index: int):
        try:
            data = store.crop_bytes(qid, index)
        except (KeyError, FileNotFoundError) as exc:
            return error(404, "not-found", str(exc))
        return Response(content=data, media_type="image/png")

    @app.post("/v1/oracle/queries/{qid}/answer")
    async def post_answer(qid: int, request: Request):
        try:
            payload = await request.json()
        except Exception:
            return error(422, "validation", "body is not JSON")
        if not isinstance(payload, dict):
            return error(422, "validation", "body must be a JSON object")
        try:
            return store.answer_query(qid, payload)
        except KeyError as exc:
            return error(404, "not-found", str(exc.args[0]))
        except PermissionError as exc:
            return error(409, "already-answered", str(exc))
        except ValueError as exc:
            return error(422, "invalid-answer", str(exc))

    @app.get("/v1/network")
    async def get_network():
        return store.network_json()

    return app


def serve(root, host: str = "127.0.0.1", port: int = 8000,
          seed_matrix: bool = False, oracle=None):
    """Run the HTTP service; `oracle` optionally auto-answers new queries."""
    import uvicorn

    store = SessionStore(root, seed_matrix=seed_matrix)
    app = create_app(store)
    if oracle is not None:
        _attach_auto_oracle(app, store, oracle)
    uvicorn.run(app, host=host, port=port, log_level="warning")


def _attach_auto_oracle(app, store: SessionStore, oracle) -> None:
    """Answer pending queries inline after each mutating request."""

    @app.middleware("http")
    async def _drain(request, call_next):
        response = await call_next(request)
        if request.method == "POST":
            while True:
                pending = store.pending()
                if not pending:
                    break
                q = pending[0]
                try:
                    ans = oracle.answer(q)
                except ValueError:
                    break
                store.answer_query(q.id, {
                    "cause": ans.cause, "name": ans.name,
                    "groups": ans.groups, "capsule": ans.capsule})
        return response
