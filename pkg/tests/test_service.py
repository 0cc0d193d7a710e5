"""HTTP session tests: scene ingestion, oracle queue, growth, restarts."""

import io
import json
import os

import numpy as np
import pytest
from fastapi.testclient import TestClient
from PIL import Image

from scenecaps.service import (SessionStore, create_app, crop_for_node,
                               decode_image, encode_png)
from scenecaps.train import AugmentConfig, SemanticTrainConfig

from stubs import _circles_only_net, _make_net, _pair_scene

AUG_TINY = AugmentConfig(n=200, translate=0.15, scale_lo=0.9, scale_hi=1.1)
FIT_TINY = SemanticTrainConfig(hidden=32, steps=1200, batch=48)


@pytest.fixture
def store(tmp_path):
    s = SessionStore(tmp_path / "session", aug=AUG_TINY, fit=FIT_TINY,
                     seed_matrix=True)
    s.network = _circles_only_net()
    return s


@pytest.fixture
def client(store):
    return TestClient(create_app(store))


def _png() -> bytes:
    return encode_png(_pair_scene())


# ------------------------------------------------------------------ codecs

def test_png_round_trip():
    layer = np.linspace(0, 1, 64 * 48).reshape(48, 64)
    back = decode_image(encode_png(layer))
    assert back.shape == (48, 64)
    assert np.abs(back - layer).max() <= 0.5 / 255 + 1e-9


def test_decode_rejects_garbage():
    with pytest.raises(ValueError):
        decode_image(b"\x89PNG but not really")


def test_decode_reads_pgm():
    buf = io.BytesIO()
    Image.fromarray(np.full((8, 8), 128, dtype=np.uint8), mode="L").save(
        buf, format="PPM")
    arr = decode_image(buf.getvalue())
    assert arr.shape == (8, 8)
    assert np.allclose(arr, 128 / 255)


def test_crop_for_node_covers_the_shape():
    image = _pair_scene()
    crop = crop_for_node(image, {"pos_x": 0.3, "pos_y": 0.3, "rot": 0.0,
                                 "size_w": 0.15, "size_h": 0.15})
    # the full circle support plus margin, nothing like the whole image
    assert crop.max() > 0.5
    assert crop.shape[0] < 24 and crop.shape[1] < 24
    assert crop.sum() == pytest.approx(image.sum(), rel=0.51)


# ------------------------------------------------------------------ scenes

def test_post_scene_malformed_is_400(client):
    r = client.post("/v1/scenes", content=b"junk bytes")
    assert r.status_code == 400
    body = r.json()
    assert set(body) == {"error", "detail"}


def test_post_scene_detects_and_versions(client):
    r = client.post("/v1/scenes", content=_png())
    assert r.status_code == 200
    body = r.json()
    assert body["scene_id"] == "s1"
    assert body["graph_version"] == 0
    g = client.get("/v1/scenes/s1/graph").json()
    assert sorted(n["capsule"] for n in g["nodes"]) == ["circle", "circle"]
    assert len(g["roots"]) == 2


def test_get_graph_404s(client):
    assert client.get("/v1/scenes/s9/graph").status_code == 404
    client.post("/v1/scenes", content=_png())
    assert client.get("/v1/scenes/s1/graph?version=3").status_code == 404
    assert client.get("/v1/scenes/s1/graph?version=0").status_code == 200


def test_unknown_route_is_json_404(client):
    r = client.get("/v1/definitely/not/here")
    assert r.status_code == 404
    assert set(r.json()) == {"error", "detail"}


# ------------------------------------------------------------------- queue

def test_incomplete_scene_enqueues_query(client):
    body = client.post("/v1/scenes", content=_png()).json()
    assert body["query_id"] == 1
    queue = client.get("/v1/oracle/queries?status=pending").json()
    assert len(queue) == 1
    q = queue[0]
    assert q["status"] == "pending"
    assert q["question"] == ("What new symbol best describes these parts: "
                             "2× circle?")
    assert q["context"]["scene_id"] == "s1"
    assert q["context"]["features"] == ["F2"]
    # the seeded matrix has evidence for F2, so a cause proposal rides along
    assert q["cause"] == "A2"


def test_complete_scene_enqueues_nothing(tmp_path):
    s = SessionStore(tmp_path / "x", aug=AUG_TINY, fit=FIT_TINY)
    s.network = _make_net()   # pair capsule already explains the scene
    c = TestClient(create_app(s))
    body = c.post("/v1/scenes", content=_png()).json()
    assert "query_id" not in body
    assert c.get("/v1/oracle/queries?status=pending").json() == []


def test_query_crops_serve_png(client):
    client.post("/v1/scenes", content=_png())
    q = client.get("/v1/oracle/queries?status=pending").json()[0]
    crops = q["context"]["crops"]
    assert len(crops) == 2
    r = client.get(crops[0])
    assert r.status_code == 200
    assert r.headers["content-type"] == "image/png"
    arr = decode_image(r.content)
    assert arr.max() > 0.5
    assert client.get("/v1/oracle/queries/1/crops/7.png").status_code == 404


def test_queue_is_fifo(client):
    client.post("/v1/scenes", content=_png())
    client.post("/v1/scenes", content=_png())
    ids = [q["id"] for q in
           client.get("/v1/oracle/queries?status=pending").json()]
    assert ids == [1, 2]


def test_queue_status_filter(client):
    client.post("/v1/scenes", content=_png())
    assert client.get("/v1/oracle/queries?status=bogus").status_code == 422
    allq = client.get("/v1/oracle/queries").json()
    assert len(allq) == 1


# ----------------------------------------------------------------- answers

def _answer(client, qid=1, name="pair"):
    return client.post(f"/v1/oracle/queries/{qid}/answer",
                       json={"cause": "A2", "name": name})


def test_answer_grows_network_and_reversions(client, store):
    client.post("/v1/scenes", content=_png())
    r = _answer(client)
    assert r.status_code == 200
    body = r.json()
    assert body["applied"]["cause"] == "A2"
    assert body["applied"]["summary"] == ["capsule pair created, route trained"]
    assert body["graph_version"] == 1
    assert "pair" in store.network.capsules
    g = client.get("/v1/scenes/s1/graph?version=1").json()
    assert len(g["roots"]) == 1
    root = [n for n in g["nodes"] if n["id"] == g["roots"][0]][0]
    assert root["capsule"] == "pair"
    # version 0 still serves the pre-growth view
    g0 = client.get("/v1/scenes/s1/graph?version=0").json()
    assert len(g0["roots"]) == 2
    # matrix evidence grew along the answered cause
    net = client.get("/v1/network").json()
    row = [r for r in net["matrix"]["features"] if r["id"] == "F2"][0]
    assert row["counts"]["A2"] == 20   # seeded 19 plus this answer


def test_answer_twice_is_409(client):
    client.post("/v1/scenes", content=_png())
    assert _answer(client).status_code == 200
    r = _answer(client, name="other")
    assert r.status_code == 409
    assert r.json()["error"] == "already-answered"


def test_answer_unknown_query_is_404(client):
    assert _answer(client, qid=9).status_code == 404


def test_answer_invalid_grouping_is_422(client, store):
    client.post("/v1/scenes", content=_png())
    g = client.get("/v1/scenes/s1/graph").json()
    a, b = g["roots"]
    r = client.post("/v1/oracle/queries/1/answer", json={
        "cause": "A2",
        "groups": [{"name": "left", "roots": [a]},
                   {"name": "right", "roots": [a, b]}]})
    assert r.status_code == 422
    assert r.json()["error"] == "invalid-answer"
    assert "pair" not in store.network.capsules
    # the query survives the failed attempt
    assert client.get("/v1/oracle/queries?status=pending").json()[0]["id"] == 1


def test_answer_malformed_body_is_422(client):
    client.post("/v1/scenes", content=_png())
    r = client.post("/v1/oracle/queries/1/answer", content=b"not json",
                    headers={"content-type": "application/json"})
    assert r.status_code == 422
    r = client.post("/v1/oracle/queries/1/answer", json={"cause": "Z9"})
    assert r.status_code == 422


# ------------------------------------------------------------------ network

def test_network_endpoint_topology(client, store):
    client.post("/v1/scenes", content=_png())
    _answer(client)
    net = client.get("/v1/network").json()
    names = [c["name"] for c in net["capsules"]]
    assert names == ["circle", "pair"]
    pair = [c for c in net["capsules"] if c["name"] == "pair"][0]
    assert pair["routes"][0]["part_slots"] == ["circle", "circle"]
    assert {r["id"] for r in net["matrix"]["features"]} == \
        {"F1", "F2", "F3", "F4", "F5", "F6"}


# -------------------------------------------------------------- persistence

def test_restart_reproduces_reads(tmp_path, store):
    client = TestClient(create_app(store))
    client.post("/v1/scenes", content=_png())
    _answer(client)
    client.post("/v1/scenes", content=_png())   # second scene, pending query

    reads = ["/v1/scenes/s1/graph?version=0", "/v1/scenes/s1/graph?version=1",
             "/v1/scenes/s2/graph", "/v1/oracle/queries",
             "/v1/oracle/queries/1/crops/0.png"]
    before = [TestClient(create_app(store)).get(u).content for u in reads]

    reloaded = SessionStore(store.root, aug=AUG_TINY, fit=FIT_TINY)
    c2 = TestClient(create_app(reloaded))
    after = [c2.get(u).content for u in reads]
    assert before == after
    # topology survives byte for byte, counters included
    assert c2.get("/v1/network").content == \
        TestClient(create_app(store)).get("/v1/network").content
    # the reloaded service keeps accepting scenes under the restored ids
    body = c2.post("/v1/scenes", content=_png()).json()
    assert body["scene_id"] == "s3"


def test_store_survives_empty_dir(tmp_path):
    s = SessionStore(tmp_path / "fresh")
    assert s.network.capsules == {}
    files = os.listdir(s.root)
    assert "scenes" in files and "crops" in files


def test_graph_files_written_sorted(store):
    client = TestClient(create_app(store))
    client.post("/v1/scenes", content=_png())
    path = os.path.join(store.root, "scenes", "s1", "graph_v0.json")
    with open(path) as fh:
        on_disk = json.load(fh)
    assert on_disk == store.scenes["s1"]["versions"][0]
