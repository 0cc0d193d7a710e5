"""Forward-pass and rendering tests over the capsule network.

Primitive encoders are replaced by analytic pixel inverses and route
decoders by exact generative inverses, so the detection pipeline can be
exercised end to end without training runs.
"""

import json
from types import SimpleNamespace

import numpy as np
import pytest

from scenecaps.attributes import AttributeSpec, AttributeVector, standard_layout
from scenecaps.capsule import (Capsule, MemoryStore, ObservationEntry, Route,
                               SemanticDecoder, Symmetry, PrimitiveEncoder)
from scenecaps.network import (CapsuleNetwork, DetectConfig, SceneGraph,
                               SceneNode, binding_candidates, box_iou,
                               nms_filter, observation_box, propose_patches,
                               resolve_consumption, support_overlap)
from scenecaps.regress import ConvModel, DenseModel
from scenecaps.sdf import PrimitiveParams, composite_over, draw_primitive
from scenecaps.train import PRIMITIVE_SYMMETRIES, gamma_semantic


# stubs shared with the service tests live in tests/stubs.py
from stubs import (BASE_PARTS, CIRCLE, _AnalyticEncoder, _ExactPairDecoder,
                   _base_parent, _make_net, _pair_scene, _scene)


# --------------------------------------------------------------- proposals

def test_propose_patches_grid_count():
    img = np.zeros((64, 64))
    props = propose_patches(img, DetectConfig(scales=(32,)))
    assert len(props) == 25
    assert all(p.patch.shape == (28, 28) for p in props)


def test_propose_patches_appends_edge_offset():
    img = np.zeros((70, 64))
    props = propose_patches(img, DetectConfig(scales=(32,)))
    # x starts: 0,8,16,24,32 (5); y starts: 0,8,16,24,32 then 38 (6)
    assert len(props) == 30
    assert max(p.y0 for p in props) == 38
    assert max(p.x0 for p in props) == 32


def test_propose_patches_no_scales():
    assert propose_patches(np.zeros((64, 64)), DetectConfig(scales=())) == []


def test_propose_patches_blank_image_still_proposes():
    props = propose_patches(np.zeros((64, 64)), DetectConfig(scales=(32,)))
    assert len(props) == 25


def test_propose_patches_scale_clamped_to_image():
    props = propose_patches(np.zeros((20, 20)), DetectConfig(scales=(32,)))
    assert len(props) == 1
    assert props[0].scale == 20


# ------------------------------------------------------------- geometry

def test_observation_box_axis_aligned():
    box = observation_box([0.5, 0.4, 0.0, 0.2, 0.1, 0.7])
    assert np.allclose(box, (0.4, 0.35, 0.6, 0.45), atol=1e-12)


def test_box_iou_values():
    a = (0.0, 0.0, 1.0, 1.0)
    assert box_iou(a, a) == 1.0
    assert box_iou(a, (2.0, 2.0, 3.0, 3.0)) == 0.0
    assert abs(box_iou(a, (0.5, 0.0, 1.5, 1.0)) - 1.0 / 3.0) < 1e-12


def test_nms_keeps_strongest_overlap():
    dets = [
        {"capsule": "circle", "p": 0.8, "box": (0.1, 0.1, 0.3, 0.3)},
        {"capsule": "box", "p": 0.9, "box": (0.12, 0.1, 0.32, 0.3)},
        {"capsule": "circle", "p": 0.7, "box": (0.6, 0.6, 0.8, 0.8)},
    ]
    kept = nms_filter(dets, iou=0.5)
    assert len(kept) == 2
    assert kept[0]["capsule"] == "box"
    assert kept[1]["p"] == 0.7


def test_binding_candidates_no_reuse():
    boxes = {0: (0.1, 0.1, 0.2, 0.2), 1: (0.3, 0.1, 0.4, 0.2)}
    out = binding_candidates([[0, 1], [0, 1]], boxes)
    assert (0, 0) not in out and (1, 1) not in out
    assert set(out) == {(0, 1), (1, 0)}


def test_binding_candidates_prunes_distant_parts():
    boxes = {0: (0.1, 0.1, 0.2, 0.2), 1: (0.22, 0.1, 0.32, 0.2),
             2: (0.8, 0.8, 0.9, 0.9)}
    out = binding_candidates([[0], [1, 2]], boxes, radius=2.0)
    assert out == [(0, 1)]  # node 2 sits far outside the anchor's reach


def test_binding_candidates_cap():
    boxes = {i: (0.1 * (i % 3), 0.1 * (i // 3), 0.1 * (i % 3) + 0.3,
                 0.1 * (i // 3) + 0.3) for i in range(6)}
    pool = list(range(6))
    out = binding_candidates([pool, pool, pool], boxes, cap=10)
    assert len(out) == 10


def test_resolve_consumption_conflict():
    acts = [
        {"id": 10, "capsule": "a", "route": 0, "p": 0.9, "parts": (0, 1)},
        {"id": 11, "capsule": "a", "route": 0, "p": 0.8, "parts": (1, 2)},
        {"id": 12, "capsule": "a", "route": 0, "p": 0.7, "parts": (3, 4)},
    ]
    out = resolve_consumption(acts)
    assert [a["id"] for a in out] == [10, 12]


def test_resolve_consumption_cascade():
    # the grandparent stands on activation 11, which loses its parts
    acts = [
        {"id": 20, "capsule": "g", "route": 0, "p": 0.95, "parts": (11,)},
        {"id": 10, "capsule": "a", "route": 0, "p": 0.9, "parts": (0, 1)},
        {"id": 11, "capsule": "a", "route": 0, "p": 0.8, "parts": (1, 2)},
    ]
    out = resolve_consumption(acts)
    assert [a["id"] for a in out] == [10]


# ----------------------------------------------------------------- detect

def test_detect_pair_scene():
    net = _make_net()
    graph = net.detect(_pair_scene(), image_ref="pair.png")
    kinds = sorted(n.capsule for n in graph.nodes)
    assert kinds == ["circle", "circle", "pair"]
    pair_node = [n for n in graph.nodes if n.capsule == "pair"][0]
    assert graph.roots == [pair_node.id]
    assert sorted(pair_node.children) == sorted(
        n.id for n in graph.nodes if n.capsule == "circle")
    assert pair_node.p >= 0.7
    assert graph.image == "pair.png"
    # detected attrs sit close to the construction
    want = _base_parent()
    got = np.array([pair_node.attrs[n] for n in CIRCLE.names])
    assert np.all(np.abs(got - want) <= 0.05)


def test_detect_primitive_attrs_accuracy():
    net = _make_net()
    graph = net.detect(_pair_scene())
    circles = sorted((n for n in graph.nodes if n.capsule == "circle"),
                     key=lambda n: n.attrs["pos_x"])
    for node, truth in zip(circles, BASE_PARTS):
        got = np.array([node.attrs[n] for n in CIRCLE.names])
        assert np.all(np.abs(got - truth) <= 0.05)


def test_detect_updates_memory_and_pass_counter():
    net = _make_net()
    assert net.pass_counter == 0
    graph = net.detect(_pair_scene())
    assert net.pass_counter == 1
    assert graph.pass_id == 0
    assert len(net.memory) == 3
    pair_entry = net.memory.entries_for("pair")[0]
    assert len(pair_entry.parts) == 2
    for pid in pair_entry.parts:
        assert net.memory.get(pid).capsule == "circle"
    # consumed-input means now reflect the circles' probabilities
    got = net.memory.p_bar("pair", 0, 0)
    assert got is not None and got > 0.5


def test_detect_empty_image():
    net = _make_net()
    graph = net.detect(np.zeros((64, 64)))
    assert graph.nodes == [] and graph.roots == []


def test_detect_deterministic():
    a = _make_net().detect(_pair_scene())
    b = _make_net().detect(_pair_scene())
    assert json.dumps(a.to_json(), sort_keys=True) == \
        json.dumps(b.to_json(), sort_keys=True)


def test_detect_skips_memory_when_asked():
    net = _make_net()
    net.detect(_pair_scene(), update_memory=False)
    assert len(net.memory) == 0


def test_detect_near_miss_on_style_mismatch():
    # decoder remembers intensity 0.85; the scene shows 0.3, so the pair
    # candidate loses one slot per part and lands under its raised threshold
    net = _make_net(copy_styles=False, pair_threshold=0.95)
    graph = net.detect(_pair_scene(intensity=0.3))
    assert sorted(n.capsule for n in graph.nodes) == ["circle", "circle"]
    assert len(graph.roots) == 2
    misses = [m for m in graph.near_misses if m["capsule"] == "pair"]
    assert len(misses) == 1
    miss = misses[0]
    assert 0.7 <= miss["p"] < 0.95
    for part in miss["agreement"]:
        assert part["slots"]["intensity"] < 0.05
        assert part["slots"]["pos_x"] > 0.8
        assert part["slots"]["pos_y"] > 0.8


class _ConstEncoder:
    """Always claims the same circle, whatever the patch shows."""

    def __init__(self, layout, vals):
        self.layout = layout
        self.vals = np.asarray(vals, dtype=np.float64)
        self.model = SimpleNamespace(dtype=np.float64)

    def __call__(self, patch):
        x = np.asarray(patch)
        if x.ndim == 3:
            return np.tile(self.vals, (x.shape[0], 1))
        return self.vals.copy()


def _const_net(vals):
    net = CapsuleNetwork()
    circ = Capsule("circle", CIRCLE, PRIMITIVE_SYMMETRIES["circle"],
                   shape="circle")
    circ.encoder = _ConstEncoder(CIRCLE, vals)
    net.add_capsule(circ)
    return net


def test_detect_rejects_claims_poking_out_of_window():
    # claimed circle extends past the window edge: some larger window owns it
    net = _const_net([0.9, 0.5, 0.0, 0.5, 0.5, 0.9])
    graph = net.detect(_pair_scene())
    assert graph.nodes == []


def test_support_overlap_scores():
    shape = draw_primitive(PrimitiveParams("circle", pos=(0.3, 0.3), rot=0.0,
                                           size=(0.4, 0.4), intensity=0.9),
                           28, 28)
    far = draw_primitive(PrimitiveParams("circle", pos=(0.75, 0.75), rot=0.0,
                                         size=(0.4, 0.4), intensity=0.9),
                         28, 28)
    assert support_overlap(shape, shape) == 1.0
    assert support_overlap(shape, far) == 0.0
    assert support_overlap(shape, np.zeros((28, 28))) < 1e-9
    # a flat lit background must not swallow the actual support
    on_bg = np.clip(far + 0.4, 0.0, 1.0)
    assert support_overlap(far, on_bg) > 0.9
    assert support_overlap(np.zeros((28, 28)), np.zeros((28, 28))) == 1.0


def test_detect_untrained_primitive_raises():
    net = CapsuleNetwork()
    net.add_capsule(Capsule("circle", CIRCLE, shape="circle"))
    with pytest.raises(ValueError):
        net.detect(np.ones((64, 64)) * 0.5)


def test_add_capsule_rejects_duplicates():
    net = _make_net()
    with pytest.raises(ValueError):
        net.add_capsule(Capsule("circle", CIRCLE, shape="circle"))


def test_observed_axioms():
    net = _make_net()
    graph = net.detect(_pair_scene())
    axioms = net.observed_axioms(graph)
    assert [a.capsule for a in axioms] == ["pair"]


# ----------------------------------------------------------------- render

def test_render_primitive_matches_draw():
    net = _make_net()
    attrs = dict(zip(CIRCLE.names, [0.5, 0.5, 0.0, 0.3, 0.3, 0.8]))
    layer = net.render("circle", attrs, (64, 64))
    params = PrimitiveParams("circle", pos=(0.5, 0.5), rot=0.0,
                             size=(0.3, 0.3), intensity=0.8)
    assert np.array_equal(layer, composite_over(np.zeros((64, 64)), params))


def test_render_semantic_composites_parts():
    net = _make_net()
    layer = net.render("pair", _base_parent(), (64, 64))
    decoder = net.capsules["pair"].route(0).decoder
    manual = np.zeros((64, 64))
    for vals in decoder(_base_parent()):
        manual = composite_over(manual, PrimitiveParams(
            "circle", pos=(vals[0], vals[1]), rot=vals[2],
            size=(vals[3], vals[4]), intensity=vals[5]))
    assert np.array_equal(layer, manual)


def test_render_depth_order_later_covers_earlier():
    net = CapsuleNetwork()
    circ = Capsule("circle", CIRCLE, PRIMITIVE_SYMMETRIES["circle"],
                   shape="circle")
    circ.encoder = _AnalyticEncoder(CIRCLE)
    net.add_capsule(circ)
    overlapping = [np.array([0.5, 0.5, 0.0, 0.4, 0.4, 0.4]),
                   np.array([0.5, 0.5, 0.0, 0.2, 0.2, 0.9])]
    parts = [AttributeVector(CIRCLE, p) for p in overlapping]
    parent_vals = gamma_semantic(parts, CIRCLE).values
    stack = Capsule("stack", CIRCLE)
    stack.add_route(("circle", "circle"),
                    decoder=_ExactPairDecoder(parent_vals, overlapping,
                                              [CIRCLE, CIRCLE],
                                              copy_styles=False),
                    canonical=overlapping, part_layouts=[CIRCLE, CIRCLE])
    net.add_capsule(stack)
    layer = net.render("stack", parent_vals, (64, 64))
    assert abs(layer[32, 32] - 0.9) < 0.05  # the later slot paints on top
    assert abs(layer[32, 22] - 0.4) < 0.05  # the big circle shows outside


def test_render_graph_reconstructs_scene():
    net = _make_net()
    scene = _pair_scene()
    graph = net.detect(scene)
    redraw = net.render_graph(graph, scene.shape)
    assert float(np.mean(np.abs(redraw - scene))) < 0.05


def test_segmentation_mask_disc():
    net = _make_net()
    graph = net.detect(_pair_scene())
    circle_node = [n for n in graph.nodes if n.capsule == "circle"][0]
    mask = net.segmentation_mask(graph, circle_node.id, (64, 64))
    radius_px = circle_node.attrs["size_w"] * 64 / 2
    est = np.sqrt(mask.sum() / np.pi)
    assert abs(est - radius_px) <= 1.0


def test_segmentation_mask_of_parent_covers_children():
    net = _make_net()
    graph = net.detect(_pair_scene())
    pair_node = [n for n in graph.nodes if n.capsule == "pair"][0]
    parent_mask = net.segmentation_mask(graph, pair_node.id, (64, 64))
    for cid in pair_node.children:
        child_mask = net.segmentation_mask(graph, cid, (64, 64))
        overlap = (parent_mask * child_mask).sum() / max(child_mask.sum(), 1)
        assert overlap > 0.9


def test_render_untrained_route_raises():
    net = CapsuleNetwork()
    circ = Capsule("circle", CIRCLE, shape="circle")
    net.add_capsule(circ)
    sem = Capsule("pair", CIRCLE)
    sem.add_route(("circle",), part_layouts=[CIRCLE])
    net.add_capsule(sem)
    with pytest.raises(ValueError):
        net.render("pair", _base_parent(), (64, 64))


# ------------------------------------------------------------ persistence

def _real_net() -> CapsuleNetwork:
    net = CapsuleNetwork()
    circ = Capsule("circle", CIRCLE, PRIMITIVE_SYMMETRIES["circle"],
                   shape="circle")
    conv = ConvModel(in_size=28, channels=(4, 8), hidden=16,
                     out_dim=CIRCLE.n + 1, seed=3, dtype=np.float32)
    circ.encoder = PrimitiveEncoder(conv, CIRCLE, fold=1)
    net.add_capsule(circ)
    pair = Capsule("pair", CIRCLE)
    dec = DenseModel([CIRCLE.n + 1, 16, 16, 16, 2 * (CIRCLE.n + 1)], seed=4)
    route = pair.add_route(("circle", "circle"),
                           canonical=[p.copy() for p in BASE_PARTS],
                           part_layouts=[CIRCLE, CIRCLE])
    route.decoder = SemanticDecoder(dec, CIRCLE, [CIRCLE, CIRCLE])
    pair.style_encoders["glow"] = DenseModel([2 * CIRCLE.n, 8, 8, 8, 1], seed=5)
    net.add_capsule(pair)
    net.memory.append(ObservationEntry("circle", 0, 0.9,
                                       dict(zip(CIRCLE.names, BASE_PARTS[0]))))
    net.memory.append(ObservationEntry("circle", 0, 0.8,
                                       dict(zip(CIRCLE.names, BASE_PARTS[1]))))
    net.memory.append(ObservationEntry("pair", 0, 0.85,
                                       dict(zip(CIRCLE.names, _base_parent())),
                                       parts=(0, 1)))
    net.pass_counter = 7
    return net


def test_save_load_round_trip(tmp_path):
    net = _real_net()
    net.save(tmp_path / "net")
    loaded = CapsuleNetwork.load(tmp_path / "net")
    assert loaded.pass_counter == 7
    assert json.dumps(loaded.to_json(), sort_keys=True) == \
        json.dumps(net.to_json(), sort_keys=True)
    assert len(loaded.memory) == 3
    assert loaded.memory.p_bar("pair", 0, 0) == net.memory.p_bar("pair", 0, 0)
    route = loaded.capsules["pair"].route(0)
    assert route.decoder is not None
    assert np.allclose(route.canonical[0], BASE_PARTS[0])
    assert loaded.capsules["circle"].encoder.fold == 1


def test_reload_is_stable(tmp_path):
    net = _real_net()
    net.save(tmp_path / "a")
    first = CapsuleNetwork.load(tmp_path / "a")
    second = CapsuleNetwork.load(tmp_path / "a")
    x = np.random.default_rng(0).uniform(size=(2, 28, 28))
    assert np.array_equal(first.capsules["circle"].encoder(x),
                          second.capsules["circle"].encoder(x))
    v = _base_parent()
    for p1, p2 in zip(first.capsules["pair"].route(0).decoder(v),
                      second.capsules["pair"].route(0).decoder(v)):
        assert np.array_equal(p1, p2)


def test_resave_is_byte_identical(tmp_path):
    net = _real_net()
    net.save(tmp_path / "a")
    loaded = CapsuleNetwork.load(tmp_path / "a")
    loaded.save(tmp_path / "b")
    for rel in ["network.json", "memory.jsonl",
                "weights/circle__enc", "weights/circle__enc.json",
                "weights/pair__r0", "weights/pair__r0.json",
                "weights/pair__s_glow", "weights/pair__s_glow.json"]:
        a = (tmp_path / "a" / rel).read_bytes()
        b = (tmp_path / "b" / rel).read_bytes()
        assert a == b, rel


def test_float32_encoder_survives_reload_exactly(tmp_path):
    net = _real_net()
    x = np.random.default_rng(1).uniform(size=(3, 28, 28))
    before = net.capsules["circle"].encoder(x)
    net.save(tmp_path / "n")
    loaded = CapsuleNetwork.load(tmp_path / "n")
    assert np.array_equal(before, loaded.capsules["circle"].encoder(x))
