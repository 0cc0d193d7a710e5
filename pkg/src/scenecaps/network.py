"""Capsule network: full forward pass and backward rendering.

The forward pass slides multi-scale windows over the image, activates
primitive capsules on each window through render-and-compare agreement,
suppresses duplicate detections, then routes observations upward through
the semantic capsules in dependency order until no new activation
appears.  Surviving activations form the pass's observed parse forest
and are appended to the lifelong memory.  The backward direction walks
route decoders from any node's attributes down to primitive draw calls,
which makes the network a procedural graphics engine for its own scene
graphs.
"""

from __future__ import annotations

import json
import math
import os
from dataclasses import dataclass, field

import numpy as np

from .attributes import AttributeLayout, AttributeVector, standard_layout
from .capsule import (Capsule, MemoryStore, ObservationEntry,
                      PrimitiveEncoder, Route, SemanticDecoder, Symmetry,
                      agreement_primitive, agreement_semantic,
                      route_probability, route_select)
from .regress import load_weights, save_weights
from .sdf import PrimitiveParams, bilinear_resample, composite_over, draw_primitive
from .train import (_topo_order, gamma_semantic, learned_style_values,
                    part_corners, project_attrs, register_parts)


# pose-only view for box computations over heterogeneous node layouts
_POSE_VIEW = standard_layout([])


@dataclass(frozen=True)
class DetectConfig:
    """Forward-pass knobs; defaults suit 64x64 scenes and 28px encoders."""

    patch: int = 28
    scales: tuple = (12, 20, 32)
    min_contrast: float = 0.05   # windows flatter than this never activate
    min_size: float = 0.12       # decoded sizes below the trained range are noise
    min_intensity: float = 0.15
    contain_slack: float = 0.05  # predicted shape must fit its window this far
    support_iou: float = 0.5     # lit-pixel overlap between claim and patch
    support_precision: float = 0.7   # claimed pixels that are actually lit
    nms_iou: float = 0.5
    nms_cover: float = 0.6       # containment fraction that counts as overlap
    truncated_ring: int = 4      # border contact per edge that reads as clipped
    bind_radius: float = 2.0     # in union-box diagonals
    bind_cap: int = 2000
    near_miss_floor: float = 0.3
    max_sweeps: int = 8


@dataclass
class PatchProposal:
    x0: int
    y0: int
    scale: int
    patch: np.ndarray


@dataclass
class SceneNode:
    id: int
    capsule: str
    route: int
    p: float
    attrs: dict
    children: list = field(default_factory=list)

    def to_json(self) -> dict:
        return {
            "id": self.id,
            "capsule": self.capsule,
            "route": self.route,
            "p": float(self.p),
            "attrs": {k: float(v) for k, v in self.attrs.items()},
            "children": list(self.children),
        }

    @staticmethod
    def from_json(obj: dict) -> "SceneNode":
        return SceneNode(id=int(obj["id"]), capsule=obj["capsule"],
                         route=int(obj["route"]), p=float(obj["p"]),
                         attrs=dict(obj["attrs"]),
                         children=list(obj["children"]))


@dataclass
class SceneGraph:
    pass_id: int
    image: str | None
    nodes: list
    roots: list
    near_misses: list = field(default_factory=list)

    def node(self, node_id: int) -> SceneNode:
        return self.nodes[node_id]

    def to_json(self) -> dict:
        return {
            "pass_id": self.pass_id,
            "image": self.image,
            "nodes": [n.to_json() for n in self.nodes],
            "roots": list(self.roots),
            "near_misses": [dict(m) for m in self.near_misses],
        }

    @staticmethod
    def from_json(obj: dict) -> "SceneGraph":
        return SceneGraph(pass_id=int(obj["pass_id"]), image=obj.get("image"),
                          nodes=[SceneNode.from_json(n) for n in obj["nodes"]],
                          roots=list(obj["roots"]),
                          near_misses=[dict(m) for m in obj.get("near_misses", [])])


def propose_patches(image: np.ndarray, config: DetectConfig = DetectConfig()) -> list:
    """Multi-scale sliding windows resampled to the encoder resolution.

    Stride is a quarter of the window; a final offset is appended per axis
    so the last window always touches the image edge.
    """
    img = np.asarray(image, dtype=np.float64)
    if img.size == 0:
        raise ValueError("empty image")
    H, W = img.shape
    out = []
    for scale in config.scales:
        s = int(min(scale, H, W))
        stride = max(1, s // 4)

        def starts(limit):
            xs = list(range(0, limit + 1, stride))
            if xs[-1] != limit:
                xs.append(limit)
            return xs

        for y0 in starts(H - s):
            for x0 in starts(W - s):
                patch = img[y0:y0 + s, x0:x0 + s]
                if s != config.patch:
                    patch = bilinear_resample(patch, config.patch, config.patch)
                out.append(PatchProposal(x0=x0, y0=y0, scale=s, patch=patch))
    return out


def support_overlap(expected, actual, floor: float = 0.05) -> float:
    """IoU of lit-pixel supports; the actual patch is floored at its own
    minimum so shapes sitting on a flat lit background keep their support."""
    e = expected > floor
    a = actual - actual.min() > floor
    union = np.logical_or(e, a).sum()
    if union == 0:
        return 1.0
    return float(np.logical_and(e, a).sum() / union)


def support_precision(expected, actual, floor: float = 0.05) -> float:
    """Fraction of the claim's lit pixels that the patch actually lights.

    A wide claim painted over two separate shapes keeps a decent IoU but
    invents the pixels between them; this ratio exposes that."""
    e = expected > floor
    a = actual - actual.min() > floor
    claimed = e.sum()
    if claimed == 0:
        return 1.0
    return float(np.logical_and(e, a).sum() / claimed)


def support_components(actual, floor: float = 0.05, ring_limit: int = 4) -> tuple:
    """4-connected components of the patch's lit support.

    Returns (labels, truncated): labels is an int array with 0 on dark
    pixels and component ids from 1, truncated the set of ids that cross
    the patch border.  Crossing means at least ring_limit pixels on a
    single border edge: a shape continuing outside the window cuts the
    edge with a wide solid run, while a complete shape grazing the edge
    corner-first leaves only a 2-3 pixel chord and stays claimable.
    """
    a = np.asarray(actual, dtype=np.float64)
    mask = a - a.min() > floor
    h, w = mask.shape
    labels = np.zeros((h, w), dtype=np.int32)
    nxt = 0
    for si in range(h):
        for sj in range(w):
            if not mask[si, sj] or labels[si, sj]:
                continue
            nxt += 1
            stack = [(si, sj)]
            labels[si, sj] = nxt
            while stack:
                i, j = stack.pop()
                for ni, nj in ((i - 1, j), (i + 1, j), (i, j - 1), (i, j + 1)):
                    if 0 <= ni < h and 0 <= nj < w and mask[ni, nj] \
                            and not labels[ni, nj]:
                        labels[ni, nj] = nxt
                        stack.append((ni, nj))
    truncated = set()
    for edge in (labels[0, :], labels[h - 1, :], labels[:, 0], labels[:, w - 1]):
        ids, counts = np.unique(edge[edge > 0], return_counts=True)
        truncated.update(int(c) for c, n in zip(ids, counts) if n >= ring_limit)
    return labels, truncated


def observation_box(values) -> tuple:
    """Axis-aligned bounds of a pose's rotated rectangle, canvas fractions."""
    c = part_corners(np.asarray(values, dtype=np.float64))
    return (float(c[:, 0].min()), float(c[:, 1].min()),
            float(c[:, 0].max()), float(c[:, 1].max()))


def box_iou(a: tuple, b: tuple) -> float:
    ix0, iy0 = max(a[0], b[0]), max(a[1], b[1])
    ix1, iy1 = min(a[2], b[2]), min(a[3], b[3])
    iw, ih = max(0.0, ix1 - ix0), max(0.0, iy1 - iy0)
    inter = iw * ih
    if inter == 0.0:
        return 0.0
    area_a = (a[2] - a[0]) * (a[3] - a[1])
    area_b = (b[2] - b[0]) * (b[3] - b[1])
    return inter / (area_a + area_b - inter)


def box_cover(a: tuple, b: tuple) -> float:
    """Intersection over the smaller box's area.

    High when one box sits mostly inside the other even if their sizes, and
    hence the IoU, differ a lot; a ghost hallucinated around a real shape
    from a looser window is caught by this and not by IoU.
    """
    ix0, iy0 = max(a[0], b[0]), max(a[1], b[1])
    ix1, iy1 = min(a[2], b[2]), min(a[3], b[3])
    iw, ih = max(0.0, ix1 - ix0), max(0.0, iy1 - iy0)
    inter = iw * ih
    if inter == 0.0:
        return 0.0
    area_a = (a[2] - a[0]) * (a[3] - a[1])
    area_b = (b[2] - b[0]) * (b[3] - b[1])
    smaller = min(area_a, area_b)
    if smaller <= 0.0:
        return 1.0
    return inter / smaller


def nms_filter(detections: list, iou: float = 0.5, cover: float = 1.0) -> list:
    """Keep the strongest of overlapping detections, across capsules.

    Suppresses on box IoU above `iou` or containment (intersection over the
    smaller area) above `cover`.  detections: dicts with at least p, box,
    capsule.  Deterministic: sorted by descending p with name and position
    breaking ties.
    """
    ranked = sorted(detections,
                    key=lambda d: (-d["p"], d["capsule"], d["box"][1], d["box"][0]))
    kept = []
    for det in ranked:
        if all(box_iou(det["box"], k["box"]) <= iou
               and box_cover(det["box"], k["box"]) <= cover for k in kept):
            kept.append(det)
    return kept


def binding_candidates(slot_pools: list, boxes: dict, radius: float = 2.0,
                       cap: int = 2000) -> list:
    """Distinct-node slot assignments, pruned by spatial proximity.

    slot_pools[i] lists candidate node ids for slot i.  A candidate joins a
    partial binding only if its box center lies within `radius` union-box
    diagonals of the union box built so far, which keeps the enumeration
    local and bounded; `cap` truncates the result deterministically.
    """
    out = []

    def rec(i, chosen, union):
        if len(out) >= cap:
            return
        if i == len(slot_pools):
            out.append(tuple(chosen))
            return
        for nid in slot_pools[i]:
            if nid in chosen:
                continue
            b = boxes[nid]
            if union is not None:
                diag = math.hypot(union[2] - union[0], union[3] - union[1])
                reach = radius * max(diag, 0.05)
                cx, cy = (union[0] + union[2]) / 2, (union[1] + union[3]) / 2
                bx, by = (b[0] + b[2]) / 2, (b[1] + b[3]) / 2
                if math.hypot(bx - cx, by - cy) > reach:
                    continue
            nu = b if union is None else (min(union[0], b[0]), min(union[1], b[1]),
                                          max(union[2], b[2]), max(union[3], b[3]))
            rec(i + 1, chosen + [nid], nu)
    rec(0, [], None)
    return out


def resolve_consumption(activations: list) -> list:
    """Greedy exclusive assignment of parts to parents.

    activations: dicts with p, capsule, route, parts (node id tuple), plus a
    provisional id.  Processed by descending p; an activation survives only
    if none of its parts is already consumed.  Afterwards any survivor
    standing on a dropped provisional activation is removed too.  Returns
    surviving activations in processing order.
    """
    ranked = sorted(activations,
                    key=lambda a: (-a["p"], a["capsule"], a["route"], a["parts"]))
    consumed = set()
    accepted = []
    for act in ranked:
        if any(pid in consumed for pid in act["parts"]):
            continue
        accepted.append(act)
        consumed.update(act["parts"])
    alive = {a["id"] for a in accepted}
    tentative_ids = {a["id"] for a in activations}
    changed = True
    while changed:
        changed = False
        for act in list(accepted):
            dead = [pid for pid in act["parts"]
                    if pid in tentative_ids and pid not in alive]
            if dead:
                accepted.remove(act)
                alive.discard(act["id"])
                changed = True
    return accepted


class CapsuleNetwork:
    """One capsule per symbol plus the lifelong observation memory."""

    def __init__(self):
        self.capsules: dict[str, Capsule] = {}
        self.memory = MemoryStore()
        self.pass_counter = 0

    def add_capsule(self, capsule: Capsule) -> Capsule:
        if capsule.name in self.capsules:
            raise ValueError(f"capsule {capsule.name!r} already registered")
        self.capsules[capsule.name] = capsule
        return capsule

    def topo_order(self) -> list:
        return _topo_order(self.capsules)

    # ------------------------------------------------------------ forward

    def _primitive_pass(self, image, config: DetectConfig) -> tuple:
        """Detections and near-miss candidates from all primitive capsules."""
        H, W = image.shape
        proposals = propose_patches(image, config)
        live = [pr for pr in proposals
                if float(pr.patch.max() - pr.patch.min()) >= config.min_contrast]
        prim_caps = [c for _, c in sorted(self.capsules.items()) if c.is_primitive]
        for cap in prim_caps:
            if cap.encoder is None:
                raise ValueError(f"primitive capsule {cap.name!r} is untrained")
        # one window depicts at most one primitive, so the capsules compete
        # per window and only the best-agreeing claim survives
        best = [None] * len(live)
        comps = [None] * len(live)   # lazy per-window component labels
        for cap in prim_caps if live else []:
            chunks = [cap.encoder(np.stack([pr.patch for pr in live[k:k + 256]]))
                      for k in range(0, len(live), 256)]
            decoded = np.concatenate(chunks)
            layout = cap.layout
            i_int = layout.index("intensity") if "intensity" in layout.names else None
            p_bar = self.memory.p_bar(cap.name, 0, 0, default=1.0)
            for j, (pr, vals) in enumerate(zip(live, decoded)):
                if min(vals[3], vals[4]) < config.min_size:
                    continue
                if i_int is not None and vals[i_int] < config.min_intensity:
                    continue
                # fragments belong to some larger window: only windows that
                # (nearly) contain the predicted shape may claim it
                slack = config.contain_slack
                if vals[0] - vals[3] / 2 < -slack or \
                        vals[0] + vals[3] / 2 > 1 + slack or \
                        vals[1] - vals[4] / 2 < -slack or \
                        vals[1] + vals[4] / 2 > 1 + slack:
                    continue
                params = PrimitiveParams(cap.shape, pos=(vals[0], vals[1]),
                                         rot=vals[2], size=(vals[3], vals[4]),
                                         intensity=vals[i_int] if i_int is not None else 1.0)
                expected = draw_primitive(params, config.patch, config.patch)
                # whole-patch mean agreement is blind to small shapes, so
                # the claimed support must actually cover the lit pixels
                # without inventing bridges between separate ones
                if support_overlap(expected, pr.patch) < config.support_iou:
                    continue
                if support_precision(expected, pr.patch) < config.support_precision:
                    continue
                # a shape truncated by the window edge cannot be explained
                # from this window; its corner is not a complete small shape
                if comps[j] is None:
                    comps[j] = support_components(
                        pr.patch, ring_limit=config.truncated_ring)
                labels, truncated = comps[j]
                claimed = set(np.unique(labels[expected > 0.05])) - {0}
                if claimed & truncated:
                    continue
                p = route_probability([(1.0, p_bar, pr.patch)], [expected],
                                      agreement_primitive)
                if p < config.near_miss_floor:
                    continue
                img_vals = vals.copy()
                img_vals[0] = (pr.x0 + vals[0] * pr.scale) / W
                img_vals[1] = (pr.y0 + vals[1] * pr.scale) / H
                img_vals[3] = vals[3] * pr.scale / W
                img_vals[4] = vals[4] * pr.scale / H
                det = {"capsule": cap.name, "route": 0, "p": float(p),
                       "attrs": dict(zip(layout.names, (float(v) for v in img_vals))),
                       "box": observation_box(img_vals),
                       "threshold": cap.threshold}
                if best[j] is None or p > best[j]["p"]:
                    best[j] = det
        detections = []
        misses = []
        for det in best:
            if det is None:
                continue
            threshold = det.pop("threshold")
            if det["p"] >= threshold:
                detections.append(det)
            else:
                misses.append(det)
        detections = nms_filter(detections, config.nms_iou, config.nms_cover)
        # near misses: suppressed by real detections, then by each other
        misses = [m for m in misses
                  if all(box_iou(m["box"], d["box"]) <= config.nms_iou
                         and box_cover(m["box"], d["box"]) <= config.nms_cover
                         for d in detections)]
        misses = nms_filter(misses, config.nms_iou, config.nms_cover)
        by_cap: dict = {}
        for m in misses:
            by_cap.setdefault(m["capsule"], []).append(m)
        misses = [m for ms in by_cap.values() for m in ms[:8]]
        return detections, misses

    def _registration(self, actual_vals, canonical) -> float:
        if canonical is None:
            return 0.0
        k = len(actual_vals)
        tags = [str(i) for i in range(k)]  # fixed pairing, slot by slot
        rot, _, _ = register_parts(actual_vals, tags, canonical, tags)
        return rot

    def _evaluate_binding(self, cap: Capsule, route: Route, nodes: list) -> dict:
        """Route probability and parent attributes for one slot assignment."""
        views = route.part_layouts
        actual = [project_attrs(n.attrs, view) for n, view in zip(nodes, views)]
        theta = self._registration(actual, route.canonical)
        parts_av = [AttributeVector(view, a) for view, a in zip(views, actual)]
        parent = gamma_semantic(parts_av, cap.layout, parent_rot=theta)
        vals = parent.values
        for name, value in learned_style_values(cap, route, actual).items():
            vals[cap.layout.index(name)] = value
        expected = route.decoder(vals)
        sym = [self.capsules[s].symmetry if s in self.capsules else Symmetry()
               for s in route.part_slots]
        agreements = [agreement_semantic(a, e, view, symmetry)
                      for a, e, view, symmetry in zip(actual, expected, views, sym)]
        triples = []
        for i, n in enumerate(nodes):
            p_bar = self.memory.p_bar(cap.name, route.id, i, default=n.p)
            triples.append((n.p, p_bar, actual[i]))
        agreement_iter = iter(agreements)
        p = route_probability(triples, expected, lambda a, e: next(agreement_iter))
        return {
            "p": float(p),
            "attrs": dict(zip(cap.layout.names, (float(v) for v in vals))),
            "agreement": [{"mean": float(np.mean(z)),
                           "slots": {name: float(v)
                                     for name, v in zip(view.names, z)}}
                          for z, view in zip(agreements, views)],
        }

    def detect(self, image, config: DetectConfig = DetectConfig(),
               image_ref: str | None = None, update_memory: bool = True) -> SceneGraph:
        """Forward pass: primitives, then semantic routing to fixpoint."""
        image = np.asarray(image, dtype=np.float64)
        detections, prim_misses = self._primitive_pass(image, config)

        nodes = []
        for det in detections:
            nodes.append(SceneNode(id=len(nodes), capsule=det["capsule"], route=0,
                                   p=det["p"], attrs=det["attrs"]))

        order = [n for n in self.topo_order()
                 if not self.capsules[n].is_primitive]
        tentative = []       # activation dicts with provisional node ids
        near_misses = {}     # best below-threshold candidate per capsule/route
        node_by_id = {n.id: n for n in nodes}

        def box_of(nid):
            return observation_box(project_attrs(node_by_id[nid].attrs,
                                                 _POSE_VIEW))

        evaluated = set()
        for _ in range(config.max_sweeps):
            new_activation = False
            for name in order:
                cap = self.capsules[name]
                for route in cap.routes:
                    if route.decoder is None:
                        continue
                    pools = []
                    for slot in route.part_slots:
                        pools.append([n.id for n in nodes
                                      if n.capsule == slot])
                    if any(not pool for pool in pools):
                        continue
                    boxes = {nid: box_of(nid) for pool in pools for nid in pool}
                    grouped: dict = {}
                    for binding in binding_candidates(pools, boxes,
                                                      config.bind_radius,
                                                      config.bind_cap):
                        key = (name, route.id, binding)
                        if key in evaluated:
                            continue
                        evaluated.add(key)
                        bound = [node_by_id[nid] for nid in binding]
                        res = self._evaluate_binding(cap, route, bound)
                        grouped.setdefault(frozenset(binding), []).append(
                            (route.id, res["p"], (binding, res)))
                    for _key, cands in sorted(grouped.items(),
                                              key=lambda kv: sorted(kv[0])):
                        rid, p, (binding, res), activated = route_select(
                            cands, threshold=cap.threshold)
                        if activated:
                            node = SceneNode(id=len(nodes), capsule=name,
                                             route=rid, p=p,
                                             attrs=res["attrs"],
                                             children=list(binding))
                            tentative.append({"id": node.id, "capsule": name,
                                              "route": rid, "p": p,
                                              "parts": tuple(binding),
                                              "node": node})
                            nodes.append(node)
                            node_by_id[node.id] = node
                            new_activation = True
                        else:
                            slot = near_misses.get((name, rid))
                            if p >= config.near_miss_floor and \
                                    (slot is None or p > slot["p"]):
                                near_misses[(name, rid)] = {
                                    "capsule": name, "route": rid,
                                    "p": float(p), "parts": list(binding),
                                    "attrs": res["attrs"],
                                    "agreement": res["agreement"],
                                }
            if not new_activation:
                break

        surviving = resolve_consumption(tentative)
        alive_ids = {n.id for n in nodes if n.route == 0 and
                     n.capsule in self.capsules and
                     self.capsules[n.capsule].is_primitive}
        alive_ids |= {a["id"] for a in surviving}

        final_nodes = []
        remap = {}
        for n in nodes:
            if n.id not in alive_ids:
                continue
            remap[n.id] = len(final_nodes)
            final_nodes.append(n)
        for n in final_nodes:
            n.id = remap[n.id]
            n.children = [remap[c] for c in n.children]
        consumed = set()
        for n in final_nodes:
            consumed.update(n.children)
        roots = [n.id for n in final_nodes if n.id not in consumed]

        graph_misses = [dict(m, parts=[remap[p] for p in m["parts"]
                                       if p in remap])
                        for m in (near_misses[k] for k in sorted(near_misses))]
        graph_misses += [{"capsule": m["capsule"], "route": 0, "p": m["p"],
                          "parts": [], "attrs": m["attrs"]}
                         for m in prim_misses]

        graph = SceneGraph(pass_id=self.pass_counter, image=image_ref,
                           nodes=final_nodes, roots=roots,
                           near_misses=graph_misses)
        if update_memory:
            self._append_to_memory(graph)
        self.pass_counter += 1
        return graph

    def _append_to_memory(self, graph: SceneGraph) -> None:
        mem_ids = {}
        for node in graph.nodes:  # children precede parents by construction
            entry = ObservationEntry(capsule=node.capsule, route=node.route,
                                     p=node.p, attrs=dict(node.attrs),
                                     parts=tuple(mem_ids[c] for c in node.children),
                                     pass_id=graph.pass_id)
            self.memory.append(entry)
            mem_ids[node.id] = entry.id

    def observed_axioms(self, graph: SceneGraph) -> list:
        """Roots: observations no parent activation consumed."""
        return [graph.nodes[r] for r in graph.roots]

    # ----------------------------------------------------------- backward

    def _collect_primitives(self, name: str, values, route_id: int, out: list) -> None:
        cap = self.capsules[name]
        if cap.is_primitive:
            layout = cap.layout
            i_int = layout.index("intensity") if "intensity" in layout.names else None
            out.append(PrimitiveParams(
                cap.shape, pos=(float(values[0]), float(values[1])),
                rot=float(values[2]), size=(float(values[3]), float(values[4])),
                intensity=float(values[i_int]) if i_int is not None else 1.0))
            return
        route = cap.route(route_id)
        if route.decoder is None:
            raise ValueError(f"route {name}/{route_id} has no trained decoder")
        for slot, part_vals in zip(route.part_slots, route.decoder(values)):
            self._collect_primitives(slot, part_vals, 0, out)

    def render(self, name: str, attrs, shape: tuple, route_id: int = 0) -> np.ndarray:
        """Draw one capsule instance at the given attributes.

        attrs is an attribute dict or value array in canvas fractions;
        shape is (height, width) pixels.  Parts composite in slot order,
        later slots over earlier ones.
        """
        cap = self.capsules[name]
        if isinstance(attrs, dict):
            values = project_attrs(attrs, cap.layout)
        else:
            values = np.asarray(attrs, dtype=np.float64)
        prims = []
        self._collect_primitives(name, values, route_id, prims)
        H, W = shape
        layer = np.zeros((H, W))
        for params in prims:
            layer = composite_over(layer, params)
        return layer

    def render_graph(self, graph: SceneGraph, shape: tuple) -> np.ndarray:
        """Composite every root of the scene in node order."""
        H, W = shape
        layer = np.zeros((H, W))
        for rid in graph.roots:
            node = graph.nodes[rid]
            part = self.render(node.capsule, node.attrs, shape, node.route)
            layer = np.where(part > 0.0, part, layer)
        return layer

    def segmentation_mask(self, graph: SceneGraph, node_id: int, shape: tuple) -> np.ndarray:
        """Binary support of one node's rendering at its detected pose."""
        node = graph.nodes[node_id]
        layer = self.render(node.capsule, node.attrs, shape, node.route)
        return (layer > 1e-6).astype(np.float64)

    # -------------------------------------------------------- persistence

    def to_json(self) -> dict:
        caps = []
        for name in sorted(self.capsules):
            cap = self.capsules[name]
            caps.append({
                "name": cap.name,
                "shape": cap.shape,
                "threshold": cap.threshold,
                "symmetry": cap.symmetry.to_json(),
                "layout": cap.layout.to_json(),
                "encoder": None if cap.encoder is None else {
                    "fold": cap.encoder.fold,
                    "dtype": np.dtype(cap.encoder.model.dtype).name,
                },
                "routes": [dict(r.to_json(),
                                decoder=None if r.decoder is None else {
                                    "dtype": np.dtype(r.decoder.model.dtype).name})
                           for r in cap.routes],
                "style_encoders": {
                    s: {"dtype": np.dtype(m.dtype).name}
                    for s, m in sorted(cap.style_encoders.items())},
            })
        return {"pass_counter": self.pass_counter, "capsules": caps}

    def save(self, directory) -> None:
        directory = str(directory)
        os.makedirs(os.path.join(directory, "weights"), exist_ok=True)
        self.topo_order()  # raises on cycles before anything touches disk
        with open(os.path.join(directory, "network.json"), "w") as f:
            json.dump(self.to_json(), f, indent=2, sort_keys=True)
        self.memory.save(os.path.join(directory, "memory.jsonl"))
        for name, cap in sorted(self.capsules.items()):
            base = os.path.join(directory, "weights", name)
            if cap.encoder is not None:
                save_weights(cap.encoder.model, base + "__enc")
            for route in cap.routes:
                if route.decoder is not None:
                    save_weights(route.decoder.model, f"{base}__r{route.id}")
            for style, model in sorted(cap.style_encoders.items()):
                save_weights(model, f"{base}__s_{style}")

    @classmethod
    def load(cls, directory) -> "CapsuleNetwork":
        directory = str(directory)
        with open(os.path.join(directory, "network.json")) as f:
            spec = json.load(f)
        net = cls()
        net.pass_counter = int(spec["pass_counter"])
        mem_path = os.path.join(directory, "memory.jsonl")
        if os.path.exists(mem_path):
            net.memory = MemoryStore.load(mem_path)
        for cdef in spec["capsules"]:
            layout = AttributeLayout.from_json(cdef["layout"])
            cap = Capsule(name=cdef["name"], layout=layout,
                          symmetry=Symmetry.from_json(cdef["symmetry"]),
                          threshold=float(cdef["threshold"]),
                          shape=cdef.get("shape"))
            base = os.path.join(directory, "weights", cap.name)
            enc = cdef.get("encoder")
            if enc is not None:
                model = load_weights(base + "__enc", dtype=np.dtype(enc["dtype"]))
                cap.encoder = PrimitiveEncoder(model, layout, fold=int(enc["fold"]))
            for rdef in cdef["routes"]:
                route = Route.from_json(rdef)
                if rdef.get("decoder") is not None:
                    model = load_weights(f"{base}__r{route.id}",
                                         dtype=np.dtype(rdef["decoder"]["dtype"]))
                    route.decoder = SemanticDecoder(model, layout, route.part_layouts)
                cap.routes.append(route)
            for style, sdef in cdef.get("style_encoders", {}).items():
                cap.style_encoders[style] = load_weights(
                    f"{base}__s_{style}", dtype=np.dtype(sdef["dtype"]))
            net.add_capsule(cap)
        net.topo_order()  # validates route targets and acyclicity
        return net


