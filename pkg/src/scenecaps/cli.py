"""Batch entry points: synthesis, training, detection, rendering, serving.

Every command prints a line-oriented JSON transcript to stdout and obeys
one exit-code contract: 0 success, 1 usage error, 2 data error, 3
training-quality failure.  The --network argument always names a session
root directory (weights under network/, decision matrix at matrix.json),
the same layout the HTTP service keeps, so a dir trained here can be
served directly.

Walkthrough scripts may reference observed axioms either by raw node id
or by "capsule:k", meaning the k-th root of that capsule type with roots
ordered by (pos_x, pos_y); ids change between detection passes, the
positional form does not.
"""

import argparse
import json
import os
import sys

import numpy as np

from .capsule import Capsule
from .grammar import Grammar
from .network import CapsuleNetwork, SceneGraph, observation_box
from .train import (PRIMITIVE_SYMMETRIES, AugmentConfig, PrimitiveTrainConfig,
                    SemanticTrainConfig, SynthConfig, primitive_layout,
                    project_attrs, train_primitive)

PRIMITIVE_SHAPES = ("circle", "square", "triangle")

TINY_SAMPLE_COUNT = 2000   # below this the MAE report is not trustworthy


class _UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        print(f"{self.prog}: error: {message}", file=sys.stderr)
        raise _UsageError(message)


def _emit(obj: dict, sink=None) -> None:
    line = json.dumps(obj, sort_keys=True)
    print(line)
    if sink is not None:
        sink.write(line + "\n")


def _load_image(path) -> np.ndarray:
    from .service import decode_image
    with open(path, "rb") as fh:
        return decode_image(fh.read())


def _save_png(layer: np.ndarray, path) -> None:
    from .service import encode_png
    with open(path, "wb") as fh:
        fh.write(encode_png(layer))


# ------------------------------------------------------------------- synth

def _tree_json(tree) -> dict:
    return {"symbol": tree.symbol, "rule": tree.rule,
            "attrs": {n: float(v) for n, v in
                      zip(tree.attrs.layout.names, tree.attrs.values)},
            "children": [_tree_json(c) for c in tree.children]}


def cmd_synth(args) -> int:
    from .attributes import AttributeVector

    with open(args.grammar) as fh:
        grammar = Grammar.from_json(json.load(fh))
    if grammar.axiom is None:
        raise ValueError("grammar has no axiom")
    os.makedirs(args.out, exist_ok=True)
    rng = np.random.default_rng(args.seed)
    axiom = grammar.symbols[grammar.axiom]
    records = []
    for i in range(args.n):
        chi = rng.uniform(0.0, 1.0, size=axiom.layout.n)
        vals = np.array([float(spec.quantile(c))
                         for spec, c in zip(axiom.layout.specs, chi)])
        tree = grammar.expand(grammar.axiom,
                              AttributeVector(axiom.layout, vals), rng)
        image = grammar.draw_tree(tree, args.width, args.height)
        name = f"scene_{i:05d}.png"
        _save_png(image, os.path.join(args.out, name))
        records.append({"index": i, "image": name, "tree": _tree_json(tree)})
    with open(os.path.join(args.out, "dataset.jsonl"), "w") as fh:
        for rec in records:
            fh.write(json.dumps(rec, sort_keys=True) + "\n")
    _emit({"event": "synth", "records": args.n, "out": args.out})
    return 0


# -------------------------------------------------------------------- train

def _network_dir(root) -> str:
    return os.path.join(root, "network")


def _load_network(root) -> CapsuleNetwork:
    path = os.path.join(_network_dir(root), "network.json")
    if not os.path.isfile(path):
        raise ValueError(f"no network at {path}")
    return CapsuleNetwork.load(_network_dir(root))


def cmd_train_primitives(args) -> int:
    root = args.network
    os.makedirs(root, exist_ok=True)
    if os.path.isfile(os.path.join(_network_dir(root), "network.json")):
        net = CapsuleNetwork.load(_network_dir(root))
    else:
        net = CapsuleNetwork()
        for shape in PRIMITIVE_SHAPES:
            net.add_capsule(Capsule(shape, primitive_layout(shape),
                                    PRIMITIVE_SYMMETRIES[shape], shape=shape))
    channels = tuple(int(c) for c in args.channels.split(","))
    from .sdf import EffectsConfig
    effects = EffectsConfig.none() if args.no_effects else EffectsConfig.default()
    holdout = min(args.holdout, max(args.samples // 5, 1))
    worst = 0.0
    for i, name in enumerate(sorted(net.capsules)):
        cap = net.capsules[name]
        if not cap.is_primitive:
            continue
        report = train_primitive(cap, PrimitiveTrainConfig(
            samples=args.samples, holdout=holdout, steps=args.steps,
            channels=channels, hidden=args.hidden, seed=args.seed + i,
            synth=SynthConfig(effects=effects)))
        if args.samples < TINY_SAMPLE_COUNT:
            report["warning"] = "tiny-sample-count"
        report["event"] = "train"
        _emit(report)
        worst = max(worst, max(report["mae"].values()))
    net.save(_network_dir(root))
    if worst > args.max_mae:
        _emit({"event": "quality-failure", "worst_mae": worst,
               "bound": args.max_mae})
        return 3
    return 0


# ------------------------------------------------------------------- detect

_PALETTE = [(90, 200, 250), (255, 160, 80), (170, 255, 130), (255, 120, 170),
            (200, 160, 255), (255, 230, 100)]


def _draw_overlay(image: np.ndarray, graph: SceneGraph, path) -> None:
    from PIL import Image, ImageDraw

    from .attributes import standard_layout
    H, W = image.shape
    base = np.clip(image, 0.0, 1.0)
    rgb = np.stack([(base * 180).astype(np.uint8)] * 3, axis=-1)
    img = Image.fromarray(rgb, mode="RGB")
    draw = ImageDraw.Draw(img)
    pose = standard_layout([])
    names = sorted({n.capsule for n in graph.nodes})
    color = {n: _PALETTE[i % len(_PALETTE)] for i, n in enumerate(names)}
    # parents drawn after children so enclosing boxes stay visible
    depth = {}
    for node in graph.nodes:
        for ch in node.children:
            depth[ch] = depth.get(node.id, 0) + 1
    for node in sorted(graph.nodes, key=lambda n: -depth.get(n.id, 0)):
        x0, y0, x1, y1 = observation_box(project_attrs(node.attrs, pose))
        box = (x0 * W, y0 * H, x1 * W, y1 * H)
        draw.rectangle(box, outline=color[node.capsule], width=1)
        draw.text((box[0] + 2, max(box[1] - 10, 0)), node.capsule,
                  fill=color[node.capsule])
    img.save(path, format="PNG")


def cmd_detect(args) -> int:
    net = _load_network(args.network)
    image = _load_image(args.image)
    graph = net.detect(image)
    with open(args.out, "w") as fh:
        json.dump(graph.to_json(), fh, indent=2, sort_keys=True)
        fh.write("\n")
    net.save(_network_dir(args.network))   # detection extends the memory
    if args.overlay:
        _draw_overlay(image, graph, args.overlay)
    _emit({"event": "detect", "nodes": len(graph.nodes),
           "roots": list(graph.roots),
           "capsules": sorted({n.capsule for n in graph.nodes}),
           "out": args.out})
    return 0


# ------------------------------------------------------------------- render

def cmd_render(args) -> int:
    net = _load_network(args.network)
    with open(args.graph) as fh:
        graph = SceneGraph.from_json(json.load(fh))
    layer = net.render_graph(graph, (args.height, args.width))
    _save_png(layer, args.out)
    _emit({"event": "render", "out": args.out,
           "lit": float((layer > 0).mean())})
    return 0


# -------------------------------------------------------------- walkthrough

def resolve_root_refs(groups, graph_json: dict) -> list:
    """Map "capsule:k" root references onto this pass's node ids."""
    nodes = {n["id"]: n for n in graph_json["nodes"]}
    roots = [nodes[r] for r in graph_json["roots"]]
    by_type: dict = {}
    ordered = sorted(roots, key=lambda n: (round(n["attrs"].get("pos_x", 0.0), 6),
                                           round(n["attrs"].get("pos_y", 0.0), 6),
                                           n["id"]))
    for n in ordered:
        by_type.setdefault(n["capsule"], []).append(n["id"])
    out = []
    for g in groups:
        ids = []
        for ref in g["roots"]:
            if isinstance(ref, int):
                ids.append(ref)
                continue
            name, _, k = str(ref).rpartition(":")
            if not name:
                raise ValueError(f"bad root reference {ref!r}")
            pool = by_type.get(name, [])
            idx = int(k)
            if idx >= len(pool):
                raise ValueError(f"no root {ref!r} in this pass "
                                 f"({len(pool)}x {name})")
            ids.append(pool[idx])
        out.append({"name": g["name"], "roots": ids})
    return out


class _ResolvingOracle:
    """Wraps an oracle so scripted group refs resolve against live graphs."""

    def __init__(self, base, store):
        self.base = base
        self.store = store

    def answer(self, query):
        ans = self.base.answer(query)
        if ans.groups:
            graph = self.store.graph_json(query.context["scene_id"])
            ans.groups = resolve_root_refs(ans.groups, graph)
        return ans


def _drain_queue(store, oracle, sink) -> None:
    while True:
        pending = store.pending()
        if not pending:
            return
        q = pending[0]
        _emit({"event": "query", "id": q.id, "cause": q.cause,
               "question": q.question}, sink)
        ans = oracle.answer(q)
        result = store.answer_query(q.id, {
            "cause": ans.cause, "name": ans.name, "groups": ans.groups,
            "capsule": ans.capsule})
        _emit({"event": "applied", "query": q.id, "cause": ans.cause,
               "summary": result["applied"]["summary"],
               "graph_version": result["graph_version"]}, sink)


def cmd_walkthrough(args) -> int:
    from .meta import ScriptedOracle
    from .service import SessionStore

    with open(args.script) as fh:
        script = json.load(fh)
    scenes = script.get("scenes", [])
    answers = script.get("answers", [])
    if not scenes:
        raise ValueError("script lists no scenes")
    base = os.path.dirname(os.path.abspath(args.script))

    store = SessionStore(
        args.network,
        aug=AugmentConfig(n=args.aug_n, translate=0.2),
        fit=SemanticTrainConfig(hidden=args.fit_hidden, steps=args.fit_steps,
                                seed=args.seed),
        seed_matrix=True)
    oracle = _ResolvingOracle(ScriptedOracle(answers), store)

    sink = open(args.out, "w") if args.out else None
    try:
        for i, rel in enumerate(scenes):
            path = rel if os.path.isabs(rel) else os.path.join(base, rel)
            with open(path, "rb") as fh:
                result = store.ingest_scene(fh.read())
            sid = result["scene_id"]
            g = store.graph_json(sid)
            _emit({"event": "scene", "index": i, "path": rel,
                   "scene_id": sid, "roots": len(g["roots"]),
                   "capsules": sorted({n["capsule"] for n in g["nodes"]})},
                  sink)
            _drain_queue(store, oracle, sink)
            gf = store.graph_json(sid)
            _emit({"event": "resolved", "scene_id": sid,
                   "roots": len(gf["roots"]),
                   "root_capsules": sorted(
                       n["capsule"] for n in gf["nodes"]
                       if n["id"] in gf["roots"])}, sink)
        _emit({"event": "network",
               "capsules": {name: {"routes": len(cap.routes)}
                            for name, cap in
                            sorted(store.network.capsules.items())}}, sink)
    finally:
        if sink is not None:
            sink.close()
    return 0


# -------------------------------------------------------------------- serve

def cmd_serve(args) -> int:
    from .meta import ScriptedOracle, TerminalOracle
    from .service import SessionStore, create_app, serve

    root = args.network or os.environ.get("NETWORK_DIR")
    if not root:
        raise _UsageError("serve needs --network or NETWORK_DIR")
    oracle = None
    if args.oracle == "terminal":
        oracle = TerminalOracle()
    elif args.oracle.startswith("script:"):
        oracle = ScriptedOracle.from_file(args.oracle[len("script:"):])
    elif args.oracle != "http":
        raise _UsageError(f"unknown oracle mode {args.oracle!r}")

    store = SessionStore(
        root,
        aug=AugmentConfig(n=args.aug_n, translate=0.2),
        fit=SemanticTrainConfig(hidden=args.fit_hidden, steps=args.fit_steps),
        seed_matrix=args.seed_matrix)
    app = create_app(store)
    if oracle is not None:
        from .service import _attach_auto_oracle
        _attach_auto_oracle(app, store, _ResolvingOracle(oracle, store))
    _emit({"event": "serve", "host": args.host, "port": args.port,
           "network": root})
    import uvicorn
    uvicorn.run(app, host=args.host, port=args.port, log_level="warning")
    return 0


# --------------------------------------------------------------------- main

def build_parser() -> _Parser:
    p = _Parser(prog="scenecaps",
                description="bi-directional scene engine command line")
    sub = p.add_subparsers(dest="cmd")

    s = sub.add_parser("synth", help="sample scenes from a grammar file")
    s.add_argument("--grammar", required=True)
    s.add_argument("--n", type=int, default=100)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--out", required=True)
    s.add_argument("--width", type=int, default=64)
    s.add_argument("--height", type=int, default=64)
    s.set_defaults(fn=cmd_synth)

    s = sub.add_parser("train-primitives",
                       help="fit pixel encoders for the primitive shapes")
    s.add_argument("--network", required=True)
    s.add_argument("--samples", type=int, default=21000)
    s.add_argument("--holdout", type=int, default=1000)
    s.add_argument("--steps", type=int, default=6000)
    s.add_argument("--channels", default="16,32,32")
    s.add_argument("--hidden", type=int, default=128)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--max-mae", type=float, default=0.05)
    s.add_argument("--no-effects", action="store_true")
    s.set_defaults(fn=cmd_train_primitives)

    s = sub.add_parser("detect", help="de-render an image into a scene graph")
    s.add_argument("--network", required=True)
    s.add_argument("--image", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--overlay")
    s.set_defaults(fn=cmd_detect)

    s = sub.add_parser("render", help="draw a scene graph back to pixels")
    s.add_argument("--network", required=True)
    s.add_argument("--graph", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--width", type=int, default=64)
    s.add_argument("--height", type=int, default=64)
    s.set_defaults(fn=cmd_render)

    s = sub.add_parser("walkthrough",
                       help="run ordered scenes against a scripted oracle")
    s.add_argument("--network", required=True)
    s.add_argument("--script", required=True)
    s.add_argument("--out")
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--aug-n", type=int, default=800)
    s.add_argument("--fit-steps", type=int, default=6000)
    s.add_argument("--fit-hidden", type=int, default=96)
    s.set_defaults(fn=cmd_walkthrough)

    s = sub.add_parser("serve", help="run the HTTP session service")
    s.add_argument("--network", default=None)
    s.add_argument("--host", default="127.0.0.1")
    s.add_argument("--port", type=int,
                   default=int(os.environ.get("PORT", "8000")))
    s.add_argument("--oracle", default="http")
    s.add_argument("--seed-matrix", action="store_true")
    s.add_argument("--aug-n", type=int, default=800)
    s.add_argument("--fit-steps", type=int, default=6000)
    s.add_argument("--fit-hidden", type=int, default=96)
    s.set_defaults(fn=cmd_serve)

    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except _UsageError:
        return 1
    except SystemExit as exc:   # argparse --help exits on its own
        return 0 if not exc.code else 1
    if getattr(args, "fn", None) is None:
        parser.print_usage(sys.stderr)
        return 1
    try:
        return args.fn(args)
    except _UsageError:
        return 1
    except (ValueError, KeyError, IndexError, OSError,
            json.JSONDecodeError) as exc:
        _emit({"event": "error", "detail": str(exc)})
        return 2


if __name__ == "__main__":
    sys.exit(main())
