"""Lifelong growth loop: incompleteness detection and structural edits.

A finished detection pass that leaves more than one observed axiom means
the network cannot explain the scene with a single symbol.  Six boolean
features summarize how the failure looks, a trainable decision matrix
maps them onto one of four causes, and an oracle settles the cases the
matrix cannot.  Answers translate into structural edits: a new route, a
new capsule (optionally several plus a common parent), a retrained
attribute, or a brand-new attribute slot.
"""

import json
from dataclasses import dataclass, field

from .attributes import AttributeVector, standard_layout
from .capsule import Capsule, ObservationEntry
from .train import (AugmentConfig, SemanticTrainConfig, add_attribute,
                    gamma_semantic, project_attrs, train_semantic)

A1 = "A1"   # known parent capsule lacks a route for this arrangement
A2 = "A2"   # no capsule names this arrangement at all
B1 = "B1"   # an existing attribute needs more training data
B2 = "B2"   # an attribute slot is missing from the vocabulary

CAUSES = (A1, A2, B1, B2)

CAUSE_LABELS = {
    A1: "missing-route",
    A2: "missing-capsule",
    B1: "attribute-needs-data",
    B2: "missing-attribute",
}

FEATURE_IDS = ("F1", "F2", "F3", "F4", "F5", "F6")

FEATURE_DESCS = {
    "F1": "observed axioms share a known parent capsule",
    "F2": "observed axioms share no known parent capsule",
    "F3": "parts tracked from previous scenes",
    "F4": "exactly one slot mismatch on a never-populated attribute",
    "F5": "mismatch confined to pos/rot/size slots",
    "F6": "mismatch in more than half of the slots",
}

POSE_SLOTS = ("pos_x", "pos_y", "rot", "size_w", "size_h")

EPSILON = 0.02          # attribute magnitudes at or below this count as unused
MISMATCH_CUTOFF = 0.5   # per-slot agreement below this flags the slot


@dataclass(frozen=True)
class FeatureSet:
    f1: bool = False
    f2: bool = False
    f3: bool = False
    f4: bool = False
    f5: bool = False
    f6: bool = False

    def flag(self, fid: str) -> bool:
        return getattr(self, fid.lower())

    def true_ids(self):
        return tuple(fid for fid in FEATURE_IDS if self.flag(fid))


@dataclass
class OracleQuery:
    id: int
    cause: str | None       # matrix proposal; None when the oracle must pick
    question: str
    context: dict
    status: str = "pending"

    def to_json(self) -> dict:
        return {"id": self.id, "cause": self.cause, "question": self.question,
                "context": self.context, "status": self.status}

    @classmethod
    def from_json(cls, obj: dict) -> "OracleQuery":
        return cls(id=obj["id"], cause=obj.get("cause"),
                   question=obj["question"], context=obj.get("context", {}),
                   status=obj.get("status", "pending"))


@dataclass
class OracleAnswer:
    cause: str
    name: str | None = None
    groups: list | None = None    # [{"name": ..., "roots": [node ids]}]
    capsule: str | None = None    # target capsule for A1/B1/B2
    query_id: int | None = None

    def __post_init__(self):
        if self.cause not in CAUSES:
            raise ValueError(f"unknown cause {self.cause!r}")
        if self.cause in (A2, B2) and not (self.name or self.groups):
            raise ValueError(f"{self.cause} answer needs a name")


# ---------------------------------------------------------------- matrix

TABLE_SEED = {
    "F1": (4, 3, 14, 12),
    "F2": (5, 19, 1, 0),
    "F3": (14, 1, 17, 12),
    "F4": (1, 0, 12, 2),
    "F5": (4, 3, 13, 10),
    "F6": (12, 14, 4, 4),
}


@dataclass
class DecisionMatrix:
    """Per-feature evidence counts for each cause; counts only grow."""

    rows: dict = field(default_factory=dict)   # feature id -> {cause: count}

    @classmethod
    def zeros(cls) -> "DecisionMatrix":
        return cls({fid: {c: 0 for c in CAUSES} for fid in FEATURE_IDS})

    @classmethod
    def seeded(cls) -> "DecisionMatrix":
        return cls({fid: dict(zip(CAUSES, TABLE_SEED[fid]))
                    for fid in FEATURE_IDS})

    def column_sums(self, features: FeatureSet) -> dict:
        sums = {c: 0 for c in CAUSES}
        for fid in FEATURE_IDS:
            if features.flag(fid):
                for c in CAUSES:
                    sums[c] += self.rows[fid][c]
        return sums

    def to_json(self) -> dict:
        return {"features": [{"id": fid, "desc": FEATURE_DESCS[fid],
                              "counts": dict(self.rows[fid])}
                             for fid in FEATURE_IDS]}

    @classmethod
    def from_json(cls, obj: dict) -> "DecisionMatrix":
        rows = {}
        for row in obj["features"]:
            counts = {c: int(row["counts"][c]) for c in CAUSES}
            if any(v < 0 for v in counts.values()):
                raise ValueError("matrix counts must be nonnegative")
            rows[row["id"]] = counts
        missing = set(FEATURE_IDS) - set(rows)
        if missing:
            raise ValueError(f"matrix missing rows {sorted(missing)}")
        return cls(rows)

    def save(self, path) -> None:
        with open(path, "w") as fh:
            json.dump(self.to_json(), fh, indent=2, sort_keys=True)
            fh.write("\n")

    @classmethod
    def load(cls, path) -> "DecisionMatrix":
        with open(path) as fh:
            return cls.from_json(json.load(fh))


def decide(matrix: DecisionMatrix, features: FeatureSet) -> str | None:
    """Pick the cause with maximum summed evidence; None defers to the oracle."""
    sums = matrix.column_sums(features)
    ranked = sorted(sums.items(), key=lambda kv: (-kv[1], kv[0]))
    if ranked[0][1] == 0:
        return None
    if len(ranked) > 1 and ranked[0][1] == ranked[1][1]:
        return None
    return ranked[0][0]


def update_matrix(matrix: DecisionMatrix, features: FeatureSet,
                  cause: str) -> DecisionMatrix:
    if cause not in CAUSES:
        raise ValueError(f"unknown cause {cause!r}")
    for fid in features.true_ids():
        matrix.rows[fid][cause] += 1
    return matrix


# -------------------------------------------------------------- features

def detect_incompleteness(graph):
    """More than one observed axiom means the scene lacks a single symbol."""
    roots = [graph.node(r) for r in graph.roots]
    return len(roots) > 1, roots


def shared_parent(network, roots) -> str | None:
    """Name of a semantic capsule whose routes admit every root type."""
    want = {n.capsule for n in roots}
    if not want:
        return None
    for name in sorted(network.capsules):
        cap = network.capsules[name]
        if cap.is_primitive or not cap.routes:
            continue
        admits = {slot for route in cap.routes for slot in route.part_slots}
        if want <= admits:
            return name
    return None


def best_candidate(graph) -> dict | None:
    """Strongest non-activated parent: highest p among the near misses."""
    if not graph.near_misses:
        return None
    return max(graph.near_misses, key=lambda m: m["p"])


def mismatched_slots(candidate: dict | None) -> list:
    """Slot names whose agreement fell below the mismatch cutoff."""
    if not candidate or "agreement" not in candidate:
        return []
    bad = set()
    for part in candidate["agreement"]:
        for name, value in part["slots"].items():
            if value < MISMATCH_CUTOFF:
                bad.add(name)
    return sorted(bad)


def evaluate_features(network, graph, memory) -> FeatureSet:
    _, roots = detect_incompleteness(graph)
    f1 = shared_parent(network, roots) is not None
    f2 = not f1
    cand = best_candidate(graph)
    bad = mismatched_slots(cand)
    f4 = f5 = f6 = False
    if bad:
        if len(bad) == 1:
            slot = bad[0]
            seen = any(abs(e.attrs.get(slot, 0.0)) > EPSILON
                       for e in memory.entries)
            f4 = not seen
        f5 = all(name in POSE_SLOTS for name in bad)
        n_slots = network.capsules[cand["capsule"]].layout.n
        f6 = len(bad) > n_slots / 2
    return FeatureSet(f1=f1, f2=f2, f3=False, f4=f4, f5=f5, f6=f6)


def build_context(network, graph) -> dict:
    """Everything a question template or an oracle needs to see."""
    _, roots = detect_incompleteness(graph)
    counts = {}
    for n in roots:
        counts[n.capsule] = counts.get(n.capsule, 0) + 1
    cand = best_candidate(graph)
    return {
        "roots": [n.id for n in roots],
        "root_counts": counts,
        "candidate": cand["capsule"] if cand else shared_parent(network, roots),
        "slots": mismatched_slots(cand),
    }


# -------------------------------------------------------------- questions

def pose_question(cause: str, context: dict) -> str:
    if cause == A2:
        counts = context.get("root_counts", {})
        listed = ", ".join(f"{c}× {name}" for name, c in
                           sorted(counts.items(), key=lambda kv: (-kv[1],
                                                                  kv[0])))
        return f"What new symbol best describes these parts: {listed}?"
    if cause == A1:
        name = context.get("candidate") or "known object"
        return (f"These parts resemble a {name}, but in a configuration no "
                f"known route explains. What label fits this new {name} "
                f"arrangement?")
    if cause == B2:
        name = context.get("candidate") or "known object"
        slots = ", ".join(context.get("slots", [])) or "its style"
        return (f"This object looks similar to a {name}, but {slots} read "
                f"differently. What adjective best describes this style?")
    if cause == B1:
        name = context.get("candidate") or "known object"
        slots = ", ".join(context.get("slots", [])) or "some slots"
        return (f"This almost matches a {name} except on {slots}. Should "
                f"that attribute absorb this example as more training data?")
    raise ValueError(f"unknown cause {cause!r}")


# ---------------------------------------------------------------- oracles

class ScriptedOracle:
    """Answers drawn from a prerecorded list, consumed strictly in order."""

    def __init__(self, items: list):
        self.items = list(items)

    @classmethod
    def from_file(cls, path) -> "ScriptedOracle":
        with open(path) as fh:
            return cls(json.load(fh))

    def answer(self, query: OracleQuery) -> OracleAnswer:
        if not self.items:
            raise ValueError("oracle script exhausted")
        item = self.items.pop(0)
        match = item.get("match", "any")
        if match != "any" and match != query.cause:
            raise ValueError(f"scripted answer expects cause {match!r}, "
                             f"query proposes {query.cause!r}")
        a = item["answer"]
        return OracleAnswer(cause=a["cause"], name=a.get("name"),
                            groups=a.get("groups"), capsule=a.get("capsule"),
                            query_id=query.id)


class TerminalOracle:
    """Interactive oracle over stdin/stdout."""

    def __init__(self, reader=input, writer=print):
        self.reader = reader
        self.writer = writer

    def answer(self, query: OracleQuery) -> OracleAnswer:
        self.writer(query.question)
        if query.cause:
            self.writer(f"(proposed cause: {query.cause} "
                        f"{CAUSE_LABELS[query.cause]})")
        cause = self.reader("cause [A1|A2|B1|B2]: ").strip().upper()
        name = self.reader("name: ").strip() or None
        raw = self.reader("groups name:id,id;name:id,id (blank none): ").strip()
        groups = None
        if raw:
            groups = []
            for chunk in raw.split(";"):
                gname, _, ids = chunk.partition(":")
                groups.append({"name": gname.strip(),
                               "roots": [int(t) for t in ids.split(",") if t]})
        return OracleAnswer(cause=cause, name=name, groups=groups,
                            query_id=query.id)


# ----------------------------------------------------------- apply answer

def _style_union(layouts) -> list:
    styles = []
    seen = set()
    for view in layouts:
        for spec in view.specs[5:]:
            if spec.name not in seen:
                seen.add(spec.name)
                styles.append(spec)
    return styles


def _one_shot_route(network, cap: Capsule, parts, memory, aug, fit) -> dict:
    """Add a route over `parts` and train it from this single observation.

    parts: list of (capsule name, route id, p, attrs dict) in depth order.
    Returns the training report plus the parent attrs the route was built on.
    """
    part_layouts = [network.capsules[name].layout for name, _, _, _ in parts]
    route = cap.add_route(tuple(name for name, _, _, _ in parts),
                          part_layouts=part_layouts)
    pids = []
    vectors = []
    for (name, rid, p, attrs), view in zip(parts, part_layouts):
        entry = memory.append(ObservationEntry(name, rid, float(p),
                                               dict(attrs)))
        pids.append(entry.id)
        vectors.append(AttributeVector(view, project_attrs(attrs, view)))
    parent = gamma_semantic(vectors, cap.layout)
    parent_attrs = dict(zip(cap.layout.names, (float(v) for v in
                                               parent.values)))
    memory.append(ObservationEntry(cap.name, route.id, 1.0, parent_attrs,
                                   parts=tuple(pids)))
    report = train_semantic(cap, route, memory, aug, fit)
    report["parent_attrs"] = parent_attrs
    return report


def _node_tuple(network, node):
    return (node.capsule, node.route, node.p, dict(node.attrs))


def _resolve_capsule(network, answer, graph) -> str:
    name = answer.capsule
    if name is None:
        cand = best_candidate(graph)
        if cand is not None:
            name = cand["capsule"]
    if name is None:
        _, roots = detect_incompleteness(graph)
        name = shared_parent(network, roots)
    if name is None or name not in network.capsules:
        raise ValueError(f"answer names no known capsule ({name!r})")
    return name


def _apply_new_route(network, answer, graph, memory, aug, fit) -> dict:
    name = _resolve_capsule(network, answer, graph)
    cap = network.capsules[name]
    if cap.is_primitive:
        raise ValueError(f"{name} is a primitive capsule; routes do not apply")
    _, roots = detect_incompleteness(graph)
    parts = [_node_tuple(network, n) for n in sorted(roots,
                                                     key=lambda n: n.id)]
    report = _one_shot_route(network, cap, parts, memory, aug, fit)
    return {"capsule": name, "route": cap.routes[-1].id,
            "label": answer.name, "train": report}


def _apply_new_capsules(network, answer, graph, memory, aug, fit) -> dict:
    _, roots = detect_incompleteness(graph)
    by_id = {n.id: n for n in roots}
    groups = answer.groups
    if not groups:
        groups = [{"name": answer.name, "roots": [n.id for n in roots]}]
    seen = set()
    for g in groups:
        if not g.get("name"):
            raise ValueError("every group needs a capsule name")
        if g["name"] in network.capsules:
            raise ValueError(f"capsule {g['name']!r} already exists")
        for rid in g["roots"]:
            if rid not in by_id:
                raise ValueError(f"group references unknown root {rid}")
            if rid in seen:
                raise ValueError(f"root {rid} used by more than one group")
            seen.add(rid)

    created = []
    group_parts = []   # (name, route id, p, attrs) per new capsule instance
    for g in groups:
        nodes = [by_id[r] for r in g["roots"]]
        layout = standard_layout(_style_union(
            [network.capsules[n.capsule].layout for n in nodes]))
        cap = Capsule(g["name"], layout)
        network.add_capsule(cap)
        parts = [_node_tuple(network, n) for n in nodes]
        report = _one_shot_route(network, cap, parts, memory, aug, fit)
        created.append({"capsule": g["name"], "route": cap.routes[-1].id,
                        "train": {k: v for k, v in report.items()
                                  if k != "parent_attrs"}})
        group_parts.append((g["name"], cap.routes[-1].id, 1.0,
                            report["parent_attrs"]))

    ungrouped = [n for n in roots if n.id not in seen]
    remaining = group_parts + [_node_tuple(network, n) for n in ungrouped]
    parent_name = answer.name if answer.groups else None
    if len(remaining) > 1 and parent_name:
        if parent_name in network.capsules:
            raise ValueError(f"capsule {parent_name!r} already exists")
        layout = standard_layout(_style_union(
            [network.capsules[name].layout for name, _, _, _ in remaining]))
        parent = Capsule(parent_name, layout)
        network.add_capsule(parent)
        report = _one_shot_route(network, parent, remaining, memory, aug, fit)
        created.append({"capsule": parent_name, "route": parent.routes[-1].id,
                        "train": {k: v for k, v in report.items()
                                  if k != "parent_attrs"}})
    return {"created": created}


def _apply_attribute_data(network, answer, graph, memory, aug, fit) -> dict:
    name = _resolve_capsule(network, answer, graph)
    cap = network.capsules[name]
    misses = [m for m in graph.near_misses if m["capsule"] == name
              and "agreement" in m]
    if not misses:
        raise ValueError(f"no near miss recorded for capsule {name!r}")
    miss = max(misses, key=lambda m: m["p"])
    route = cap.route(miss["route"])
    pids = []
    for nid in miss["parts"]:
        node = graph.node(nid)
        entry = memory.append(ObservationEntry(node.capsule, node.route,
                                               float(node.p),
                                               dict(node.attrs)))
        pids.append(entry.id)
    memory.append(ObservationEntry(name, route.id, float(miss["p"]),
                                   dict(miss["attrs"]), parts=tuple(pids)))
    report = train_semantic(cap, route, memory, aug, fit)
    return {"capsule": name, "route": route.id, "attribute": answer.name,
            "train": report}


def apply_answer(network, answer: OracleAnswer, graph, memory,
                 matrix: DecisionMatrix | None = None,
                 features: FeatureSet | None = None,
                 aug: AugmentConfig | None = None,
                 fit: SemanticTrainConfig | None = None) -> dict:
    """Translate a confirmed cause into a structural edit on the network."""
    aug = aug if aug is not None else AugmentConfig()
    fit = fit if fit is not None else SemanticTrainConfig()
    if answer.cause == A1:
        report = _apply_new_route(network, answer, graph, memory, aug, fit)
    elif answer.cause == A2:
        report = _apply_new_capsules(network, answer, graph, memory, aug, fit)
    elif answer.cause == B1:
        report = _apply_attribute_data(network, answer, graph, memory, aug,
                                       fit)
    elif answer.cause == B2:
        name = _resolve_capsule(network, answer, graph)
        report = add_attribute(network, name, answer.name, memory, aug, fit)
    else:
        raise ValueError(f"unknown cause {answer.cause!r}")
    if matrix is not None and features is not None:
        update_matrix(matrix, features, answer.cause)
    return {"cause": answer.cause, **report}
