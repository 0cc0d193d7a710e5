"""Attributed generative grammar over 2-D primitives.

A grammar is a set of attributed symbols plus production rules.  Each rule
rewrites a nonterminal into an ordered list of symbols; the order is the
depth order, earlier entries are drawn first and later ones composited
over them.  Per-attribute constraint functions derive every child
attribute from the parent's attribute vector.  Terminal symbols draw
themselves as pixel layers through the SDF rasterizer.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from .attributes import AttributeLayout, AttributeVector, standard_layout
from .sdf import PrimitiveParams, SHAPES, composite_over

TERMINAL = "terminal"
NONTERMINAL = "nonterminal"
AXIOM = "axiom"


@dataclass(frozen=True)
class Symbol:
    name: str
    kind: str
    layout: AttributeLayout
    shape: str | None = None  # raster shape for terminals

    def __post_init__(self):
        if self.kind == TERMINAL and self.shape not in SHAPES:
            raise ValueError(f"terminal {self.name!r} needs a raster shape")


# ---------------------------------------------------------------------------
# constraint functions: registered by name, parameterized by a dict, mapping
# the parent's attribute vector to one child attribute value

def _c_const(parent: AttributeVector, params: dict) -> float:
    return float(params["value"])


def _c_copy(parent: AttributeVector, params: dict) -> float:
    return parent.get(params["source"])


def _c_offset(parent: AttributeVector, params: dict) -> float:
    return parent.get(params["source"]) + float(params["delta"])


def _c_relpos(parent: AttributeVector, params: dict) -> float:
    """Child position component from an offset in the parent's scaled frame.

    dx, dy are fractions of the parent's size; the offset rotates with the
    parent.  axis selects which world component to emit.
    """
    dx = float(params.get("dx", 0.0)) * parent.get("size_w")
    dy = float(params.get("dy", 0.0)) * parent.get("size_h")
    a = 2.0 * np.pi * parent.rot
    ca, sa = np.cos(a), np.sin(a)
    wx = parent.get("pos_x") + ca * dx - sa * dy
    wy = parent.get("pos_y") + sa * dx + ca * dy
    return wx if params["axis"] == "x" else wy


def _c_relsize(parent: AttributeVector, params: dict) -> float:
    return parent.get(params["source"]) * float(params["factor"])


def _c_relrot(parent: AttributeVector, params: dict) -> float:
    return (parent.rot + float(params.get("delta", 0.0))) % 1.0


CONSTRAINT_FNS = {
    "const": _c_const,
    "copy": _c_copy,
    "offset": _c_offset,
    "relpos": _c_relpos,
    "relsize": _c_relsize,
    "relrot": _c_relrot,
}


@dataclass(frozen=True)
class Constraint:
    """Derives one attribute of one rule child from the parent vector."""

    child: int  # rhs index
    attr: str
    fn: str
    params: dict = field(default_factory=dict)

    def evaluate(self, parent: AttributeVector) -> float:
        return float(CONSTRAINT_FNS[self.fn](parent, self.params))

    def to_json(self) -> dict:
        return {"target": [self.child, self.attr], "fn": self.fn, "params": self.params}

    @staticmethod
    def from_json(obj: dict) -> "Constraint":
        child, attr = obj["target"]
        return Constraint(int(child), attr, obj["fn"], obj.get("params", {}))


@dataclass(frozen=True)
class Rule:
    lhs: str
    rhs: tuple  # symbol names, depth order
    constraints: tuple = ()

    def to_json(self) -> dict:
        return {"lhs": self.lhs, "rhs": list(self.rhs),
                "constraints": [c.to_json() for c in self.constraints]}

    @staticmethod
    def from_json(obj: dict) -> "Rule":
        return Rule(obj["lhs"], tuple(obj["rhs"]),
                    tuple(Constraint.from_json(c) for c in obj["constraints"]))


@dataclass
class ParseTree:
    """One expanded symbol instance with its attributes and ordered children."""

    symbol: str
    attrs: AttributeVector
    rule: int | None = None
    children: list = field(default_factory=list)

    def leaves(self) -> list:
        """Terminal nodes in depth order (earlier entries painted first)."""
        if not self.children:
            return [self]
        out = []
        for ch in self.children:
            out.extend(ch.leaves())
        return out


class Grammar:
    """Non-recursive attributed context-free grammar with a single axiom."""

    def __init__(self):
        self.symbols: dict[str, Symbol] = {}
        self.rules: list[Rule] = []
        self.axiom: str | None = None

    def add_symbol(self, name: str, kind: str, layout: AttributeLayout | None = None,
                   shape: str | None = None) -> Symbol:
        if name in self.symbols:
            raise ValueError(f"duplicate symbol {name!r}")
        if kind == AXIOM and shape is not None:
            raise ValueError("the axiom is a nonterminal; it cannot carry a raster shape")
        sym = Symbol(name, kind, layout or standard_layout(), shape)
        self.symbols[name] = sym
        if kind == AXIOM:
            if self.axiom is not None:
                raise ValueError("grammar already has an axiom")
            self.axiom = name
        return sym

    def add_rule(self, lhs: str, rhs, constraints=()) -> Rule:
        if lhs not in self.symbols:
            raise ValueError(f"unknown lhs {lhs!r}")
        if self.symbols[lhs].kind == TERMINAL:
            raise ValueError("terminals cannot be rewritten")
        for name in rhs:
            if name not in self.symbols:
                raise ValueError(f"unknown rhs symbol {name!r}")
        rule = Rule(lhs, tuple(rhs), tuple(constraints))
        # every produced attribute needs exactly one constraint
        want = {(ci, attr) for ci, name in enumerate(rule.rhs)
                for attr in self.symbols[name].layout.names}
        got = [(c.child, c.attr) for c in rule.constraints]
        if len(got) != len(set(got)) or set(got) != want:
            raise ValueError("constraints must cover every rhs attribute exactly once")
        self._check_acyclic(rule)
        self.rules.append(rule)
        return rule

    def fill_rule(self, lhs: str, rhs, overrides=()) -> Rule:
        """add_rule with copy-from-parent defaults for uncovered child attrs
        (shared names), const 0 otherwise."""
        covered = {(c.child, c.attr) for c in overrides}
        parent_names = set(self.symbols[lhs].layout.names)
        cons = list(overrides)
        for ci, name in enumerate(rhs):
            for attr in self.symbols[name].layout.names:
                if (ci, attr) in covered:
                    continue
                if attr in parent_names:
                    cons.append(Constraint(ci, attr, "copy", {"source": attr}))
                else:
                    cons.append(Constraint(ci, attr, "const", {"value": 0.0}))
        return self.add_rule(lhs, rhs, cons)

    def _check_acyclic(self, new_rule: Rule) -> None:
        # non-recursive grammar: no symbol may reach itself through rules
        edges: dict[str, set] = {}
        for rule in list(self.rules) + [new_rule]:
            edges.setdefault(rule.lhs, set()).update(rule.rhs)
        seen: dict[str, int] = {}

        def visit(sym: str, stack: set):
            if sym in stack:
                raise ValueError(f"recursive production through {sym!r}")
            if seen.get(sym):
                return
            stack.add(sym)
            for nxt in edges.get(sym, ()):
                visit(nxt, stack)
            stack.discard(sym)
            seen[sym] = 1

        visit(new_rule.lhs, set())

    def rules_for(self, lhs: str) -> list:
        return [(i, r) for i, r in enumerate(self.rules) if r.lhs == lhs]

    def expand(self, symbol: str, attrs: AttributeVector,
               rng: np.random.Generator | None = None,
               rule_choice=None) -> ParseTree:
        """Rewrite a symbol down to terminals.

        Rules for a nonterminal are chosen uniformly with the given
        generator; rule_choice may pin {symbol: rule index} for
        deterministic synthesis.  Child attributes not covered by a
        constraint default to the parent's value for shared names, else 0.
        """
        sym = self.symbols[symbol]
        node = ParseTree(symbol, attrs)
        if sym.kind == TERMINAL:
            return node
        options = self.rules_for(symbol)
        if not options:
            raise ValueError(f"no rule for nonterminal {symbol!r}")
        if rule_choice and symbol in rule_choice:
            idx = rule_choice[symbol]
            pick = next((k for k, (i, _) in enumerate(options) if i == idx), None)
            if pick is None:
                raise ValueError(f"rule {idx} does not rewrite {symbol!r}")
        elif len(options) == 1:
            pick = 0
        else:
            if rng is None:
                raise ValueError(f"{symbol!r} has {len(options)} rules; need a generator")
            pick = int(rng.integers(0, len(options)))
        rule_index, rule = options[pick]
        node.rule = rule_index
        by_child: dict[int, dict] = {}
        for c in rule.constraints:
            by_child.setdefault(c.child, {})[c.attr] = c.evaluate(attrs)
        for ci, child_name in enumerate(rule.rhs):
            child_sym = self.symbols[child_name]
            fixed = by_child[ci]
            vals = np.array([fixed[name] for name in child_sym.layout.names])
            # rotation wraps, everything else clips into the normalized range
            ri = child_sym.layout.index("rot")
            vals[ri] = vals[ri] % 1.0
            vals = np.clip(vals, 0.0, 1.0)
            child_attrs = AttributeVector(child_sym.layout, vals)
            node.children.append(self.expand(child_name, child_attrs, rng, rule_choice))
        return node

    def draw_tree(self, tree: ParseTree, width: int, height: int) -> np.ndarray:
        """Rasterize a parse tree: leaves composited in depth order."""
        layer = np.zeros((height, width), dtype=np.float64)
        for leaf in tree.leaves():
            sym = self.symbols[leaf.symbol]
            if sym.kind != TERMINAL:
                raise ValueError(f"unexpanded nonterminal {leaf.symbol!r}")
            a = leaf.attrs
            params = PrimitiveParams(sym.shape, pos=(a.get("pos_x"), a.get("pos_y")),
                                     rot=a.rot, size=(a.get("size_w"), a.get("size_h")),
                                     intensity=a.get("intensity") if "intensity" in a.layout.names else 1.0)
            layer = composite_over(layer, params)
        return layer

    # -- serialization ------------------------------------------------------

    def to_json(self) -> dict:
        return {
            "symbols": [
                {"name": s.name, "kind": s.kind, "shape": s.shape,
                 "attrs": s.layout.to_json()}
                for s in self.symbols.values()
            ],
            "rules": [r.to_json() for r in self.rules],
        }

    @staticmethod
    def from_json(obj: dict) -> "Grammar":
        g = Grammar()
        for s in obj["symbols"]:
            g.add_symbol(s["name"], s["kind"], AttributeLayout.from_json(s["attrs"]),
                         s.get("shape"))
        for r in obj["rules"]:
            rule = Rule.from_json(r)
            g.add_rule(rule.lhs, rule.rhs, rule.constraints)
        return g

    def save(self, path) -> None:
        with open(path, "w") as f:
            json.dump(self.to_json(), f, indent=2, sort_keys=True)

    @staticmethod
    def load(path) -> "Grammar":
        with open(path) as f:
            return Grammar.from_json(json.load(f))
