"""Attribute layouts and vectors shared by grammar symbols and capsules.

Every symbol instance carries a flat vector of normalized attributes in
[0, 1].  The first five slots are fixed pose slots (pos_x, pos_y, rot,
size_w, size_h); anything after them is a named style slot.  Positions and
sizes are canvas fractions, rotation is angle / 2*pi and wraps.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np

POSE_SLOTS = ("pos_x", "pos_y", "rot", "size_w", "size_h")

KIND_POS = "pos"
KIND_ROT = "rot"
KIND_SIZE = "size"
KIND_STYLE = "style"


@dataclass(frozen=True)
class Quantile:
    """Monotone map from a uniform sample in [0, 1] to an attribute value.

    Serializable by (kind, params).  "uniform" maps onto [lo, hi], "const"
    ignores its argument.  A raw callable may be attached for in-memory use
    but cannot round-trip through JSON.
    """

    kind: str = "uniform"
    lo: float = 0.0
    hi: float = 1.0
    fn: Callable[[float], float] | None = None

    def __call__(self, p):
        if self.kind == "uniform":
            return self.lo + (self.hi - self.lo) * np.asarray(p)
        if self.kind == "const":
            return self.lo * np.ones_like(np.asarray(p, dtype=float))
        if self.kind == "callable":
            return self.fn(p)
        raise ValueError(f"unknown quantile kind {self.kind!r}")

    def to_json(self) -> dict:
        if self.kind == "callable":
            raise ValueError("callable quantiles do not serialize")
        return {"kind": self.kind, "lo": self.lo, "hi": self.hi}

    @staticmethod
    def from_json(obj: dict) -> "Quantile":
        return Quantile(kind=obj["kind"], lo=obj["lo"], hi=obj.get("hi", obj["lo"]))


def const_quantile(v: float) -> Quantile:
    return Quantile(kind="const", lo=v, hi=v)


@dataclass(frozen=True)
class AttributeSpec:
    """One named attribute slot: its kind and sampling prior."""

    name: str
    kind: str = KIND_STYLE
    quantile: Quantile = field(default_factory=Quantile)

    def to_json(self) -> dict:
        return {"name": self.name, "kind": self.kind, "quantile": self.quantile.to_json()}

    @staticmethod
    def from_json(obj: dict) -> "AttributeSpec":
        return AttributeSpec(obj["name"], obj["kind"], Quantile.from_json(obj["quantile"]))


class AttributeLayout:
    """Ordered attribute specs for one symbol or capsule.

    The pose prefix is mandatory and fixed; style slots follow in
    declaration order.  Layouts are immutable; extending a capsule with a
    new attribute produces a new layout.
    """

    def __init__(self, specs: Sequence[AttributeSpec]):
        names = [s.name for s in specs]
        if tuple(names[:5]) != POSE_SLOTS:
            raise ValueError("layout must start with the five pose slots")
        if len(set(names)) != len(names):
            raise ValueError("duplicate attribute names")
        self.specs = tuple(specs)
        self.names = tuple(names)
        self._index = {n: i for i, n in enumerate(names)}

    @property
    def n(self) -> int:
        return len(self.specs)

    @property
    def style_names(self) -> tuple:
        return self.names[5:]

    def index(self, name: str) -> int:
        return self._index[name]

    def __eq__(self, other):
        return isinstance(other, AttributeLayout) and self.names == other.names

    def __hash__(self):
        return hash(self.names)

    def __repr__(self):
        return f"AttributeLayout({list(self.names)!r})"

    def with_style(self, spec: AttributeSpec) -> "AttributeLayout":
        if spec.kind != KIND_STYLE:
            raise ValueError("only style slots can be appended")
        return AttributeLayout(self.specs + (spec,))

    def to_json(self) -> list:
        return [s.to_json() for s in self.specs]

    @staticmethod
    def from_json(obj: Iterable[dict]) -> "AttributeLayout":
        return AttributeLayout([AttributeSpec.from_json(o) for o in obj])


def standard_layout(style_specs: Sequence[AttributeSpec] = (),
                    pos=Quantile(lo=0.3, hi=0.7),
                    rot=Quantile(lo=0.0, hi=1.0),
                    size=Quantile(lo=0.25, hi=0.85)) -> AttributeLayout:
    """Pose prefix with the given sampling priors plus optional style slots."""
    pose = [
        AttributeSpec("pos_x", KIND_POS, pos),
        AttributeSpec("pos_y", KIND_POS, pos),
        AttributeSpec("rot", KIND_ROT, rot),
        AttributeSpec("size_w", KIND_SIZE, size),
        AttributeSpec("size_h", KIND_SIZE, size),
    ]
    return AttributeLayout(pose + list(style_specs))


class AttributeVector:
    """A layout plus float64 values, one per slot, all in [0, 1]."""

    __slots__ = ("layout", "values")

    def __init__(self, layout: AttributeLayout, values):
        v = np.asarray(values, dtype=np.float64)
        if v.shape != (layout.n,):
            raise ValueError(f"expected {layout.n} values, got shape {v.shape}")
        self.layout = layout
        self.values = v

    @property
    def pos(self) -> np.ndarray:
        return self.values[0:2]

    @property
    def rot(self) -> float:
        return float(self.values[2])

    @property
    def size(self) -> np.ndarray:
        return self.values[3:5]

    @property
    def styles(self) -> np.ndarray:
        return self.values[5:]

    def get(self, name: str) -> float:
        return float(self.values[self.layout.index(name)])

    def replaced(self, **named) -> "AttributeVector":
        v = self.values.copy()
        for name, val in named.items():
            v[self.layout.index(name)] = val
        return AttributeVector(self.layout, v)

    def copy(self) -> "AttributeVector":
        return AttributeVector(self.layout, self.values.copy())

    def as_dict(self) -> dict:
        return {n: float(v) for n, v in zip(self.layout.names, self.values)}

    @staticmethod
    def from_dict(layout: AttributeLayout, obj: dict, default: float = 0.0) -> "AttributeVector":
        return AttributeVector(layout, [obj.get(n, default) for n in layout.names])

    def __repr__(self):
        pairs = ", ".join(f"{n}={v:.3f}" for n, v in zip(self.layout.names, self.values))
        return f"AttributeVector({pairs})"


def circular_diff(a, b):
    """Signed wrap-aware difference a-b for rotation slots, in (-0.5, 0.5]."""
    d = (np.asarray(a, dtype=float) - np.asarray(b, dtype=float)) % 1.0
    return np.where(d > 0.5, d - 1.0, d)


def circular_dist(a, b, period: float = 1.0):
    """Shortest distance between two angles modulo the given period (in turns)."""
    d = np.abs((np.asarray(a, dtype=float) - np.asarray(b, dtype=float))) % period
    return np.minimum(d, period - d)
