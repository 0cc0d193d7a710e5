"""Capsule routing core.

A capsule pairs an encoder (parts to object attributes) with a decoder
(object attributes back to expected parts) and activates through routing
by agreement: re-decoded expected inputs are compared with the actual
inputs slot by slot through a Gaussian window, modulo the rotational
symmetry of each part's rendered appearance.  Activations above the
capsule's threshold become observations; their lifelong union is the
memory store, which also tracks the running mean probability of every
route input slot.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from .attributes import AttributeLayout, circular_diff

# Window widths per slot kind; probability ratios get their own scale.
DEFAULT_SIGMAS = {"pos": 0.05, "rot": 0.05, "size": 0.05, "style": 0.15}
SIGMA_PROB_RATIO = 0.5
DEFAULT_SIGMA_PX = 0.12
DEFAULT_THRESHOLD = 0.7

ROT_INDEX = 2
SIZE_W_INDEX = 3
SIZE_H_INDEX = 4


def window(x, sigma) -> float:
    """Gaussian agreement window with w(0) = 1 and sup w = 1.

    x may be a scalar or a vector; sigma is a positive scalar or a
    matching vector of widths.  Decreases monotonically in each |x_k|.
    """
    x = np.asarray(x, dtype=np.float64)
    s = np.asarray(sigma, dtype=np.float64)
    if np.any(s <= 0.0):
        raise ValueError("window widths must be positive")
    return float(np.exp(-0.5 * np.sum((x / s) ** 2)))


def slot_sigmas(layout: AttributeLayout, overrides: dict | None = None) -> np.ndarray:
    """Per-slot window widths derived from each slot's kind."""
    table = dict(DEFAULT_SIGMAS)
    if overrides:
        table.update(overrides)
    return np.array([table[s.kind] for s in layout.specs], dtype=np.float64)


@dataclass(frozen=True)
class Symmetry:
    """Rotational symmetry of a capsule's rendered appearance.

    period n means the appearance repeats every 1/n turn; None marks full
    circular symmetry (rotation is unobservable, so it never disagrees).
    swap_size adds the variants at odd quarter turns with the two size
    components exchanged, which covers rectangles: a quarter-turned box
    looks exactly like the unrotated box with width and height swapped.
    """

    period: int | None = 1
    swap_size: bool = False

    def __post_init__(self):
        if self.period is not None and self.period < 1:
            raise ValueError("symmetry period must be >= 1")
        if self.swap_size and self.period not in (1, 2):
            raise ValueError("swap_size only combines with period 1 or 2")

    def to_json(self) -> dict:
        return {"period": self.period, "swap_size": self.swap_size}

    @staticmethod
    def from_json(obj: dict) -> "Symmetry":
        return Symmetry(period=obj.get("period", 1), swap_size=obj.get("swap_size", False))


def rotational_variants(values, layout: AttributeLayout, symmetry: Symmetry) -> list:
    """All attribute vectors whose rendered appearance matches `values`."""
    v0 = np.asarray(values, dtype=np.float64)
    if symmetry.period is None:
        return [v0.copy()]
    steps = [(k / symmetry.period, False) for k in range(symmetry.period)]
    if symmetry.swap_size:
        steps += [(0.25 + k / symmetry.period, True) for k in range(symmetry.period)]
    out = []
    for shift, swap in steps:
        v = v0.copy()
        v[ROT_INDEX] = (v[ROT_INDEX] + shift) % 1.0
        if swap:
            v[SIZE_W_INDEX], v[SIZE_H_INDEX] = v[SIZE_H_INDEX], v[SIZE_W_INDEX]
        out.append(v)
    return out


def agreement_semantic(actual, expected, layout: AttributeLayout,
                       symmetry: Symmetry = Symmetry(), sigmas=None) -> np.ndarray:
    """Per-slot agreement vector in [0, 1]^n between an input and its estimate.

    Each slot difference passes through the Gaussian window; the rotation
    slot uses the wrap-aware difference.  The variant of `actual` from its
    rotational-equivalence set with the largest total agreement wins, so a
    quarter-turned square agrees perfectly with its unrotated estimate.
    """
    a = np.asarray(actual, dtype=np.float64)
    e = np.asarray(expected, dtype=np.float64)
    if a.shape != (layout.n,) or e.shape != (layout.n,):
        raise ValueError("attribute vectors do not match the layout")
    if sigmas is None:
        sigmas = slot_sigmas(layout)
    best = None
    best_l1 = -1.0
    for cand in rotational_variants(a, layout, symmetry):
        diff = cand - e
        if symmetry.period is None:
            diff[ROT_INDEX] = 0.0
        else:
            diff[ROT_INDEX] = circular_diff(cand[ROT_INDEX], e[ROT_INDEX])
        z = np.exp(-0.5 * (diff / sigmas) ** 2)
        l1 = float(z.sum())
        if l1 > best_l1:
            best_l1 = l1
            best = z
    return best


def agreement_primitive(patch, expected_patch, sigma_px: float = DEFAULT_SIGMA_PX) -> np.ndarray:
    """Length-1 agreement vector from the mean absolute pixel difference."""
    a = np.asarray(patch, dtype=np.float64)
    b = np.asarray(expected_patch, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError("patch shapes differ")
    return np.array([window(float(np.mean(np.abs(a - b))), sigma_px)])


def route_probability(parts, expected, agreement_fn, sigma_ratio: float = SIGMA_PROB_RATIO) -> float:
    """Activation probability of one route.

    parts is a sequence of (p, p_bar, actual) triples, expected the matching
    sequence of estimates; agreement_fn(actual, estimate) yields the
    agreement vector for one input.  The result averages, over inputs, the
    mean absolute agreement scaled by the window of the probability ratio
    p/p_bar - 1, so inputs that are usually more confident than today drag
    the route down.
    """
    parts = list(parts)
    expected = list(expected)
    if not parts:
        raise ValueError("a route needs at least one input")
    if len(parts) != len(expected):
        raise ValueError("inputs and estimates differ in length")
    total = 0.0
    for (p, p_bar, actual), est in zip(parts, expected):
        if not 0.0 < p <= 1.0 or not 0.0 < p_bar <= 1.0:
            raise ValueError("input probabilities must lie in (0, 1]")
        z = np.abs(np.asarray(agreement_fn(actual, est), dtype=np.float64))
        total += float(z.sum() / z.size) * window(p / p_bar - 1.0, sigma_ratio)
    return total / len(parts)


def route_select(candidates, threshold: float = DEFAULT_THRESHOLD, record=None):
    """Pick the route most likely used; ties fall to the lowest route id.

    candidates: iterable of (route_id, p, attrs).  When the winner clears
    the threshold and `record` is given, record(route_id, p, attrs) runs
    once for observation bookkeeping.  Returns (route_id, p, attrs,
    activated); the best candidate is reported even below threshold.
    """
    cands = sorted(candidates, key=lambda c: (-c[1], c[0]))
    if not cands:
        raise ValueError("no candidate routes")
    rid, p, attrs = cands[0]
    activated = p >= threshold
    if activated and record is not None:
        record(rid, p, attrs)
    return rid, p, attrs, activated


@dataclass
class ObservationEntry:
    """One activation: which capsule fired, through which route, on what."""

    capsule: str
    route: int
    p: float
    attrs: dict
    parts: tuple = ()
    pass_id: int = 0
    id: int | None = None

    def to_json(self) -> dict:
        return {
            "id": self.id,
            "pass_id": self.pass_id,
            "capsule": self.capsule,
            "route": self.route,
            "p": float(self.p),
            "attrs": {k: float(v) for k, v in self.attrs.items()},
            "parts": list(self.parts),
        }

    @staticmethod
    def from_json(obj: dict) -> "ObservationEntry":
        return ObservationEntry(
            capsule=obj["capsule"],
            route=int(obj["route"]),
            p=float(obj["p"]),
            attrs=dict(obj["attrs"]),
            parts=tuple(obj["parts"]),
            pass_id=int(obj["pass_id"]),
            id=int(obj["id"]),
        )


class MemoryStore:
    """Append-only observation log with running per-slot input means.

    p_bar(capsule, route, slot) is the arithmetic mean, over every logged
    activation of that route, of the probability of the observation it
    consumed in that input slot.  Routes fed by pixels have no part
    observations; their single input counts as probability 1.  The means
    are recomputable from the log alone.
    """

    def __init__(self):
        self.entries: list[ObservationEntry] = []
        self._sums: dict[tuple, list] = {}

    def __len__(self) -> int:
        return len(self.entries)

    def get(self, entry_id: int) -> ObservationEntry:
        return self.entries[entry_id]

    def _input_ps(self, entry: ObservationEntry) -> list:
        if not entry.parts:
            return [1.0]
        ps = []
        for pid in entry.parts:
            if not 0 <= pid < len(self.entries):
                raise ValueError(f"unknown part observation id {pid}")
            ps.append(self.entries[pid].p)
        return ps

    def append(self, entry: ObservationEntry) -> ObservationEntry:
        entry.id = len(self.entries)
        input_ps = self._input_ps(entry)
        self.entries.append(entry)
        for slot, p in enumerate(input_ps):
            acc = self._sums.setdefault((entry.capsule, entry.route, slot), [0.0, 0])
            acc[0] += p
            acc[1] += 1
        return entry

    def p_bar(self, capsule: str, route: int, slot: int, default: float | None = None):
        acc = self._sums.get((capsule, route, slot))
        if acc is None:
            return default
        return acc[0] / acc[1]

    def entries_for(self, capsule: str, route: int | None = None) -> list:
        out = [e for e in self.entries if e.capsule == capsule]
        if route is not None:
            out = [e for e in out if e.route == route]
        return out

    def recomputed_means(self) -> dict:
        """Fresh accumulation over the log, for checking the running means."""
        sums: dict[tuple, list] = {}
        for entry in self.entries:
            for slot, p in enumerate(self._input_ps(entry)):
                acc = sums.setdefault((entry.capsule, entry.route, slot), [0.0, 0])
                acc[0] += p
                acc[1] += 1
        return {k: s / n for k, (s, n) in sums.items()}

    def save(self, path) -> None:
        with open(path, "w") as f:
            for entry in self.entries:
                f.write(json.dumps(entry.to_json(), separators=(",", ":")) + "\n")

    @classmethod
    def load(cls, path) -> "MemoryStore":
        store = cls()
        with open(path) as f:
            for line in f:
                line = line.strip()
                if not line:
                    continue
                entry = ObservationEntry.from_json(json.loads(line))
                expected_id = entry.id
                store.append(entry)
                if entry.id != expected_id:
                    raise ValueError("memory log ids are not contiguous")
        return store


class TrigCodec:
    """Moves the cyclic rotation slot into a scaled (cos, sin) pair.

    Regression targets must be continuous in the inputs; a raw rotation in
    [0, 1) jumps at the wrap.  In model space the rot slot becomes two
    channels (cos+1)/2 and (sin+1)/2 of the angle 2*pi*fold*rot, and every
    other slot passes through unchanged.  fold > 1 compresses a 1/fold
    appearance period onto the full trig circle, so a square's quarter-turn
    ambiguity encodes without a seam.
    """

    def __init__(self, layout: AttributeLayout, fold: int = 1):
        if fold < 1:
            raise ValueError("fold must be >= 1")
        self.layout = layout
        self.fold = int(fold)
        self.dim = layout.n + 1

    def encode(self, values) -> np.ndarray:
        v = np.asarray(values, dtype=np.float64)
        single = v.ndim == 1
        v = np.atleast_2d(v)
        if v.shape[1] != self.layout.n:
            raise ValueError("values do not match the layout")
        ang = 2.0 * np.pi * self.fold * v[:, ROT_INDEX]
        c = 0.5 * (np.cos(ang) + 1.0)
        s = 0.5 * (np.sin(ang) + 1.0)
        out = np.concatenate(
            [v[:, :ROT_INDEX], c[:, None], s[:, None], v[:, ROT_INDEX + 1:]], axis=1)
        return out[0] if single else out

    def decode(self, coded) -> np.ndarray:
        c = np.asarray(coded, dtype=np.float64)
        single = c.ndim == 1
        c = np.atleast_2d(c)
        if c.shape[1] != self.dim:
            raise ValueError("coded values do not match the layout")
        cos = 2.0 * c[:, ROT_INDEX] - 1.0
        sin = 2.0 * c[:, ROT_INDEX + 1] - 1.0
        ang = np.arctan2(sin, cos)
        rot = (ang / (2.0 * np.pi * self.fold)) % (1.0 / self.fold)
        out = np.concatenate(
            [c[:, :ROT_INDEX], rot[:, None], c[:, ROT_INDEX + 2:]], axis=1)
        return out[0] if single else out


class PrimitiveEncoder:
    """Pixel patch to attribute vector through a conv regressor."""

    def __init__(self, model, layout: AttributeLayout, fold: int = 1):
        self.model = model
        self.codec = TrigCodec(layout, fold)
        if model.out_dim != self.codec.dim:
            raise ValueError("model output does not match the coded layout")

    @property
    def layout(self) -> AttributeLayout:
        return self.codec.layout

    @property
    def fold(self) -> int:
        return self.codec.fold

    def __call__(self, patch) -> np.ndarray:
        x = np.asarray(patch)
        single = x.ndim == 2
        if single:
            x = x[None]
        y = self.model.predict(x.astype(self.model.dtype, copy=False))
        vals = self.codec.decode(np.asarray(y, dtype=np.float64))
        return vals[0] if single else vals


class SemanticDecoder:
    """Parent attribute vector to the expected attributes of every part."""

    def __init__(self, model, parent_layout: AttributeLayout, part_layouts):
        self.model = model
        self.codec_in = TrigCodec(parent_layout)
        self.codecs_out = [TrigCodec(pl) for pl in part_layouts]
        out_dim = sum(c.dim for c in self.codecs_out)
        if model.in_dim != self.codec_in.dim or model.out_dim != out_dim:
            raise ValueError("model dimensions do not match the layouts")

    @property
    def part_layouts(self) -> list:
        return [c.layout for c in self.codecs_out]

    def __call__(self, parent_values) -> list:
        x = self.codec_in.encode(np.asarray(parent_values, dtype=np.float64))
        y = np.asarray(self.model.predict(x[None].astype(self.model.dtype, copy=False))[0],
                       dtype=np.float64)
        parts = []
        at = 0
        for codec in self.codecs_out:
            parts.append(codec.decode(y[at:at + codec.dim]))
            at += codec.dim
        return parts


@dataclass
class Route:
    """An inverted production: which parts feed this capsule, and how to
    run the rule forward again.

    part_slots lists the part capsule names in slot order, which is also
    the depth order when rendering (later slots composite over earlier
    ones).  Primitive routes have no part slots; their decoder is the
    renderer.  part_layouts are the per-slot attribute views the decoder
    produces; they start as copies of the part capsules' layouts and grow
    when the parent gains attributes.  canonical stores one reference
    configuration of part attribute vectors from training, used to
    estimate the parent's frame at inference.
    """

    id: int
    part_slots: tuple = ()
    decoder: object | None = None
    canonical: list | None = None
    part_layouts: list | None = None

    def to_json(self) -> dict:
        return {
            "id": self.id,
            "part_slots": list(self.part_slots),
            "canonical": None if self.canonical is None
            else [[float(x) for x in part] for part in self.canonical],
            "part_layouts": None if self.part_layouts is None
            else [pl.to_json() for pl in self.part_layouts],
        }

    @staticmethod
    def from_json(obj: dict) -> "Route":
        canonical = obj.get("canonical")
        layouts = obj.get("part_layouts")
        return Route(
            id=int(obj["id"]),
            part_slots=tuple(obj["part_slots"]),
            canonical=None if canonical is None
            else [np.asarray(part, dtype=np.float64) for part in canonical],
            part_layouts=None if layouts is None
            else [AttributeLayout.from_json(pl) for pl in layouts],
        )


@dataclass
class Capsule:
    """A symbol's capsule: attribute layout, symmetry, and its routes.

    Primitive capsules carry a shape name and a pixel encoder and have
    exactly one route whose decoder is the renderer; semantic capsules
    leave shape/encoder empty and may grow routes over time.
    """

    name: str
    layout: AttributeLayout
    symmetry: Symmetry = field(default_factory=Symmetry)
    threshold: float = DEFAULT_THRESHOLD
    shape: str | None = None
    encoder: object | None = None
    routes: list = field(default_factory=list)
    # regression encoders for styles grown at runtime, keyed by slot name;
    # original styles go through the closed-form weighted mean instead
    style_encoders: dict = field(default_factory=dict)

    @property
    def is_primitive(self) -> bool:
        return self.shape is not None

    def route(self, route_id: int) -> Route:
        for r in self.routes:
            if r.id == route_id:
                return r
        raise KeyError(f"capsule {self.name!r} has no route {route_id}")

    def add_route(self, part_slots, decoder=None, canonical=None,
                  part_layouts=None) -> Route:
        r = Route(id=len(self.routes), part_slots=tuple(part_slots),
                  decoder=decoder, canonical=canonical,
                  part_layouts=part_layouts)
        self.routes.append(r)
        return r
