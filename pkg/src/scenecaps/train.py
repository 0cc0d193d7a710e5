"""Training pipelines for both capsule kinds.

Primitive capsules get their encoder by regression against a synthesized
stream of rendered patches; the renderer thereby supervises its own
inverse.  Semantic capsules get their encoder in closed form (weighted
style means plus a rotated bounding box over part corners) and their
decoder by regressing augmented one-shot observations.  Growing a new
attribute extends the memory, retrains the decoder on style-filled
augmentations, and distills a fresh encoder head for the new slot out of
the decoder.
"""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass

import numpy as np

from .attributes import (AttributeLayout, AttributeSpec, AttributeVector,
                         KIND_STYLE, Quantile, circular_diff, circular_dist,
                         const_quantile, standard_layout)
from .capsule import (Capsule, MemoryStore, PrimitiveEncoder, Route,
                      SemanticDecoder, Symmetry, TrigCodec, rotational_variants)
from .regress import ConvModel, DenseModel, TrainConfig, train
from .sdf import (EffectsConfig, PrimitiveParams, apply_effects,
                  bilinear_resample, draw_primitive)

# Appearance symmetry of each renderable shape: a box looks the same after
# a half turn and, with width/height swapped, after a quarter turn; a
# circle carries no orientation at all.
PRIMITIVE_SYMMETRIES = {
    "circle": Symmetry(period=None),
    "square": Symmetry(period=2, swap_size=True),
    "triangle": Symmetry(period=1),
}

_LAYOUT_CACHE: dict = {}


def _any_layout(n: int) -> AttributeLayout:
    # pose prefix plus anonymous styles; used where only slot indices matter
    if n not in _LAYOUT_CACHE:
        _LAYOUT_CACHE[n] = standard_layout(
            [AttributeSpec(f"s{i}") for i in range(n - 5)])
    return _LAYOUT_CACHE[n]


def symmetry_fold(symmetry: Symmetry) -> int:
    """How many times the appearance repeats over one full turn."""
    if symmetry.period is None:
        return 1
    return symmetry.period * (2 if symmetry.swap_size else 1)


def primitive_layout(shape: str) -> AttributeLayout:
    """Standard pose plus intensity for one shape.

    Circles sample rotation as a constant zero: an oriented circle is not
    identifiable from pixels, so the slot stays pinned.
    """
    intensity = AttributeSpec("intensity", KIND_STYLE, Quantile(lo=0.3, hi=1.0))
    if shape == "circle":
        return standard_layout([intensity], rot=const_quantile(0.0))
    return standard_layout([intensity])


def canonicalize(values, symmetry: Symmetry) -> np.ndarray:
    """The appearance-equivalent representative with rot in [0, 1/fold)."""
    v = np.asarray(values, dtype=np.float64)
    fold = symmetry_fold(symmetry)
    if fold == 1:
        out = v.copy()
        out[2] = out[2] % 1.0
        return out
    hi = 1.0 / fold
    for var in rotational_variants(v, _any_layout(v.size), symmetry):
        r = var[2] % 1.0
        if r >= 1.0 - 1e-12:
            r = 0.0
        if r < hi:
            var[2] = r
            return var
    raise AssertionError("rotational variants left a gap")


# ------------------------------------------------------------------ datasets

@dataclass(frozen=True)
class SynthConfig:
    """Rendering setup for primitive training patches.

    Patches are rendered at a random native scale and resampled to the
    encoder resolution so the encoder sees the same interpolation blur the
    detector's sliding windows produce.
    """

    patch: int = 28
    scale_lo: int = 16
    scale_hi: int = 40
    p_resample: float = 0.5
    effects: EffectsConfig = EffectsConfig.none()


def synth_primitive_dataset(capsule: Capsule, n: int, rng,
                            config: SynthConfig = SynthConfig()):
    """Sample attrs through each slot's quantile, render, apply effects.

    Returns (patches, attrs): float arrays of shape (n, P, P) and (n, d).
    """
    if not capsule.is_primitive:
        raise ValueError("dataset synthesis needs a primitive capsule")
    if n < 1:
        raise ValueError("need at least one sample")
    layout = capsule.layout
    P = config.patch
    X = np.empty((n, P, P), dtype=np.float64)
    A = np.empty((n, layout.n), dtype=np.float64)
    for i in range(n):
        chi = rng.uniform(0.0, 1.0, size=layout.n)
        vals = np.array([float(spec.quantile(c))
                         for spec, c in zip(layout.specs, chi)])
        A[i] = vals
        params = PrimitiveParams(
            capsule.shape, pos=(vals[0], vals[1]), rot=vals[2],
            size=(vals[3], vals[4]),
            intensity=vals[layout.index("intensity")] if "intensity" in layout.names else 1.0)
        if config.p_resample > 0 and rng.random() < config.p_resample:
            native = int(rng.integers(config.scale_lo, config.scale_hi + 1))
        else:
            native = P
        img = draw_primitive(params, native, native)
        img = apply_effects(img, rng, config.effects)
        if native != P:
            img = bilinear_resample(img, P, P)
        X[i] = img
    return X, A


def primitive_targets(A, layout: AttributeLayout, symmetry: Symmetry) -> np.ndarray:
    """Canonicalized, trig-coded regression targets for raw attribute rows."""
    codec = TrigCodec(layout, fold=symmetry_fold(symmetry))
    canon = np.stack([canonicalize(row, symmetry) for row in np.atleast_2d(A)])
    return codec.encode(canon)


def primitive_validation_mae(encoder: PrimitiveEncoder, X, A,
                             symmetry: Symmetry) -> np.ndarray:
    """Held-out mean absolute error per slot, modulo appearance symmetry.

    Each prediction is compared against the truth through the prediction's
    rotational-equivalence set; the variant with the smallest total error
    counts.  Rotation errors are wrap-aware.
    """
    layout = encoder.layout
    preds = encoder(X)
    total = np.zeros(layout.n)
    for pred, truth in zip(np.atleast_2d(preds), np.atleast_2d(A)):
        best = None
        best_sum = math.inf
        for var in rotational_variants(pred, layout, symmetry):
            err = np.abs(var - truth)
            err[2] = circular_dist(var[2], truth[2])
            s = float(err.sum())
            if s < best_sum:
                best_sum = s
                best = err
        total += best
    return total / len(np.atleast_2d(A))


@dataclass(frozen=True)
class PrimitiveTrainConfig:
    samples: int = 21000
    holdout: int = 1000
    lr: float = 0.05
    batch: int = 64
    steps: int = 6000
    seed: int = 0
    channels: tuple = (16, 32, 32)
    hidden: int = 128
    synth: SynthConfig = SynthConfig(effects=EffectsConfig.default())


def train_primitive(capsule: Capsule, config: PrimitiveTrainConfig = PrimitiveTrainConfig(),
                    dataset=None) -> dict:
    """Fit the capsule's pixel encoder on synthesized patches.

    Installs the encoder on the capsule and returns a report with held-out
    per-slot MAE.  Falling short of the 0.05 bound is reported, not fatal.
    Training runs in float32 for speed; inference stays float64-friendly.
    """
    layout = capsule.layout
    symmetry = capsule.symmetry
    rng = np.random.default_rng(config.seed)
    if dataset is None:
        X, A = synth_primitive_dataset(capsule, config.samples, rng, config.synth)
    else:
        X, A = dataset
    if len(X) <= config.holdout:
        raise ValueError("dataset smaller than the holdout")
    n_train = len(X) - config.holdout
    Y = primitive_targets(A, layout, symmetry)
    model = ConvModel(in_size=X.shape[1], channels=config.channels,
                      hidden=config.hidden, out_dim=layout.n + 1,
                      seed=config.seed, dtype=np.float32)
    result = train(model, X[:n_train].astype(np.float32), Y[:n_train].astype(np.float32),
                   TrainConfig(lr=config.lr, batch=config.batch,
                               steps=config.steps, seed=config.seed))
    encoder = PrimitiveEncoder(model, layout, fold=symmetry_fold(symmetry))
    capsule.encoder = encoder
    mae = primitive_validation_mae(encoder, X[n_train:], A[n_train:], symmetry)
    report = {
        "capsule": capsule.name,
        "final_loss": result.final_loss,
        "mae": {name: float(m) for name, m in zip(layout.names, mae)},
        "ok": bool(np.all(mae <= 0.05)),
    }
    return report


# --------------------------------------------------- semantic closed forms

def rotation_matrix(rot: float) -> np.ndarray:
    th = 2.0 * math.pi * rot
    c, s = math.cos(th), math.sin(th)
    return np.array([[c, -s], [s, c]])


def part_corners(values) -> np.ndarray:
    """The four rotated bounding-box corners of one part, world frame, (4, 2)."""
    v = np.asarray(values, dtype=np.float64)
    hw, hh = v[3] / 2.0, v[4] / 2.0
    local = np.array([[-hw, -hh], [hw, -hh], [hw, hh], [-hw, hh]])
    return local @ rotation_matrix(v[2]).T + v[:2]


def gamma_semantic(parts, parent_layout: AttributeLayout | None = None,
                   parent_rot: float = 0.0) -> AttributeVector:
    """Closed-form parent attributes from part attribute vectors.

    Style slots are means over the parts carrying them, weighted by the
    length of each part's size vector.  Size is the extent of all part
    corners expressed in the parent's frame; pos is that box's midpoint
    mapped back to the world.  The parent's own rotation is a labeling
    choice, zero by default at composition time.
    """
    if not parts:
        raise ValueError("gamma needs at least one part")
    if parent_layout is None:
        parent_layout = parts[0].layout
    R = rotation_matrix(parent_rot)
    corners = np.vstack([part_corners(p.values) for p in parts])
    local = corners @ R  # rows times R^-T = world into parent frame
    lo = local.min(axis=0)
    hi = local.max(axis=0)
    mid_world = ((lo + hi) / 2.0) @ R.T
    values = np.zeros(parent_layout.n)
    values[0:2] = mid_world
    values[2] = parent_rot % 1.0
    values[3:5] = hi - lo
    weights = np.array([float(np.linalg.norm(p.values[3:5])) for p in parts])
    for name in parent_layout.style_names:
        num = 0.0
        den = 0.0
        for w, p in zip(weights, parts):
            if name in p.layout.names:
                num += w * p.get(name)
                den += w
        values[parent_layout.index(name)] = num / den if den > 0 else 0.0
    return AttributeVector(parent_layout, np.clip(values, 0.0, 1.0))


def register_parts(actual, actual_types, canonical, canonical_types,
                   max_assignments: int = 720):
    """Match observed parts to a reference configuration and estimate the
    rotation between the two frames.

    actual/canonical are sequences of attribute value arrays with parallel
    type name lists.  Within each type the assignment is chosen by brute
    force to minimize the rigid-registration residual.  Returns
    (rot, perm, cost) where perm[i] is the index into `actual` serving
    reference slot i.
    """
    if sorted(actual_types) != sorted(canonical_types):
        raise ValueError("part types do not match the reference")
    if not canonical:
        raise ValueError("registration needs at least one part")
    k = len(canonical)
    ca = np.array([np.asarray(v)[:2] for v in actual])
    ck = np.array([np.asarray(v)[:2] for v in canonical])
    ca_c = ca - ca.mean(axis=0)
    ck_c = ck - ck.mean(axis=0)

    # per-type permutations of actual indices against reference slot order
    slots_by_type: dict = {}
    for i, t in enumerate(canonical_types):
        slots_by_type.setdefault(t, []).append(i)
    actual_by_type: dict = {}
    for i, t in enumerate(actual_types):
        actual_by_type.setdefault(t, []).append(i)
    type_names = sorted(slots_by_type)
    n_assign = 1
    for t in type_names:
        n_assign *= math.factorial(len(slots_by_type[t]))

    def assignments():
        if n_assign > max_assignments:
            # too many: match within type by angle around the centroid
            perm = [0] * k
            for t in type_names:
                slots = slots_by_type[t]
                cands = actual_by_type[t]
                slot_ang = sorted(slots, key=lambda i: math.atan2(ck_c[i][1], ck_c[i][0]))
                cand_ang = sorted(cands, key=lambda i: math.atan2(ca_c[i][1], ca_c[i][0]))
                for s, c in zip(slot_ang, cand_ang):
                    perm[s] = c
            yield tuple(perm)
            return
        pools = [itertools.permutations(actual_by_type[t]) for t in type_names]
        for combo in itertools.product(*pools):
            perm = [0] * k
            for t, chosen in zip(type_names, combo):
                for s, c in zip(slots_by_type[t], chosen):
                    perm[s] = c
            yield tuple(perm)

    spread = float(np.abs(ck_c).max()) if k else 0.0
    best = None
    for perm in assignments():
        c = ca_c[list(perm)]
        if spread < 1e-9:
            # positions carry no orientation; fall back to part rotations
            sin_sum = 0.0
            cos_sum = 0.0
            for slot, idx in enumerate(perm):
                d = float(circular_diff(actual[idx][2], canonical[slot][2]))
                sin_sum += math.sin(2.0 * math.pi * d)
                cos_sum += math.cos(2.0 * math.pi * d)
            if math.hypot(sin_sum, cos_sum) < 1e-9:
                theta = 0.0
            else:
                theta = (math.atan2(sin_sum, cos_sum) / (2.0 * math.pi)) % 1.0
            cost = 0.0
        else:
            cross = float(np.sum(ck_c[:, 0] * c[:, 1] - ck_c[:, 1] * c[:, 0]))
            dot = float(np.sum(ck_c[:, 0] * c[:, 0] + ck_c[:, 1] * c[:, 1]))
            if abs(cross) < 1e-15 and abs(dot) < 1e-15:
                theta = 0.0
            else:
                theta = (math.atan2(cross, dot) / (2.0 * math.pi)) % 1.0
            R = rotation_matrix(theta)
            cost = float(np.sum((ck_c @ R.T - c) ** 2))
        if best is None or cost < best[2] - 1e-15:
            best = (theta, perm, cost)
    return best


# ------------------------------------------------------------- augmentation

@dataclass(frozen=True)
class AugmentConfig:
    """Feature-preserving transforms for one-shot decoder training.

    n transformed copies are generated per call (the originals are always
    included).  Translations are clipped so every part position keeps a
    margin inside the canvas; rotation and uniform scaling preserve the
    relative pose.  Style constants from the grid fill attribute slots the
    memory has never seen above epsilon.
    """

    n: int = 800
    translate: float = 0.25
    rotate: bool = True
    scale_lo: float = 0.75
    scale_hi: float = 1.25
    style_grid: tuple = (0.0, 0.25, 0.5, 0.75, 1.0)
    epsilon: float = 0.02
    margin: float = 0.02

    def __post_init__(self):
        if not (0.0 < self.scale_lo <= self.scale_hi):
            raise ValueError("scale range must be positive")
        if not 0.0 < self.epsilon <= 0.2:
            raise ValueError("epsilon must lie in (0, 0.2]")


def unused_styles(samples, view_layouts, parent_layout: AttributeLayout,
                  epsilon: float) -> list:
    """Parent style slots never observed above epsilon in any sample part."""
    out = []
    for name in parent_layout.style_names:
        seen = False
        for parts in samples:
            for vals, view in zip(parts, view_layouts):
                if name in view.names and abs(vals[view.index(name)]) > epsilon:
                    seen = True
                    break
            if seen:
                break
        if not seen:
            out.append(name)
    return out


def transform_parts(parts, theta: float, scale: float, shift, pivot) -> list:
    """Joint rigid+scale transform of part attribute values about a pivot."""
    R = rotation_matrix(theta)
    shift = np.asarray(shift, dtype=np.float64)
    pivot = np.asarray(pivot, dtype=np.float64)
    out = []
    for v in parts:
        nv = np.asarray(v, dtype=np.float64).copy()
        nv[0:2] = (R @ (nv[0:2] - pivot)) * scale + pivot + shift
        nv[2] = (nv[2] + theta) % 1.0
        nv[3:5] = nv[3:5] * scale
        out.append(nv)
    return out


def _feasible_shift(positions, lo_req, hi_req, margin, rng):
    lo = max(-lo_req, margin - float(np.min(positions)))
    hi = min(hi_req, 1.0 - margin - float(np.max(positions)))
    if lo > hi:
        mid = (lo + hi) / 2.0
        return mid
    return float(rng.uniform(lo, hi))


def augment(samples, view_layouts, parent_layout: AttributeLayout,
            config: AugmentConfig, rng) -> list:
    """Labeled training pairs from memory samples.

    samples: list of part-value-list configurations.  Returns a list of
    (parent_values, part_values_list) with the originals first, then
    config.n transformed copies cycling over the samples.  Labels come
    from gamma_semantic with the applied rotation as the parent rotation,
    so the decoder learns rotated configurations against a rotating frame.
    """
    if not samples:
        raise ValueError("augmentation needs at least one sample")
    unused = unused_styles(samples, view_layouts, parent_layout, config.epsilon)

    def label(parts_vals, theta):
        parts = [AttributeVector(vl, v) for vl, v in zip(view_layouts, parts_vals)]
        return gamma_semantic(parts, parent_layout, parent_rot=theta).values

    out = []
    for parts in samples:
        out.append((label(parts, 0.0), [np.asarray(v, dtype=np.float64).copy()
                                        for v in parts]))
    pivots = [out[i][0][0:2].copy() for i in range(len(samples))]
    for j in range(config.n):
        base = samples[j % len(samples)]
        pivot = pivots[j % len(samples)]
        fills = {name: config.style_grid[int(rng.integers(len(config.style_grid)))]
                 for name in unused}
        parts = []
        for v, view in zip(base, view_layouts):
            nv = np.asarray(v, dtype=np.float64).copy()
            for name, c in fills.items():
                if name in view.names:
                    nv[view.index(name)] = c
            parts.append(nv)
        theta = float(rng.uniform(0.0, 1.0)) if config.rotate else 0.0
        scale = float(rng.uniform(config.scale_lo, config.scale_hi))
        placed = transform_parts(parts, theta, scale, (0.0, 0.0), pivot)
        xs = np.array([p[0] for p in placed])
        ys = np.array([p[1] for p in placed])
        dx = _feasible_shift(xs, config.translate, config.translate, config.margin, rng)
        dy = _feasible_shift(ys, config.translate, config.translate, config.margin, rng)
        final = transform_parts(parts, theta, scale, (dx, dy), pivot)
        lab = label(final, theta)
        for name, c in fills.items():
            lab[parent_layout.index(name)] = c
        out.append((lab, final))
    return out


# ------------------------------------------------------- semantic training

@dataclass(frozen=True)
class SemanticTrainConfig:
    hidden: int = 96
    lr: float = 0.05
    batch: int = 64
    steps: int = 6000
    seed: int = 0
    holdout_every: int = 10  # every k-th augmented pair is validation


def project_attrs(attrs: dict, layout: AttributeLayout) -> np.ndarray:
    """Attribute dict onto a layout's slots, missing names filling as zero."""
    return np.array([float(attrs.get(n, 0.0)) for n in layout.names])


def route_samples(capsule: Capsule, route: Route, memory: MemoryStore) -> list:
    """Part configurations this route has activated on, in slot order."""
    out = []
    for entry in memory.entries_for(capsule.name, route.id):
        parts = [project_attrs(memory.get(pid).attrs, view)
                 for pid, view in zip(entry.parts, route.part_layouts)]
        out.append(parts)
    return out


def _fit_dense(X, Y, hidden, config: SemanticTrainConfig):
    model = DenseModel([X.shape[1], hidden, hidden, hidden, Y.shape[1]],
                       seed=config.seed)
    result = train(model, X, Y, TrainConfig(lr=config.lr, batch=config.batch,
                                            steps=config.steps, seed=config.seed))
    return model, result


def train_semantic(capsule: Capsule, route: Route, memory: MemoryStore,
                   aug: AugmentConfig = AugmentConfig(),
                   fit: SemanticTrainConfig = SemanticTrainConfig(),
                   rng=None) -> dict:
    """Fit the route's decoder from its memory and install it.

    The first memory configuration becomes the route's reference frame for
    rotation registration.  Raises on empty memory; poor validation is
    reported, not fatal.
    """
    samples = route_samples(capsule, route, memory)
    if not samples:
        raise ValueError(f"route {capsule.name}/{route.id} has no memory to train on")
    if rng is None:
        rng = np.random.default_rng(fit.seed)
    route.canonical = [v.copy() for v in samples[0]]
    pairs = augment(samples, route.part_layouts, capsule.layout, aug, rng)

    codec_in = TrigCodec(capsule.layout)
    codecs_out = [TrigCodec(vl) for vl in route.part_layouts]
    X = codec_in.encode(np.stack([p for p, _ in pairs]))
    Y = np.concatenate([codec.encode(np.stack([parts[i] for _, parts in pairs]))
                        for i, codec in enumerate(codecs_out)], axis=1)
    idx = np.arange(len(pairs))
    val_mask = (idx % fit.holdout_every) == fit.holdout_every - 1
    if val_mask.sum() == 0 or (~val_mask).sum() == 0:
        val_mask = np.zeros(len(pairs), dtype=bool)
    model, result = _fit_dense(X[~val_mask], Y[~val_mask], fit.hidden, fit)
    decoder = SemanticDecoder(model, capsule.layout, route.part_layouts)
    route.decoder = decoder

    mae = {}
    if val_mask.sum():
        val_pairs = [pairs[i] for i in np.nonzero(val_mask)[0]]
        errs = np.zeros(max(vl.n for vl in route.part_layouts))
        counts = np.zeros_like(errs)
        for parent_vals, parts in val_pairs:
            decoded = decoder(parent_vals)
            for got, want, vl in zip(decoded, parts, route.part_layouts):
                e = np.abs(got - want)
                e[2] = circular_dist(got[2], want[2])
                errs[:vl.n] += e
                counts[:vl.n] += 1
        per_slot = errs / np.maximum(counts, 1)
        mae = {f"slot{i}": float(v) for i, v in enumerate(per_slot)}
    report = {
        "capsule": capsule.name,
        "route": route.id,
        "samples": len(samples),
        "pairs": len(pairs),
        "final_loss": result.final_loss,
        "mae": mae,
        "ok": bool(all(v <= 0.1 for v in mae.values())) if mae else None,
    }
    return report


def expected_inputs(route: Route, parent_values) -> list:
    """The decoder's per-part estimates for a parent attribute vector."""
    if route.decoder is None:
        raise ValueError(f"route {route.id} has no trained decoder")
    return route.decoder(np.asarray(parent_values, dtype=np.float64))


def learned_style_values(capsule: Capsule, route: Route, part_values) -> dict:
    """Regressed values for styles grown at runtime, from part views."""
    if not capsule.style_encoders:
        return {}
    x = np.concatenate([np.asarray(v, dtype=np.float64) for v in part_values])
    out = {}
    for name, model in capsule.style_encoders.items():
        out[name] = float(model.predict(x[None].astype(model.dtype))[0][0])
    return out


# --------------------------------------------------------- attribute growth

def _topo_order(capsules: dict) -> list:
    """Part-before-parent order over the capsule dict."""
    deps = {name: set() for name in capsules}
    for name, cap in capsules.items():
        for route in cap.routes:
            deps[name].update(s for s in route.part_slots if s in capsules)
    out = []
    ready = sorted(n for n, d in deps.items() if not d)
    deps = {n: set(d) for n, d in deps.items()}
    while ready:
        n = ready.pop(0)
        out.append(n)
        changed = []
        for m, d in deps.items():
            if n in d:
                d.discard(n)
                if not d and m not in out and m not in ready:
                    changed.append(m)
        ready.extend(sorted(changed))
    if len(out) != len(capsules):
        raise ValueError("capsule graph has a cycle")
    return out


def add_attribute(network, capsule_name: str, attr_name: str,
                  memory: MemoryStore,
                  aug: AugmentConfig = AugmentConfig(),
                  fit: SemanticTrainConfig = SemanticTrainConfig()) -> dict:
    """Grow a semantic capsule by one style slot and retrain around it.

    Memory entries gain the slot at zero; every route's part views gain it
    so the decoder can carry it downward; the decoder retrains on
    style-filled augmentations; and a fresh regression head learns to read
    the slot back out of decoded parts.
    """
    cap = network.capsules[capsule_name]
    if attr_name in cap.layout.names:
        raise ValueError(f"attribute {attr_name!r} already exists on {capsule_name}")
    if cap.is_primitive:
        raise ValueError("primitive capsules have a fixed attribute set")

    old_preds = {}
    for route in cap.routes:
        if route.decoder is not None:
            for i, parts in enumerate(route_samples(cap, route, memory)):
                parent = gamma_semantic(
                    [AttributeVector(vl, v) for vl, v in zip(route.part_layouts, parts)],
                    cap.layout)
                old_preds[(route.id, i)] = [p.copy() for p in route.decoder(parent.values)]

    spec = AttributeSpec(attr_name, KIND_STYLE, const_quantile(0.0))
    cap.layout = cap.layout.with_style(spec)
    for entry in memory.entries_for(capsule_name):
        entry.attrs.setdefault(attr_name, 0.0)

    reports = []
    gamma_report = {}
    for route in cap.routes:
        route.part_layouts = [vl if attr_name in vl.names else vl.with_style(spec)
                              for vl in route.part_layouts]
        reports.append(train_semantic(cap, route, memory, aug, fit))

        # distill the new slot's encoder out of the freshly trained decoder
        rng = np.random.default_rng(fit.seed + 1)
        samples = route_samples(cap, route, memory)
        pairs = augment(samples, route.part_layouts, cap.layout, aug, rng)
        new_idx = cap.layout.index(attr_name)
        Xg = []
        Yg = []
        for parent_vals, _parts in pairs:
            decoded = route.decoder(parent_vals)
            Xg.append(np.concatenate(decoded))
            Yg.append([parent_vals[new_idx]])
        Xg = np.asarray(Xg)
        Yg = np.asarray(Yg)
        n_val = max(1, len(Xg) // 10)
        model, _ = _fit_dense(Xg[:-n_val], Yg[:-n_val], 32,
                              SemanticTrainConfig(hidden=32, lr=fit.lr,
                                                  batch=fit.batch,
                                                  steps=fit.steps, seed=fit.seed))
        cap.style_encoders[attr_name] = model
        got = model.predict(Xg[-n_val:].astype(model.dtype))
        gamma_report[route.id] = float(np.mean(np.abs(got - Yg[-n_val:])))

    drift = 0.0
    for route in cap.routes:
        for i, parts in enumerate(route_samples(cap, route, memory)):
            key = (route.id, i)
            if key not in old_preds:
                continue
            parent = gamma_semantic(
                [AttributeVector(vl, v) for vl, v in zip(route.part_layouts, parts)],
                cap.layout)
            new_parts = route.decoder(parent.values)
            for old, new in zip(old_preds[key], new_parts):
                d = np.abs(new[:len(old)] - old)
                d[2] = circular_dist(new[2], old[2])
                drift = max(drift, float(d.max()))

    return {
        "capsule": capsule_name,
        "attribute": attr_name,
        "routes": reports,
        "gamma_new_mae": gamma_report,
        "old_slot_drift": drift,
    }


def inherit_attribute(network, source_name: str, attr_name: str,
                      memory: MemoryStore,
                      aug: AugmentConfig = AugmentConfig(),
                      fit: SemanticTrainConfig = SemanticTrainConfig()) -> list:
    """Propagate a grown attribute to every consumer, parts before parents."""
    reports = []
    carriers = {source_name}
    for name in _topo_order(network.capsules):
        cap = network.capsules[name]
        if name in carriers or cap.is_primitive:
            continue
        consumes = any(s in carriers for r in cap.routes for s in r.part_slots)
        if not consumes:
            continue
        if attr_name not in cap.layout.names:
            reports.append(add_attribute(network, name, attr_name, memory, aug, fit))
        carriers.add(name)
    return reports
