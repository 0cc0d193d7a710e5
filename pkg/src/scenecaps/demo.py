"""Bundled demo scenes and oracle scripts for the growth walkthrough.

A five-part spaceship, a three-rock asteroid, a two-rock asteroid
variant, and a composite belt scene, all built from the primitive
shapes.  Script A names the whole ship in one go; script B first splits
it into a booster and a shuttle and then roofs them with a ship capsule.

The geometry respects the detector's operating envelope: every part has
some sliding window that contains it with a small interior margin while
every other part stays clear of that window, so each shape owns a clean
local patch.  With window scales of 12/20/32 and parts of 10 to 13
pixels that requires bounding-box gaps of roughly 8 pixels, hence the
96 pixel canvas (128 for the two-object belt).
"""

import json
import os

import numpy as np

from .sdf import PrimitiveParams, composite_over

# canonical part tables, canvas fractions at unit scale (96px canvas)
SHIP_PARTS = (
    ("square", (0.500, 0.495), (0.115, 0.115), 0.9),    # body
    ("triangle", (0.500, 0.250), (0.125, 0.105), 0.9),  # nose cone
    ("triangle", (0.255, 0.495), (0.105, 0.125), 0.9),  # left fin
    ("triangle", (0.745, 0.495), (0.105, 0.125), 0.9),  # right fin
    ("circle", (0.500, 0.745), (0.115, 0.115), 0.9),    # crew pod
)

ASTEROID_PARTS = (
    ("circle", (0.280, 0.360), (0.130, 0.130), 0.80),
    ("circle", (0.550, 0.330), (0.120, 0.120), 0.85),
    ("circle", (0.420, 0.600), (0.125, 0.125), 0.75),
)

ASTEROID_VARIANT_PARTS = (
    ("circle", (0.340, 0.440), (0.130, 0.130), 0.80),
    ("circle", (0.680, 0.500), (0.110, 0.110), 0.85),
)

SCENE_SIZE = 96
BELT_SIZE = 128


def _params(parts, center=(0.5, 0.5), scale: float = 1.0) -> list:
    out = []
    for shape, pos, size, intensity in parts:
        px = (pos[0] - 0.5) * scale + center[0]
        py = (pos[1] - 0.5) * scale + center[1]
        out.append(PrimitiveParams(shape, pos=(px, py), rot=0.0,
                                   size=(size[0] * scale, size[1] * scale),
                                   intensity=intensity))
    return out


def _compose(params, H: int, W: int) -> np.ndarray:
    layer = np.zeros((H, W))
    for p in params:
        layer = composite_over(layer, p)
    return layer


def ship_scene(H: int = SCENE_SIZE, W: int = SCENE_SIZE) -> np.ndarray:
    return _compose(_params(SHIP_PARTS), H, W)


def asteroid_scene(H: int = SCENE_SIZE, W: int = SCENE_SIZE) -> np.ndarray:
    return _compose(_params(ASTEROID_PARTS), H, W)


def asteroid_variant_scene(H: int = SCENE_SIZE, W: int = SCENE_SIZE) -> np.ndarray:
    return _compose(_params(ASTEROID_VARIANT_PARTS), H, W)


def belt_scene(H: int = BELT_SIZE, W: int = BELT_SIZE) -> np.ndarray:
    """Ship and asteroid sharing one canvas.

    The 0.75 scale against the 4/3 larger canvas reproduces the standalone
    scenes' pixel geometry exactly, only shifted, so every clean-window
    argument carries over.
    """
    params = _params(SHIP_PARTS, center=(0.328125, 0.5), scale=0.75)
    params += _params(ASTEROID_PARTS, center=(0.78125, 0.359375), scale=0.75)
    return _compose(params, H, W)


# Root references are "capsule:k": the k-th root of that type with roots
# ordered by (pos_x, pos_y).  For the ship that makes triangle:0 the left
# fin, triangle:1 the nose, triangle:2 the right fin.
SCRIPT_A = {
    "scenes": ["ship.png", "asteroid.png", "asteroid2.png"],
    "answers": [
        {"match": "A2", "answer": {"cause": "A2", "name": "ship"}},
        {"match": "any", "answer": {"cause": "A2", "name": "asteroid"}},
        {"match": "any", "answer": {"cause": "A1", "capsule": "asteroid"}},
    ],
}

SCRIPT_B = {
    "scenes": ["ship.png", "asteroid.png", "asteroid2.png"],
    "answers": [
        {"match": "A2", "answer": {"cause": "A2", "name": "ship", "groups": [
            {"name": "booster",
             "roots": ["square:0", "triangle:0", "triangle:2"]},
            {"name": "shuttle", "roots": ["triangle:1", "circle:0"]},
        ]}},
        {"match": "any", "answer": {"cause": "A2", "name": "asteroid"}},
        {"match": "any", "answer": {"cause": "A1", "capsule": "asteroid"}},
    ],
}

BELT_ANSWER = {"match": "any",
               "answer": {"cause": "A2", "name": "belt-scene"}}


def write_bundle(directory) -> dict:
    """Write the demo scenes and both oracle scripts; returns the paths."""
    from .service import encode_png
    os.makedirs(directory, exist_ok=True)
    scenes = {
        "ship.png": ship_scene(),
        "asteroid.png": asteroid_scene(),
        "asteroid2.png": asteroid_variant_scene(),
        "belt.png": belt_scene(),
    }
    paths = {}
    for name, layer in scenes.items():
        path = os.path.join(directory, name)
        with open(path, "wb") as fh:
            fh.write(encode_png(layer))
        paths[name] = path
    for name, script in (("script_a.json", SCRIPT_A),
                         ("script_b.json", SCRIPT_B)):
        path = os.path.join(directory, name)
        with open(path, "w") as fh:
            json.dump(script, fh, indent=2, sort_keys=True)
            fh.write("\n")
        paths[name] = path
    return paths
