"""Scene-file ingestion and validation.

Scene files are YAML documents with a versioned ``schema`` header.  Unknown
keys are rejected and every diagnostic names the offending field.  Captions
may use token names from the blob-world vocabulary or raw integer ids.

Schema (defaults in parentheses)::

    schema: 1
    world:                     # optional; builds the template domain
      cells: 3
      cell_px: 4
      colors: [red, green, blue]
    global_caption: [red]
    background_caption: [red]  # optional; defaults to global_caption
    layers:                    # object layers; background is implicit
      - caption: [red]
        box: [x_min, y_min, x_max, y_max]   # or  mask: path.pgm
        guidance:
          mode: constant       # constant | dynamic-mean | dynamic-random
                               # | suppress-only | null
          color: red           # constant/suppress-only: named colour ...
          scale: 1.0
          delta: [..]          # ... or an explicit channel vector
          lambda: 1.0          # dynamic modes
          K: 20
    sampler:
      T: 50        # (50)
      t0: 15       # (15)
      gamma: 7.5   # (7.5)
      seed: 0      # (0)
      deterministic: true
      kind: linear # linear | scaled-linear
      steps: null  # strided sampling step count
    output: out.ppm            # optional
"""
from __future__ import annotations

from pathlib import Path
from typing import Any, Optional

import numpy as np
import yaml

from .errors import ConfigError, DimensionError
from .guidance import (
    NULL_GUIDANCE,
    BoundingBox,
    RegionMask,
    VisionGuidance,
    mask_from_image,
    rasterize_box,
)
from .imageio import read_pgm
from .renderer import Layer, SceneSpec, background_layer
from .scores import TokenSequence
from .world import COLOR_TABLE, BlobWorld, make_blob_world

SCHEMA_VERSION = 1

_SAMPLER_DEFAULTS = {
    "T": 50,
    "t0": 15,
    "gamma": 7.5,
    "seed": 0,
    "deterministic": True,
    "kind": "linear",
    "steps": None,
}


def _check_keys(mapping: dict, allowed: set[str], where: str) -> None:
    if not isinstance(mapping, dict):
        raise ConfigError(f"{where}: expected a mapping, got {type(mapping).__name__}")
    unknown = set(mapping) - allowed
    if unknown:
        raise ConfigError(f"{where}: unknown key(s) {sorted(unknown)}")


def _caption(value: Any, world: BlobWorld, where: str) -> TokenSequence:
    if not isinstance(value, list) or not value:
        raise ConfigError(f"{where}: caption must be a non-empty list of tokens")
    tokens = []
    for item in value:
        if isinstance(item, bool) or not isinstance(item, (int, str)):
            raise ConfigError(f"{where}: token {item!r} must be a name or integer id")
        tokens.append(world.token(item) if isinstance(item, str) else item)
    return TokenSequence(tokens)


def _guidance(doc: Any, world: BlobWorld, mask: RegionMask, where: str) -> VisionGuidance:
    if doc is None:
        return NULL_GUIDANCE
    _check_keys(doc, {"mode", "color", "scale", "delta", "lambda", "K"}, where)
    mode = doc.get("mode", "constant")
    if mode == "null":
        return NULL_GUIDANCE
    if mode in ("constant", "suppress-only"):
        if "delta" in doc:
            delta = np.asarray(doc["delta"], dtype=np.float64)
        elif "color" in doc:
            if doc["color"] not in COLOR_TABLE:
                raise ConfigError(f"{where}.color: unknown colour {doc['color']!r}")
            delta = world.guidance_delta(doc["color"], float(doc.get("scale", 1.0)))
        else:
            raise ConfigError(f"{where}: {mode} guidance needs 'delta' or 'color'")
        if delta.shape != (world.channels,):
            raise DimensionError(
                f"{where}.delta: expected {world.channels} channels, got {delta.shape}"
            )
        return VisionGuidance(mode=mode, mask=mask, delta=delta)
    if mode in ("dynamic-mean", "dynamic-random"):
        lam = float(doc.get("lambda", 1.0))
        K = int(doc.get("K", 20))
        # Placeholder delta; the real vector is resolved from attention at x_T.
        return VisionGuidance(
            mode=mode, mask=mask, delta=np.zeros(world.channels), lam=lam, K=K
        )
    raise ConfigError(f"{where}.mode: unknown guidance mode {mode!r}")


def _layer(doc: Any, world: BlobWorld, base: Path, index: int) -> Layer:
    where = f"layers[{index}]"
    _check_keys(doc, {"caption", "box", "mask", "guidance"}, where)
    if "caption" not in doc:
        raise ConfigError(f"{where}: missing required key 'caption'")
    caption = _caption(doc["caption"], world, f"{where}.caption")
    h, w = world.height, world.width
    if ("box" in doc) == ("mask" in doc):
        raise ConfigError(f"{where}: exactly one of 'box' or 'mask' is required")
    if "box" in doc:
        box = doc["box"]
        if not (isinstance(box, list) and len(box) == 4):
            raise ConfigError(f"{where}.box: expected [x_min, y_min, x_max, y_max]")
        mask = rasterize_box(BoundingBox(*(int(v) for v in box)), h, w)
    else:
        gray = read_pgm(base / doc["mask"])
        if gray.shape != (h, w):
            raise DimensionError(
                f"{where}.mask: resolution {gray.shape} != render {(h, w)}"
            )
        mask = mask_from_image(gray)
    guidance = _guidance(doc.get("guidance"), world, mask, f"{where}.guidance")
    return Layer(caption=caption, mask=mask, guidance=guidance)


def _world(doc: Any) -> BlobWorld:
    if doc is None:
        return make_blob_world()
    _check_keys(doc, {"cells", "cell_px", "colors", "blob_margin"}, "world")
    return make_blob_world(
        cells=int(doc.get("cells", 3)),
        cell_px=int(doc.get("cell_px", 4)),
        colors=tuple(doc.get("colors", ("red", "green", "blue"))),
        blob_margin=int(doc.get("blob_margin", 1)),
    )


def load_scene(path) -> tuple[SceneSpec, BlobWorld]:
    """Parse and validate a scene file; returns the spec and its template domain."""
    path = Path(path)
    with open(path) as f:
        doc = yaml.safe_load(f)
    if not isinstance(doc, dict):
        raise ConfigError(f"{path}: scene file must be a mapping")
    _check_keys(
        doc,
        {
            "schema",
            "world",
            "global_caption",
            "background_caption",
            "layers",
            "sampler",
            "output",
        },
        str(path),
    )
    if doc.get("schema") != SCHEMA_VERSION:
        raise ConfigError(
            f"schema: expected version {SCHEMA_VERSION}, got {doc.get('schema')!r}"
        )
    world = _world(doc.get("world"))
    if "global_caption" not in doc:
        raise ConfigError("global_caption: missing required key")
    global_caption = _caption(doc["global_caption"], world, "global_caption")
    bg_caption = (
        _caption(doc["background_caption"], world, "background_caption")
        if "background_caption" in doc
        else global_caption
    )

    layers = [
        _layer(item, world, path.parent, i)
        for i, item in enumerate(doc.get("layers") or [])
    ]
    layers.append(background_layer(bg_caption, world.height, world.width))

    sampler = dict(_SAMPLER_DEFAULTS)
    sdoc = doc.get("sampler") or {}
    _check_keys(sdoc, set(_SAMPLER_DEFAULTS), "sampler")
    sampler.update(sdoc)

    scene = SceneSpec(
        global_caption=global_caption,
        layers=tuple(layers),
        height=world.height,
        width=world.width,
        channels=world.channels,
        gamma=float(sampler["gamma"]),
        T=int(sampler["T"]),
        t0=int(sampler["t0"]),
        kind=str(sampler["kind"]),
        num_sample_steps=None if sampler["steps"] is None else int(sampler["steps"]),
        deterministic=bool(sampler["deterministic"]),
        seed=int(sampler["seed"]),
    )
    return scene, world


def parse_scene(path, world: Optional[BlobWorld] = None) -> SceneSpec:
    """Parse a scene file into a fully validated SceneSpec with defaults applied."""
    scene, _ = load_scene(path)
    return scene


def scene_echo(scene: SceneSpec) -> dict:
    """Resolved configuration, including applied defaults, for logging."""
    return {
        "global_caption": list(scene.global_caption.tokens),
        "resolution": [scene.height, scene.width, scene.channels],
        "layers": [
            {
                "caption": list(l.caption.tokens),
                "guidance_mode": l.guidance.mode,
                "mask_pixels": int(l.mask.mask.sum()),
                "background": l.is_background,
            }
            for l in scene.layers
        ],
        "sampler": {
            "T": scene.T,
            "t0": scene.t0,
            "gamma": scene.gamma,
            "kind": scene.kind,
            "steps": scene.num_sample_steps,
            "deterministic": scene.deterministic,
            "seed": scene.seed,
        },
    }
